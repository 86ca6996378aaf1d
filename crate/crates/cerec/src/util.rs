//! Small numeric and RNG helpers shared across modules.

use ndarray::ArrayView1;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// Max-subtraction stabilized softmax. Returns a vector that sums to 1
/// for any finite input.
pub fn softmax_stable(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow for large |x|.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// ln sigma(x), stable for large negative x.
pub fn ln_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn leaky_relu_deriv(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        slope
    }
}

/// Cosine similarity; a zero-norm operand yields 0 rather than NaN.
pub fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let dot = a.dot(&b);
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        log::debug!("cosine of zero-norm embedding defined as 0");
        0.0
    } else {
        dot / (na * nb)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive an independent seed from a base seed, a purpose tag, and a
/// stream index. Distinct (tag, stream) pairs give decorrelated streams,
/// which keeps e.g. per-epoch shuffling independent of negative draws.
pub fn derive_seed(seed: u64, tag: &str, stream: u64) -> u64 {
    let mut h = splitmix64(seed);
    for b in tag.as_bytes() {
        h = splitmix64(h ^ u64::from(*b));
    }
    splitmix64(h ^ stream)
}

/// Deterministic RNG for a derived stream.
pub fn stream_rng(seed: u64, tag: &str, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, stream))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant() {
        let scores = [0.3, -1.2, 4.0, 0.0];
        let p = softmax_stable(&scores);
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);

        let shifted: Vec<f64> = scores.iter().map(|s| s + 123.456).collect();
        let q = softmax_stable(&shifted);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_handles_extreme_scores() {
        let p = softmax_stable(&[1000.0, 0.0]);
        assert!(p[0] > 0.999_999);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn ln_sigmoid_matches_naive_in_safe_range() {
        for x in [-5.0, -0.5, 0.0, 0.5, 5.0] {
            let naive = sigmoid(x).ln();
            assert!((ln_sigmoid(x) - naive).abs() < 1e-12);
        }
        assert!(ln_sigmoid(-1000.0).is_finite());
    }

    #[test]
    fn cosine_zero_norm_is_zero() {
        let a = array![0.0, 0.0];
        let b = array![1.0, 2.0];
        assert_eq!(cosine(a.view(), b.view()), 0.0);
        assert!((cosine(b.view(), b.view()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn derived_streams_differ() {
        let a = derive_seed(7, "shuffle", 0);
        let b = derive_seed(7, "shuffle", 1);
        let c = derive_seed(7, "negatives", 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(7, "shuffle", 0));
    }
}
