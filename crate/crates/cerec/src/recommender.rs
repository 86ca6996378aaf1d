//! Pairwise learning-to-rank recommender over user/item latent factors:
//! dot-product scoring, softmax ranking probabilities over explicit candidate
//! lists, Top-K selection, the smoothed reciprocal-rank objective, and
//! closed-form stochastic gradient ascent steps that consume one negative
//! item per positive interaction.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{CerecError, Result};
use crate::util;

/// User and item factor matrices (`M x d` and `N x d`).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFactors {
    pub user: Array2<f64>,
    pub item: Array2<f64>,
}

/// A user's Top-K list: items ordered by non-increasing score, ties broken
/// by ascending item index.
#[derive(Clone, Debug, PartialEq)]
pub struct RecList {
    pub user: u32,
    pub items: Vec<u32>,
    pub scores: Vec<f64>,
}

impl RecList {
    pub fn k(&self) -> usize {
        self.items.len()
    }

    /// The K-th (lowest ranked) item of the list.
    pub fn kth_item(&self) -> u32 {
        *self.items.last().expect("rec list is never empty")
    }

    pub fn contains(&self, item: u32) -> bool {
        self.items.contains(&item)
    }

    pub fn item_set(&self) -> HashSet<u32> {
        self.items.iter().copied().collect()
    }
}

impl LatentFactors {
    /// Uniform [-0.01, 0.01] initialization, deterministic given the seed.
    pub fn init(num_users: usize, num_items: usize, dim: usize, seed: u64) -> Self {
        let mut rng = util::stream_rng(seed, "factors-init", 0);
        let mut draw = |rows: usize| {
            Array2::from_shape_fn((rows, dim), |_| rng.random_range(-0.01..=0.01))
        };
        let user = draw(num_users);
        let item = draw(num_items);
        LatentFactors { user, item }
    }

    pub fn num_users(&self) -> usize {
        self.user.nrows()
    }

    pub fn num_items(&self) -> usize {
        self.item.nrows()
    }

    pub fn dim(&self) -> usize {
        self.user.ncols()
    }

    fn check_user(&self, u: u32) -> Result<()> {
        if (u as usize) < self.num_users() {
            Ok(())
        } else {
            Err(CerecError::invalid(format!("user index {u} out of range")))
        }
    }

    fn check_item(&self, i: u32) -> Result<()> {
        if (i as usize) < self.num_items() {
            Ok(())
        } else {
            Err(CerecError::invalid(format!("item index {i} out of range")))
        }
    }

    fn dot(&self, u: u32, i: u32) -> f64 {
        self.user.row(u as usize).dot(&self.item.row(i as usize))
    }

    /// Raw preference score `U_u . V_i`.
    pub fn predict_score(&self, u: u32, i: u32) -> Result<f64> {
        self.check_user(u)?;
        self.check_item(i)?;
        Ok(self.dot(u, i))
    }

    /// The K highest-scoring items outside `exclusions`.
    pub fn top_k(&self, u: u32, k: usize, exclusions: &HashSet<u32>) -> Result<RecList> {
        self.check_user(u)?;
        if k == 0 {
            return Err(CerecError::invalid("top_k requires k >= 1"));
        }
        let mut scored: Vec<(u32, f64)> = (0..self.num_items() as u32)
            .filter(|i| !exclusions.contains(i))
            .map(|i| (i, self.dot(u, i)))
            .collect();
        if scored.len() < k {
            return Err(CerecError::invalid(format!(
                "top_k: k={k} exceeds {} non-excluded items",
                scored.len()
            )));
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(RecList {
            user: u,
            items: scored.iter().map(|&(i, _)| i).collect(),
            scores: scored.iter().map(|&(_, s)| s).collect(),
        })
    }

    /// Softmax ranking probabilities over an explicit candidate list,
    /// max-subtraction stabilized. Candidates must be distinct.
    pub fn rank_scores(&self, u: u32, candidates: &[u32]) -> Result<Vec<f64>> {
        self.check_user(u)?;
        if candidates.is_empty() {
            return Err(CerecError::invalid("rank_scores: empty candidate list"));
        }
        for &i in candidates {
            self.check_item(i)?;
        }
        let raw: Vec<f64> = candidates.iter().map(|&i| self.dot(u, i)).collect();
        Ok(util::softmax_stable(&raw))
    }

    /// Ranking probability of `i` within `candidates`.
    pub fn rank_score(&self, u: u32, candidates: &[u32], i: u32) -> Result<f64> {
        let pos = candidates
            .iter()
            .position(|&c| c == i)
            .ok_or_else(|| CerecError::invalid(format!("item {i} not in candidate list")))?;
        Ok(self.rank_scores(u, candidates)?[pos])
    }

    /// Smoothed reciprocal-rank objective over a batch, one negative per
    /// positive: `sum ln s(f(u,i)) + ln(1 - s(f(u,j) - f(u,i)))`. Reported
    /// as a quantity to maximize.
    pub fn mrr_objective(
        &self,
        batch: &[(u32, u32)],
        negatives: &HashMap<(u32, u32), u32>,
    ) -> Result<f64> {
        let mut total = 0.0;
        for &(u, i) in batch {
            let &j = negatives
                .get(&(u, i))
                .ok_or_else(|| CerecError::invalid(format!("no negative for pair ({u}, {i})")))?;
            total += self.pairwise_objective(u, i, j, 0.0)?;
        }
        Ok(total)
    }

    /// Per-example objective with L2 penalty
    /// `reg * (|U_u|^2 + |V_i|^2 + |V_j|^2)`; the quantity `sgd_step`
    /// ascends.
    pub fn pairwise_objective(&self, u: u32, i: u32, j: u32, reg: f64) -> Result<f64> {
        self.check_user(u)?;
        self.check_item(i)?;
        self.check_item(j)?;
        let xi = self.dot(u, i);
        let xj = self.dot(u, j);
        // ln(1 - sigma(d)) = ln sigma(-d).
        let fit = util::ln_sigmoid(xi) + util::ln_sigmoid(-(xj - xi));
        let uu = self.user.row(u as usize);
        let vi = self.item.row(i as usize);
        let vj = self.item.row(j as usize);
        let penalty = reg * (uu.dot(&uu) + vi.dot(&vi) + vj.dot(&vj));
        Ok(fit - penalty)
    }

    /// One gradient-ascent step on the per-example objective with closed-form
    /// gradients. All gradients are evaluated at the pre-update values.
    pub fn sgd_step(&mut self, u: u32, i: u32, j: u32, lr: f64, reg: f64) -> Result<()> {
        if i == j {
            return Err(CerecError::invalid("sgd_step requires i != j"));
        }
        self.check_user(u)?;
        self.check_item(i)?;
        self.check_item(j)?;

        let xi = self.dot(u, i);
        let xj = self.dot(u, j);
        let a = 1.0 - util::sigmoid(xi);
        let b = util::sigmoid(xj - xi);

        let uu = self.user.row(u as usize).to_owned();
        let vi = self.item.row(i as usize).to_owned();
        let vj = self.item.row(j as usize).to_owned();

        let grad_u: Array1<f64> = &vi * (a + b) - &vj * b - &uu * (2.0 * reg);
        let grad_vi: Array1<f64> = &uu * (a + b) - &vi * (2.0 * reg);
        let grad_vj: Array1<f64> = &uu * (-b) - &vj * (2.0 * reg);

        self.user.row_mut(u as usize).scaled_add(lr, &grad_u);
        self.item.row_mut(i as usize).scaled_add(lr, &grad_vi);
        self.item.row_mut(j as usize).scaled_add(lr, &grad_vj);
        Ok(())
    }

    /// Checkpoint: header `M\tN\td\tseed`, then user rows and item rows as
    /// tab-joined values at full round-trip precision.
    pub fn save_tsv(&self, path: &Path, seed: u64) -> Result<()> {
        let io = |e| CerecError::Io { path: path.to_path_buf(), source: e };
        let file = File::create(path).map_err(io)?;
        let mut w = BufWriter::new(file);
        writeln!(w, "{}\t{}\t{}\t{}", self.num_users(), self.num_items(), self.dim(), seed)
            .map_err(io)?;
        for row in self.user.rows().into_iter().chain(self.item.rows()) {
            let vals: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(w, "{}", vals.join("\t")).map_err(io)?;
        }
        Ok(())
    }

    pub fn load_tsv(path: &Path) -> Result<(LatentFactors, u64)> {
        let io = |e| CerecError::Io { path: path.to_path_buf(), source: e };
        let parse = |line: usize, msg: &str| CerecError::Parse {
            path: path.to_path_buf(),
            line,
            msg: msg.into(),
        };
        let file = File::open(path).map_err(io)?;
        let mut lines = BufReader::new(file).lines();
        let header = lines.next().ok_or_else(|| parse(1, "empty checkpoint"))?.map_err(io)?;
        let head: Vec<&str> = header.split('\t').collect();
        if head.len() != 4 {
            return Err(parse(1, "expected `M\\tN\\td\\tseed` header"));
        }
        let m: usize = head[0].parse().map_err(|_| parse(1, "bad M"))?;
        let n: usize = head[1].parse().map_err(|_| parse(1, "bad N"))?;
        let d: usize = head[2].parse().map_err(|_| parse(1, "bad d"))?;
        let seed: u64 = head[3].parse().map_err(|_| parse(1, "bad seed"))?;

        let mut user = Array2::zeros((m, d));
        let mut item = Array2::zeros((n, d));
        for row in 0..m + n {
            let lineno = row + 2;
            let line = lines.next().ok_or_else(|| parse(lineno, "truncated checkpoint"))?.map_err(io)?;
            let vals: Vec<f64> = line
                .split('\t')
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| parse(lineno, "bad factor value"))?;
            if vals.len() != d {
                return Err(parse(lineno, "wrong row width"));
            }
            for (c, v) in vals.into_iter().enumerate() {
                if row < m {
                    user[[row, c]] = v;
                } else {
                    item[[row - m, c]] = v;
                }
            }
        }
        Ok((LatentFactors { user, item }, seed))
    }
}

/// Candidate list: the recommendation list plus extra items, deduplicated
/// while preserving order (list first, extras after).
pub fn candidates_with(rec_items: &[u32], extras: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(rec_items.len() + extras.len());
    let mut seen = HashSet::new();
    for &i in rec_items.iter().chain(extras) {
        if seen.insert(i) {
            out.push(i);
        }
    }
    out
}

/// Draw one unobserved item uniformly; `None` when the user has observed
/// every item.
pub fn sample_unobserved(
    num_items: usize,
    observed: &HashSet<u32>,
    rng: &mut impl Rng,
) -> Option<u32> {
    if observed.len() >= num_items {
        return None;
    }
    loop {
        let cand = rng.random_range(0..num_items as u32);
        if !observed.contains(&cand) {
            return Some(cand);
        }
    }
}

/// Warm-start pass: `steps` gradient-ascent steps over shuffled positives,
/// pairing each with a uniformly sampled unobserved item. Reshuffles after
/// exhausting the positives; deterministic given the seed.
pub fn init_with_uniform_negatives(
    factors: &mut LatentFactors,
    train: &[(u32, u32)],
    observed: &[HashSet<u32>],
    steps: usize,
    lr: f64,
    reg: f64,
    seed: u64,
) -> Result<()> {
    if train.is_empty() {
        return Err(CerecError::invalid("init requires a non-empty train set"));
    }
    let mut shuffle_rng = util::stream_rng(seed, "init-shuffle", 0);
    let mut neg_rng = util::stream_rng(seed, "init-negatives", 0);
    let mut order: Vec<(u32, u32)> = train.to_vec();
    order.shuffle(&mut shuffle_rng);
    let mut cursor = 0usize;
    let mut skipped = 0usize;

    for _ in 0..steps {
        if cursor == order.len() {
            order.shuffle(&mut shuffle_rng);
            cursor = 0;
        }
        let (u, i) = order[cursor];
        cursor += 1;
        match sample_unobserved(factors.num_items(), &observed[u as usize], &mut neg_rng) {
            Some(j) => factors.sgd_step(u, i, j, lr, reg)?,
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::info!("init: skipped {skipped} steps for users with all items observed");
    }
    Ok(())
}
