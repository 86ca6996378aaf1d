//! Graph learning module: L layers of symmetric-normalized neighbor
//! aggregation, each followed by a linear transform over the concatenated
//! (self, message) pair and a LeakyReLU, with the final embedding being the
//! sum of per-layer outputs (lower layers linearly projected to the output
//! dim when their width differs).
//!
//! [`forward_cached`] keeps every intermediate activation so that
//! [`GlmForward::backward`] can produce exact reverse-mode gradients for all
//! parameters; the policy-gradient estimator feeds per-entity embedding
//! gradients through it.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;

use crate::ckg::{CollabKG, EntityId};
use crate::error::{CerecError, Result};
use crate::util;

/// Learnable parameters: one base embedding row per entity, per-layer
/// convolution weights of shape `d_l x 2*d_{l-1}`, and projection matrices
/// `d_L x d_l` for layers whose width differs from the output width.
#[derive(Clone, Debug)]
pub struct GlmParams {
    /// `[d_0, d_1, ..., d_L]`.
    pub dims: Vec<usize>,
    pub leaky_slope: f64,
    /// Base embeddings, `E x d_0`.
    pub base: Array2<f64>,
    /// Layer weights, `weights[l-1]` has shape `d_l x 2*d_{l-1}`.
    pub weights: Vec<Array2<f64>>,
    /// `projections[l-1]` is `Some(P)` with `P: d_L x d_l` iff `d_l != d_L`.
    pub projections: Vec<Option<Array2<f64>>>,
}

/// Final per-entity embeddings, `E x d_L`, indexed by the graph's global
/// entity index.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub table: Array2<f64>,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn get(&self, ckg: &CollabKG, e: EntityId) -> ArrayView1<'_, f64> {
        self.table.row(ckg.global_index(e))
    }

    /// Debug export: `entity_id<TAB>v_1 v_2 ... v_d`, one row per entity in
    /// global index order.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let file = File::create(path)
            .map_err(|e| CerecError::Io { path: path.to_path_buf(), source: e })?;
        let mut w = BufWriter::new(file);
        for (idx, row) in self.table.rows().into_iter().enumerate() {
            let vals: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(w, "{idx}\t{}", vals.join(" "))
                .map_err(|e| CerecError::Io { path: path.to_path_buf(), source: e })?;
        }
        Ok(())
    }
}

/// Uniform [-0.01, 0.01] initialization for base embeddings, weights, and
/// projections; deterministic given the seed.
pub fn init_params(ckg: &CollabKG, dims: &[usize], seed: u64) -> Result<GlmParams> {
    init_params_with_scale(ckg, dims, seed, 0.01)
}

/// As [`init_params`] but with a custom uniform half-width. Gradient-check
/// fixtures use a larger scale to keep pre-activations away from the
/// LeakyReLU kink.
pub fn init_params_with_scale(
    ckg: &CollabKG,
    dims: &[usize],
    seed: u64,
    scale: f64,
) -> Result<GlmParams> {
    if dims.len() < 2 {
        return Err(CerecError::invalid("dims must list d_0 and at least one layer"));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(CerecError::invalid("all dims must be positive"));
    }
    let mut rng = util::stream_rng(seed, "glm-init", 0);
    let mut draw = |rows: usize, cols: usize| {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..=scale))
    };

    let d_out = *dims.last().unwrap();
    let base = draw(ckg.entity_count(), dims[0]);
    let mut weights = Vec::new();
    let mut projections = Vec::new();
    for l in 1..dims.len() {
        weights.push(draw(dims[l], 2 * dims[l - 1]));
        projections.push(if dims[l] != d_out { Some(draw(d_out, dims[l])) } else { None });
    }
    Ok(GlmParams { dims: dims.to_vec(), leaky_slope: 0.01, base, weights, projections })
}

impl GlmParams {
    pub fn layer_count(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Total scalar parameter count (base, then weights, then projections).
    pub fn num_params(&self) -> usize {
        self.flat_views().iter().map(|a| a.len()).sum()
    }

    fn flat_views(&self) -> Vec<&Array2<f64>> {
        let mut v = vec![&self.base];
        v.extend(self.weights.iter());
        v.extend(self.projections.iter().flatten());
        v
    }

    fn flat_views_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v = vec![&mut self.base];
        v.extend(self.weights.iter_mut());
        v.extend(self.projections.iter_mut().flatten());
        v
    }

    /// Scalar parameter accessor in a fixed canonical order; used by the
    /// finite-difference oracles and the checkpoint format.
    pub fn param(&self, mut idx: usize) -> f64 {
        for a in self.flat_views() {
            if idx < a.len() {
                return *a.iter().nth(idx).unwrap();
            }
            idx -= a.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, mut idx: usize, value: f64) {
        for a in self.flat_views_mut() {
            if idx < a.len() {
                *a.iter_mut().nth(idx).unwrap() = value;
                return;
            }
            idx -= a.len();
        }
        panic!("parameter index out of range");
    }

    /// Gradient-ascent step over all parameters.
    pub fn apply_ascent(&mut self, grads: &GlmGrads, lr: f64) {
        self.base.scaled_add(lr, &grads.base);
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            w.scaled_add(lr, g);
        }
        for (p, g) in self.projections.iter_mut().zip(&grads.projections) {
            if let (Some(p), Some(g)) = (p.as_mut(), g.as_ref()) {
                p.scaled_add(lr, g);
            }
        }
    }

    /// Checkpoint: a header line `E<TAB>slope<TAB>d_0 d_1 ... d_L` followed
    /// by every parameter in canonical order, one per line at full precision.
    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let file = File::create(path)
            .map_err(|e| CerecError::Io { path: path.to_path_buf(), source: e })?;
        let mut w = BufWriter::new(file);
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        writeln!(w, "{}\t{:.17e}\t{}", self.base.nrows(), self.leaky_slope, dims.join(" "))
            .map_err(|e| CerecError::Io { path: path.to_path_buf(), source: e })?;
        for idx in 0..self.num_params() {
            writeln!(w, "{:.17e}", self.param(idx))
                .map_err(|e| CerecError::Io { path: path.to_path_buf(), source: e })?;
        }
        Ok(())
    }

    pub fn load_tsv(path: &Path) -> Result<GlmParams> {
        let io = |e| CerecError::Io { path: path.to_path_buf(), source: e };
        let file = File::open(path).map_err(io)?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| CerecError::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "empty policy checkpoint".into(),
            })?
            .map_err(io)?;
        let parts: Vec<&str> = header.split('\t').collect();
        if parts.len() != 3 {
            return Err(CerecError::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "expected `entities\\tslope\\tdims` header".into(),
            });
        }
        let entities: usize = parts[0].parse().map_err(|_| CerecError::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "bad entity count".into(),
        })?;
        let slope: f64 = parts[1].parse().map_err(|_| CerecError::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "bad slope".into(),
        })?;
        let dims: Vec<usize> = parts[2]
            .split_whitespace()
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| CerecError::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "bad dims".into(),
            })?;
        if dims.len() < 2 {
            return Err(CerecError::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "dims must list d_0 and at least one layer".into(),
            });
        }

        let d_out = *dims.last().unwrap();
        let mut params = GlmParams {
            dims: dims.clone(),
            leaky_slope: slope,
            base: Array2::zeros((entities, dims[0])),
            weights: (1..dims.len()).map(|l| Array2::zeros((dims[l], 2 * dims[l - 1]))).collect(),
            projections: (1..dims.len())
                .map(|l| (dims[l] != d_out).then(|| Array2::zeros((d_out, dims[l]))))
                .collect(),
        };
        for idx in 0..params.num_params() {
            let line = lines
                .next()
                .ok_or_else(|| CerecError::Parse {
                    path: path.to_path_buf(),
                    line: idx + 2,
                    msg: "truncated policy checkpoint".into(),
                })?
                .map_err(io)?;
            let v: f64 = line.trim().parse().map_err(|_| CerecError::Parse {
                path: path.to_path_buf(),
                line: idx + 2,
                msg: "bad parameter value".into(),
            })?;
            params.set_param(idx, v);
        }
        Ok(params)
    }
}

/// Gradients mirroring [`GlmParams`] shapes.
#[derive(Clone, Debug)]
pub struct GlmGrads {
    pub base: Array2<f64>,
    pub weights: Vec<Array2<f64>>,
    pub projections: Vec<Option<Array2<f64>>>,
}

impl GlmGrads {
    pub fn zeros_like(params: &GlmParams) -> Self {
        GlmGrads {
            base: Array2::zeros(params.base.dim()),
            weights: params.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            projections: params
                .projections
                .iter()
                .map(|p| p.as_ref().map(|p| Array2::zeros(p.dim())))
                .collect(),
        }
    }

    fn flat_views(&self) -> Vec<&Array2<f64>> {
        let mut v = vec![&self.base];
        v.extend(self.weights.iter());
        v.extend(self.projections.iter().flatten());
        v
    }

    /// Same canonical order as [`GlmParams::param`].
    pub fn param(&self, mut idx: usize) -> f64 {
        for a in self.flat_views() {
            if idx < a.len() {
                return *a.iter().nth(idx).unwrap();
            }
            idx -= a.len();
        }
        panic!("gradient index out of range");
    }

    pub fn add_assign(&mut self, other: &GlmGrads) {
        self.base += &other.base;
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.projections.iter_mut().zip(&other.projections) {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.base *= factor;
        for w in &mut self.weights {
            *w *= factor;
        }
        for p in self.projections.iter_mut().flatten() {
            *p *= factor;
        }
    }
}

/// Symmetric-normalized message for one entity:
/// `sum_{n in N_e} h_prev[n] / sqrt(|N_e| |N_n|)`, zero when isolated.
pub fn aggregate_neighbors(ckg: &CollabKG, h_prev: &Array2<f64>, e: EntityId) -> Array1<f64> {
    let mut out = Array1::zeros(h_prev.ncols());
    let deg_e = ckg.degree(e);
    if deg_e == 0 {
        return out;
    }
    for n in ckg.all_neighbors(e) {
        let deg_n = ckg.degree(n);
        let norm = 1.0 / ((deg_e as f64) * (deg_n as f64)).sqrt();
        out.scaled_add(norm, &h_prev.row(ckg.global_index(n)));
    }
    out
}

/// Message matrix for all entities at once. The operator is symmetric, so it
/// doubles as its own transpose in the backward pass.
fn propagate(ckg: &CollabKG, h: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(h.dim());
    for g in 0..ckg.entity_count() {
        let e = ckg.entity_at(g);
        let deg_e = ckg.degree(e);
        if deg_e == 0 {
            continue;
        }
        let mut row = out.row_mut(g);
        for n in ckg.all_neighbors(e) {
            let deg_n = ckg.degree(n);
            let norm = 1.0 / ((deg_e as f64) * (deg_n as f64)).sqrt();
            row.scaled_add(norm, &h.row(ckg.global_index(n)));
        }
    }
    out
}

/// One convolution layer over precomputed messages:
/// `h_e = LeakyReLU(W (h_prev_e || message_e))`.
pub fn conv_layer(
    params: &GlmParams,
    layer: usize,
    h_prev: &Array2<f64>,
    messages: &Array2<f64>,
) -> Result<Array2<f64>> {
    let pre = conv_pre_activation(params, layer, h_prev, messages)?;
    Ok(pre.mapv(|x| util::leaky_relu(x, params.leaky_slope)))
}

fn conv_pre_activation(
    params: &GlmParams,
    layer: usize,
    h_prev: &Array2<f64>,
    messages: &Array2<f64>,
) -> Result<Array2<f64>> {
    let w = params
        .weights
        .get(layer - 1)
        .ok_or_else(|| CerecError::Dimension(format!("layer {layer} out of range")))?;
    let d_in = params.dims[layer - 1];
    if h_prev.ncols() != d_in || messages.ncols() != d_in {
        return Err(CerecError::Dimension(format!(
            "layer {layer}: expected input dim {d_in}, got self {} / message {}",
            h_prev.ncols(),
            messages.ncols()
        )));
    }
    if h_prev.nrows() != messages.nrows() {
        return Err(CerecError::Dimension("self/message row mismatch".into()));
    }
    let w_self = w.slice(ndarray::s![.., ..d_in]);
    let w_msg = w.slice(ndarray::s![.., d_in..]);
    Ok(h_prev.dot(&w_self.t()) + messages.dot(&w_msg.t()))
}

/// Elementwise sum across layers; every layer must already share the output
/// dimension (callers project first).
pub fn layer_aggregate(h_list: &[Array2<f64>]) -> Result<EmbeddingTable> {
    let first = h_list
        .first()
        .ok_or_else(|| CerecError::Dimension("layer_aggregate needs at least one layer".into()))?;
    let mut sum = first.clone();
    for h in &h_list[1..] {
        if h.dim() != sum.dim() {
            return Err(CerecError::Dimension(format!(
                "layer dim {:?} != {:?} after projection",
                h.dim(),
                sum.dim()
            )));
        }
        sum += h;
    }
    Ok(EmbeddingTable { table: sum })
}

/// Cached activations from one forward pass.
#[derive(Clone, Debug)]
pub struct GlmForward {
    /// `layers[l]` is `H^l` (`layers[0]` = base embeddings).
    layers: Vec<Array2<f64>>,
    /// `messages[l-1]` is the message matrix feeding layer `l`.
    messages: Vec<Array2<f64>>,
    /// `pre[l-1]` is the pre-activation of layer `l`.
    pre: Vec<Array2<f64>>,
    pub output: EmbeddingTable,
}

impl GlmForward {
    pub fn embeddings(&self) -> &EmbeddingTable {
        &self.output
    }

    /// Exact reverse-mode gradients of the forward map given an upstream
    /// gradient on the final embedding table.
    pub fn backward(&self, ckg: &CollabKG, params: &GlmParams, d_out: &Array2<f64>) -> GlmGrads {
        let layer_count = params.layer_count();
        let mut grads = GlmGrads::zeros_like(params);
        // d_h[l] accumulates the gradient on H^l.
        let mut d_h: Vec<Array2<f64>> =
            self.layers.iter().map(|h| Array2::zeros(h.dim())).collect();

        for l in 1..=layer_count {
            match &params.projections[l - 1] {
                Some(p) => {
                    // Out += H^l P^T, so dH^l += dOut P and dP += dOut^T H^l.
                    d_h[l] += &d_out.dot(p);
                    *grads.projections[l - 1].as_mut().unwrap() += &d_out.t().dot(&self.layers[l]);
                }
                None => {
                    d_h[l] += d_out;
                }
            }
        }

        for l in (1..=layer_count).rev() {
            let slope = params.leaky_slope;
            let d_pre = &d_h[l]
                * &self.pre[l - 1].mapv(|x| util::leaky_relu_deriv(x, slope));
            let d_in = params.dims[l - 1];
            let w = &params.weights[l - 1];
            let w_self = w.slice(ndarray::s![.., ..d_in]);
            let w_msg = w.slice(ndarray::s![.., d_in..]);

            // dW = dPre^T [H^{l-1} || M^l].
            let dw_self = d_pre.t().dot(&self.layers[l - 1]);
            let dw_msg = d_pre.t().dot(&self.messages[l - 1]);
            {
                let gw = &mut grads.weights[l - 1];
                gw.slice_mut(ndarray::s![.., ..d_in]).zip_mut_with(&dw_self, |a, b| *a += b);
                gw.slice_mut(ndarray::s![.., d_in..]).zip_mut_with(&dw_msg, |a, b| *a += b);
            }

            // Split dZ into the self and message halves; the message half
            // flows back through the (symmetric) propagation operator.
            let d_self = d_pre.dot(&w_self);
            let d_msg = d_pre.dot(&w_msg);
            d_h[l - 1] += &d_self;
            d_h[l - 1] += &propagate(ckg, &d_msg);
        }

        grads.base.assign(&d_h[0]);
        grads
    }
}

/// Full forward pass with cached activations.
pub fn forward_cached(ckg: &CollabKG, params: &GlmParams) -> Result<GlmForward> {
    if params.base.nrows() != ckg.entity_count() {
        return Err(CerecError::Dimension(format!(
            "params built for {} entities, graph has {}",
            params.base.nrows(),
            ckg.entity_count()
        )));
    }
    let layer_count = params.layer_count();
    let mut layers = vec![params.base.clone()];
    let mut messages = Vec::new();
    let mut pre = Vec::new();
    for l in 1..=layer_count {
        let msg = propagate(ckg, &layers[l - 1]);
        let pre_l = conv_pre_activation(params, l, &layers[l - 1], &msg)?;
        layers.push(pre_l.mapv(|x| util::leaky_relu(x, params.leaky_slope)));
        messages.push(msg);
        pre.push(pre_l);
    }

    let projected: Vec<Array2<f64>> = (1..=layer_count)
        .map(|l| match &params.projections[l - 1] {
            Some(p) => layers[l].dot(&p.t()),
            None => layers[l].clone(),
        })
        .collect();
    let output = layer_aggregate(&projected)?;
    Ok(GlmForward { layers, messages, pre, output })
}

/// Forward pass returning only the final table.
pub fn forward(ckg: &CollabKG, params: &GlmParams) -> Result<EmbeddingTable> {
    Ok(forward_cached(ckg, params)?.output)
}

/// Dense reference forward used by tests and the audit command: builds
/// `D^{-1/2} A D^{-1/2}` explicitly and replays the same layer arithmetic
/// with plain loops.
pub fn forward_dense_reference(ckg: &CollabKG, params: &GlmParams) -> Result<EmbeddingTable> {
    let n = ckg.entity_count();
    let mut norm_adj = Array2::<f64>::zeros((n, n));
    for g in 0..n {
        let e = ckg.entity_at(g);
        for nb in ckg.all_neighbors(e) {
            let gn = ckg.global_index(nb);
            norm_adj[[g, gn]] =
                1.0 / ((ckg.degree(e) as f64) * (ckg.degree(nb) as f64)).sqrt();
        }
    }

    let mut h = params.base.clone();
    let mut acc: Option<Array2<f64>> = None;
    for l in 1..=params.layer_count() {
        let msg = norm_adj.dot(&h);
        let d_in = params.dims[l - 1];
        let d_l = params.dims[l];
        let w = &params.weights[l - 1];
        let mut next = Array2::zeros((n, d_l));
        for e in 0..n {
            for r in 0..d_l {
                let mut s = 0.0;
                for c in 0..d_in {
                    s += w[[r, c]] * h[[e, c]];
                    s += w[[r, d_in + c]] * msg[[e, c]];
                }
                next[[e, r]] = util::leaky_relu(s, params.leaky_slope);
            }
        }
        let contrib = match &params.projections[l - 1] {
            Some(p) => next.dot(&p.t()),
            None => next.clone(),
        };
        acc = Some(match acc {
            Some(a) => a + &contrib,
            None => contrib,
        });
        h = next;
    }
    Ok(EmbeddingTable { table: acc.unwrap() })
}

/// Rescale layer weights and projections so every layer's activations sit
/// near `target_rms`. Leaves the relative geometry of each random map
/// untouched; used by the embedding warm start, where the tiny weight
/// initialization would otherwise collapse the output scale and kill
/// attention gradients.
pub fn rescale_activations(ckg: &CollabKG, params: &mut GlmParams, target_rms: f64) -> Result<()> {
    let rms = |a: &Array2<f64>| -> f64 {
        (a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt()
    };
    let layer_count = params.layer_count();
    let mut h = params.base.clone();
    for l in 1..=layer_count {
        let msg = propagate(ckg, &h);
        let pre = conv_pre_activation(params, l, &h, &msg)?;
        let r = rms(&pre);
        if r > 0.0 {
            params.weights[l - 1] *= target_rms / r;
        }
        let pre = conv_pre_activation(params, l, &h, &msg)?;
        h = pre.mapv(|x| util::leaky_relu(x, params.leaky_slope));
    }
    // Bring each projected contribution onto the same scale as the last
    // layer so the cross-layer sum is balanced.
    let cache = forward_cached(ckg, params)?;
    for l in 1..=layer_count {
        if let Some(p) = params.projections[l - 1].as_mut() {
            let contrib = cache.layers[l].dot(&p.t());
            let r = rms(&contrib);
            if r > 0.0 {
                *p *= target_rms / r;
            }
        }
    }
    Ok(())
}

/// Sum of |entries| across a gradient, used by convergence diagnostics.
pub fn grad_l1(grads: &GlmGrads) -> f64 {
    let mut total: f64 = grads.base.iter().map(|v| v.abs()).sum();
    for w in &grads.weights {
        total += w.iter().map(|v| v.abs()).sum::<f64>();
    }
    for p in grads.projections.iter().flatten() {
        total += p.iter().map(|v| v.abs()).sum::<f64>();
    }
    total
}

/// Mean embedding over a set of rows; zero vector for an empty set.
pub fn mean_rows(table: &Array2<f64>, rows: &[usize]) -> Array1<f64> {
    let mut out = Array1::zeros(table.ncols());
    if rows.is_empty() {
        return out;
    }
    for &r in rows {
        out += &table.index_axis(Axis(0), r);
    }
    out / rows.len() as f64
}
