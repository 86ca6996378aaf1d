//! Counterfactual path sampler: two attention softmaxes score item->attribute
//! and attribute->item hops conditioned on the user, with items currently on
//! the user's recommendation list masked out of the second hop. A sampled
//! action is a 2-hop path with its log-probability; an exhaustive enumerator
//! doubles as the testing oracle for the sampled distribution.

use std::collections::HashSet;

use ndarray::{Array2, ArrayView1};
use rand::Rng;

use crate::ckg::{CollabKG, EntityId, EntityKind};
use crate::error::{CerecError, Result};
use crate::glm::EmbeddingTable;
use crate::util;

/// Agent state: the target user and the item currently visited.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct State {
    pub user: EntityId,
    pub item: EntityId,
}

impl State {
    pub fn new(user: EntityId, item: EntityId) -> Self {
        debug_assert_eq!(user.kind, EntityKind::User);
        debug_assert_eq!(item.kind, EntityKind::Item);
        State { user, item }
    }
}

/// A sampled 2-hop path `item -> attribute -> next_item` with its
/// log-probability under the sampler.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Action {
    pub item: EntityId,
    pub attribute: EntityId,
    pub next_item: EntityId,
    pub log_prob: f64,
}

/// Read-only context shared by all sampler operations.
#[derive(Clone, Copy)]
pub struct SamplerCtx<'a> {
    pub ckg: &'a CollabKG,
    pub emb: &'a EmbeddingTable,
    pub leaky_slope: f64,
}

impl<'a> SamplerCtx<'a> {
    pub fn new(ckg: &'a CollabKG, emb: &'a EmbeddingTable, leaky_slope: f64) -> Self {
        SamplerCtx { ckg, emb, leaky_slope }
    }

    fn vec(&self, e: EntityId) -> ArrayView1<'a, f64> {
        self.emb.table.row(self.ckg.global_index(e))
    }
}

/// First-hop attention score: `h_u . LeakyReLU(h_item * h_attr)` with the
/// product taken elementwise.
pub fn attn_first(
    h_user: ArrayView1<'_, f64>,
    h_item: ArrayView1<'_, f64>,
    h_attr: ArrayView1<'_, f64>,
    slope: f64,
) -> Result<f64> {
    attn_score(h_user, h_item, h_attr, slope)
}

/// Second-hop attention score over (attribute, candidate item); same form as
/// the first hop.
pub fn attn_second(
    h_user: ArrayView1<'_, f64>,
    h_attr: ArrayView1<'_, f64>,
    h_item2: ArrayView1<'_, f64>,
    slope: f64,
) -> Result<f64> {
    attn_score(h_user, h_attr, h_item2, slope)
}

fn attn_score(
    h_user: ArrayView1<'_, f64>,
    a: ArrayView1<'_, f64>,
    b: ArrayView1<'_, f64>,
    slope: f64,
) -> Result<f64> {
    if h_user.len() != a.len() || a.len() != b.len() {
        return Err(CerecError::Dimension(format!(
            "attention operands must share a dim: {} / {} / {}",
            h_user.len(),
            a.len(),
            b.len()
        )));
    }
    let mut score = 0.0;
    for k in 0..a.len() {
        score += h_user[k] * util::leaky_relu(a[k] * b[k], slope);
    }
    Ok(score)
}

/// First-hop distribution over the item's attribute neighbors, in ascending
/// attribute index order.
pub fn step_one_dist(ctx: &SamplerCtx<'_>, state: &State) -> Result<Vec<(EntityId, f64)>> {
    let attrs = ctx.ckg.neighbors(state.item, EntityKind::Attribute)?;
    if attrs.is_empty() {
        return Err(CerecError::DeadEnd(format!(
            "item {} has no attribute neighbors",
            state.item
        )));
    }
    let h_u = ctx.vec(state.user);
    let h_i = ctx.vec(state.item);
    let scores: Vec<f64> = attrs
        .iter()
        .map(|&a| attn_first(h_u, h_i, ctx.vec(a), ctx.leaky_slope))
        .collect::<Result<_>>()?;
    let probs = util::softmax_stable(&scores);
    Ok(attrs.iter().copied().zip(probs).collect())
}

/// Second-hop distribution over the attribute's unmasked item neighbors
/// (renormalized so it is a proper distribution); masked items have
/// probability exactly zero, which here means they are absent.
pub fn step_two_dist(
    ctx: &SamplerCtx<'_>,
    state: &State,
    attribute: EntityId,
    mask: &HashSet<u32>,
) -> Result<Vec<(EntityId, f64)>> {
    let items = ctx.ckg.neighbors(attribute, EntityKind::Item)?;
    let unmasked: Vec<EntityId> =
        items.iter().copied().filter(|e| !mask.contains(&e.index)).collect();
    if unmasked.is_empty() {
        return Err(CerecError::DeadEnd(format!(
            "all item neighbors of {attribute} are masked"
        )));
    }
    let h_u = ctx.vec(state.user);
    let h_a = ctx.vec(attribute);
    let scores: Vec<f64> = unmasked
        .iter()
        .map(|&i| attn_second(h_u, h_a, ctx.vec(i), ctx.leaky_slope))
        .collect::<Result<_>>()?;
    let probs = util::softmax_stable(&scores);
    Ok(unmasked.into_iter().zip(probs).collect())
}

fn sample_from(dist: &[(EntityId, f64)], rng: &mut impl Rng) -> (EntityId, f64) {
    let draw: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for &(e, p) in dist {
        acc += p;
        if draw < acc {
            return (e, p);
        }
    }
    // Floating point slack: fall back to the last support point.
    let &(e, p) = dist.last().expect("distributions are non-empty");
    (e, p)
}

/// Sample a full 2-hop action. The log-probability is the log of the product
/// of the two hop probabilities.
pub fn sample_action(
    ctx: &SamplerCtx<'_>,
    state: &State,
    mask: &HashSet<u32>,
    rng: &mut impl Rng,
) -> Result<Action> {
    let hop1 = step_one_dist(ctx, state)?;
    let (attribute, p1) = sample_from(&hop1, rng);
    let hop2 = step_two_dist(ctx, state, attribute, mask)?;
    let (next_item, p2) = sample_from(&hop2, rng);
    Ok(Action { item: state.item, attribute, next_item, log_prob: p1.ln() + p2.ln() })
}

/// Greedy variant: argmax at each hop (ties resolved toward the lower
/// entity index). Used when deploying a frozen policy.
pub fn greedy_action(ctx: &SamplerCtx<'_>, state: &State, mask: &HashSet<u32>) -> Result<Action> {
    let argmax = |dist: &[(EntityId, f64)]| {
        let mut best = dist[0];
        for &(e, p) in &dist[1..] {
            if p > best.1 {
                best = (e, p);
            }
        }
        best
    };
    let hop1 = step_one_dist(ctx, state)?;
    let (attribute, p1) = argmax(&hop1);
    let hop2 = step_two_dist(ctx, state, attribute, mask)?;
    let (next_item, p2) = argmax(&hop2);
    Ok(Action { item: state.item, attribute, next_item, log_prob: p1.ln() + p2.ln() })
}

/// Exhaustive action distribution for a state; the probabilities of the
/// returned list sum to 1 whenever no attribute dead-ends on the second hop.
pub fn enumerate_action_dist(
    ctx: &SamplerCtx<'_>,
    state: &State,
    mask: &HashSet<u32>,
    budget: usize,
) -> Result<Vec<(Action, f64)>> {
    let hop1 = step_one_dist(ctx, state)?;

    let mut needed = 0usize;
    for &(attribute, _) in &hop1 {
        let items = ctx.ckg.neighbors(attribute, EntityKind::Item)?;
        needed += items.iter().filter(|e| !mask.contains(&e.index)).count();
    }
    if needed > budget {
        return Err(CerecError::BudgetExceeded { needed, budget });
    }

    let mut out = Vec::with_capacity(needed);
    for &(attribute, p1) in &hop1 {
        let hop2 = match step_two_dist(ctx, state, attribute, mask) {
            Ok(d) => d,
            // A fully masked attribute contributes no successful paths.
            Err(CerecError::DeadEnd(_)) => continue,
            Err(e) => return Err(e),
        };
        for (next_item, p2) in hop2 {
            out.push((
                Action {
                    item: state.item,
                    attribute,
                    next_item,
                    log_prob: p1.ln() + p2.ln(),
                },
                p1 * p2,
            ));
        }
    }
    Ok(out)
}

/// Accumulate `scale * d log P(action | state) / d emb` into a per-entity
/// gradient table. The gradient flows through both softmaxes and the three
/// embeddings entering each attention score.
pub fn accumulate_logprob_grad(
    ctx: &SamplerCtx<'_>,
    state: &State,
    action: &Action,
    mask: &HashSet<u32>,
    scale: f64,
    d_emb: &mut Array2<f64>,
) -> Result<()> {
    let hop1 = step_one_dist(ctx, state)?;
    accumulate_softmax_grad(ctx, state.user, state.item, &hop1, action.attribute, scale, d_emb);
    let hop2 = step_two_dist(ctx, state, action.attribute, mask)?;
    accumulate_softmax_grad(ctx, state.user, action.attribute, &hop2, action.next_item, scale, d_emb);
    Ok(())
}

/// Shared hop gradient: for log softmax over scores
/// `s_c = h_u . LeakyReLU(h_anchor * h_c)` the coefficient on d s_c is
/// `1{c = chosen} - p_c`.
fn accumulate_softmax_grad(
    ctx: &SamplerCtx<'_>,
    user: EntityId,
    anchor: EntityId,
    dist: &[(EntityId, f64)],
    chosen: EntityId,
    scale: f64,
    d_emb: &mut Array2<f64>,
) {
    let h_u = ctx.vec(user).to_owned();
    let h_anchor = ctx.vec(anchor).to_owned();
    let gu = ctx.ckg.global_index(user);
    let ga = ctx.ckg.global_index(anchor);
    let dim = h_u.len();

    for &(cand, p) in dist {
        let coeff = scale * (if cand == chosen { 1.0 } else { 0.0 } - p);
        if coeff == 0.0 {
            continue;
        }
        let gc = ctx.ckg.global_index(cand);
        let h_c = ctx.vec(cand);
        for k in 0..dim {
            let w = h_anchor[k] * h_c[k];
            let y = util::leaky_relu(w, ctx.leaky_slope);
            let dydw = util::leaky_relu_deriv(w, ctx.leaky_slope);
            d_emb[[gu, k]] += coeff * y;
            d_emb[[ga, k]] += coeff * h_u[k] * dydw * h_c[k];
            d_emb[[gc, k]] += coeff * h_u[k] * dydw * h_anchor[k];
        }
    }
}
