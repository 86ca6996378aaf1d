//! Reinforcement-learning agent: the episode MDP over 2-hop path actions,
//! the counterfactual reward (margin test plus embedding similarity), policy
//! gradients through the sampler and graph embeddings, counterfactual-item
//! selection, and the outer loop that alternates recommender updates with
//! policy updates.

use std::collections::HashSet;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ckg::{CollabKG, EntityId};
use crate::config::RunConfig;
use crate::error::{CerecError, Result};
use crate::eval;
use crate::glm::{self, EmbeddingTable, GlmForward, GlmGrads, GlmParams};
use crate::pipeline::Dataset;
use crate::recommender::{
    candidates_with, init_with_uniform_negatives, sample_unobserved, LatentFactors, RecList,
};
use crate::sampler::{self, Action, SamplerCtx, State};
use crate::util;

/// One step of an episode.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub state: State,
    pub action: Action,
    pub reward: f64,
}

impl StepRecord {
    pub fn log_prob(&self) -> f64 {
        self.action.log_prob
    }
}

/// A (possibly truncated) episode rolled out from a positive interaction.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// Dense (user, item) the episode started from.
    pub origin: (u32, u32),
    pub gamma: f64,
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }
}

/// Everything an episode needs, frozen for its duration: embeddings and
/// factor snapshot, the user's current list, and the mask derived from it.
pub struct EpisodeCtx<'a> {
    pub sampler: SamplerCtx<'a>,
    pub factors: &'a LatentFactors,
    pub rec_list: &'a RecList,
    pub mask: &'a HashSet<u32>,
}

/// Margin between the ranking scores of `e_t` and the K-th listed item,
/// both taken from the softmax over the list plus `e_t`. Zero when `e_t`
/// is itself the K-th item.
pub fn epsilon_threshold(
    factors: &LatentFactors,
    u: u32,
    rec_list: &RecList,
    e_t: u32,
) -> Result<f64> {
    let cands = candidates_with(&rec_list.items, &[e_t]);
    let scores = factors.rank_scores(u, &cands)?;
    let pos_of = |item: u32| cands.iter().position(|&c| c == item).unwrap();
    Ok(scores[pos_of(e_t)] - scores[pos_of(rec_list.kth_item())])
}

/// Counterfactual reward: `1 + cos` when the candidate's ranking score
/// falls below the original item's by at least the margin, else `cos`,
/// with `cos` the cosine of the two items' final embeddings. Bounded in
/// [-1, 2].
pub fn reward(
    state: &State,
    action: &Action,
    factors: &LatentFactors,
    rec_list: &RecList,
    emb: &EmbeddingTable,
    ckg: &CollabKG,
    epsilon: f64,
) -> Result<f64> {
    let e_t = state.item.index;
    let e_next = action.next_item.index;
    let cands = candidates_with(&rec_list.items, &[e_t, e_next]);
    let scores = factors.rank_scores(state.user.index, &cands)?;
    let pos_of = |item: u32| cands.iter().position(|&c| c == item).unwrap();
    let rational = scores[pos_of(e_t)] - scores[pos_of(e_next)] >= epsilon;

    let c = util::cosine(emb.get(ckg, state.item), emb.get(ckg, action.next_item));
    Ok(if rational { 1.0 + c } else { c })
}

/// The rationality branch alone; shared with the explanation pipeline.
pub fn is_rational(
    factors: &LatentFactors,
    rec_list: &RecList,
    u: u32,
    e_t: u32,
    e_next: u32,
    epsilon: f64,
) -> Result<bool> {
    let cands = candidates_with(&rec_list.items, &[e_t, e_next]);
    let scores = factors.rank_scores(u, &cands)?;
    let pos_of = |item: u32| cands.iter().position(|&c| c == item).unwrap();
    Ok(scores[pos_of(e_t)] - scores[pos_of(e_next)] >= epsilon)
}

fn run_episode(
    ctx: &EpisodeCtx<'_>,
    u: u32,
    i: u32,
    depth: usize,
    gamma: f64,
    mut pick: impl FnMut(&SamplerCtx<'_>, &State, &HashSet<u32>) -> Result<Action>,
) -> Result<Trajectory> {
    let mut steps = Vec::with_capacity(depth);
    let mut state = State::new(EntityId::user(u), EntityId::item(i));
    for _ in 0..depth {
        let action = match pick(&ctx.sampler, &state, ctx.mask) {
            Ok(a) => a,
            Err(CerecError::DeadEnd(why)) => {
                log::debug!("episode ({u}, {i}) truncated: {why}");
                break;
            }
            Err(e) => return Err(e),
        };
        let eps = epsilon_threshold(ctx.factors, u, ctx.rec_list, state.item.index)?;
        let r = reward(&state, &action, ctx.factors, ctx.rec_list, ctx.sampler.emb, ctx.sampler.ckg, eps)?;
        let next = State::new(state.user, action.next_item);
        steps.push(StepRecord { state, action, reward: r });
        state = next;
    }
    Ok(Trajectory { origin: (u, i), gamma, steps })
}

/// Roll out up to `depth` sampled path-actions from the positive pair
/// `(u, i)`, rewarding each step and transitioning deterministically to the
/// proposed item. A dead end truncates the trajectory (empty at step 0).
pub fn rollout(
    ctx: &EpisodeCtx<'_>,
    u: u32,
    i: u32,
    depth: usize,
    gamma: f64,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    run_episode(ctx, u, i, depth, gamma, |s, st, m| sampler::sample_action(s, st, m, rng))
}

/// Deterministic rollout taking the argmax action at each hop; used when
/// deploying a frozen policy.
pub fn rollout_greedy(
    ctx: &EpisodeCtx<'_>,
    u: u32,
    i: u32,
    depth: usize,
    gamma: f64,
) -> Result<Trajectory> {
    run_episode(ctx, u, i, depth, gamma, sampler::greedy_action)
}

/// Discounted return `sum_t gamma^t r_t`.
pub fn discounted_return(traj: &Trajectory) -> f64 {
    traj.steps
        .iter()
        .enumerate()
        .map(|(t, s)| traj.gamma.powi(t as i32) * s.reward)
        .sum()
}

/// Accumulate the episode's policy-gradient contribution on the embedding
/// table: `(1/T) sum_t gamma^t (r_t - baseline) d log P(a_t | s_t) / d emb`
/// with `T` the realized trajectory length.
pub fn accumulate_reinforce_demb(
    ctx: &EpisodeCtx<'_>,
    traj: &Trajectory,
    baseline: f64,
    d_emb: &mut Array2<f64>,
) -> Result<()> {
    if traj.is_empty() {
        return Ok(());
    }
    let len = traj.len() as f64;
    for (t, step) in traj.steps.iter().enumerate() {
        let scale = traj.gamma.powi(t as i32) * (step.reward - baseline) / len;
        sampler::accumulate_logprob_grad(
            &ctx.sampler,
            &step.state,
            &step.action,
            ctx.mask,
            scale,
            d_emb,
        )?;
    }
    Ok(())
}

/// Policy gradient for one trajectory, flowing through both hop softmaxes
/// and the full embedding forward pass.
pub fn reinforce_grad(
    ctx: &EpisodeCtx<'_>,
    traj: &Trajectory,
    params: &GlmParams,
    cache: &GlmForward,
    baseline: f64,
) -> Result<GlmGrads> {
    let mut d_emb = Array2::zeros(cache.output.table.dim());
    accumulate_reinforce_demb(ctx, traj, baseline, &mut d_emb)?;
    Ok(cache.backward(ctx.sampler.ckg, params, &d_emb))
}

/// The proposed item of the highest-reward step (earliest step wins ties).
pub fn select_counterfactual(traj: &Trajectory) -> Option<u32> {
    let mut best: Option<&StepRecord> = None;
    for step in &traj.steps {
        let better = match best {
            None => true,
            Some(b) => step.reward > b.reward,
        };
        if better {
            best = Some(step);
        }
    }
    best.map(|s| s.action.next_item.index)
}

/// One line of the epoch log.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_reward: f64,
    pub cumulative_reward: f64,
    pub val_recall_at_20: f64,
    pub wall_time_s: f64,
}

/// Mutable training state carried across epochs; serialized between runs so
/// an interrupted run resumes exactly where it stopped.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    pub baseline: f64,
    pub best_recall: f64,
    pub best_epoch: usize,
    pub epochs_since_best: usize,
    pub log: Vec<EpochRecord>,
}

impl TrainState {
    pub fn fresh() -> Self {
        TrainState {
            epoch: 0,
            baseline: 0.0,
            best_recall: f64::NEG_INFINITY,
            best_epoch: 0,
            epochs_since_best: 0,
            log: Vec::new(),
        }
    }
}

/// Completed (or early-stopped) co-training run.
pub struct TrainOutcome {
    pub factors: LatentFactors,
    pub params: GlmParams,
    pub state: TrainState,
    pub stopped_early: bool,
}

/// A resume point: state plus the model snapshots saved with it.
pub struct ResumePoint {
    pub state: TrainState,
    pub factors: LatentFactors,
    pub params: GlmParams,
}

/// Validation Recall@20 averaged over users with held-out positives.
fn validation_recall(
    factors: &LatentFactors,
    dataset: &Dataset,
    exclude_train: bool,
) -> Result<f64> {
    let (rows, _) = eval::evaluate_ranking(factors, dataset, &dataset.valid, &[20], exclude_train)?;
    Ok(rows
        .iter()
        .find(|r| r.metric == "recall")
        .map(|r| r.value)
        .unwrap_or(0.0))
}

/// Warm start for the embeddings: pairwise edge prediction on the graph
/// with a shallow per-entity table that is then installed as the base
/// layer. The tiny base initialization keeps early attention softmaxes
/// near uniform but also makes raw policy gradients vanish, so the warm
/// start both lifts the embedding scale into a usable range and carves
/// neighborhood geometry into it. Edges compete against same-kind
/// corruptions and the table is re-centered each pass so the learned
/// structure lives in relative geometry rather than a shared direction.
const PRETRAIN_MAX_PASSES: usize = 200;
const PRETRAIN_TARGET_ACCURACY: f64 = 0.97;
const PRETRAIN_LR: f64 = 0.05;
const PRETRAIN_NEGATIVES: usize = 8;

fn pretrain_glm(dataset: &Dataset, params: &mut GlmParams, seed: u64) -> Result<()> {
    let ckg = &dataset.ckg;
    let total = ckg.entity_count();
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for g in 0..total {
        let e = ckg.entity_at(g);
        for n in ckg.all_neighbors(e) {
            let gn = ckg.global_index(n);
            if gn > g {
                edges.push((g, gn));
            }
        }
    }
    if edges.is_empty() {
        return Ok(());
    }

    let m = ckg.num_users();
    let n = ckg.num_items();
    let same_kind_random = |g: usize, rng: &mut rand_chacha::ChaCha8Rng| -> usize {
        match ckg.entity_at(g).kind {
            crate::ckg::EntityKind::User => rng.random_range(0..m),
            crate::ckg::EntityKind::Item => m + rng.random_range(0..n),
            crate::ckg::EntityKind::Attribute => {
                m + n + rng.random_range(0..ckg.num_attributes())
            }
        }
    };

    let d0 = params.dims[0];
    let mut init_rng = util::stream_rng(seed, "pretrain-init", 0);
    let mut table: Array2<f64> =
        Array2::from_shape_fn((total, d0), |_| init_rng.random_range(-0.1..=0.1));

    for pass in 0..PRETRAIN_MAX_PASSES {
        let mut rng = util::stream_rng(seed, "glm-pretrain", pass as u64);
        let mut order = edges.clone();
        order.shuffle(&mut rng);
        let mut confidence = 0.0;
        let mut counted = 0usize;
        for (a, b) in order {
            for _ in 0..PRETRAIN_NEGATIVES {
                let neg = same_kind_random(b, &mut rng);
                if neg == b {
                    continue;
                }
                let s_pos = table.row(a).dot(&table.row(b));
                let s_neg = table.row(a).dot(&table.row(neg));
                let p = util::sigmoid(s_pos - s_neg);
                confidence += p;
                counted += 1;
                let coeff = PRETRAIN_LR * (1.0 - p);
                let ha = table.row(a).to_owned();
                let delta = (&table.row(b) - &table.row(neg)) * coeff;
                table.row_mut(a).zip_mut_with(&delta, |x, y| *x += y);
                table.row_mut(b).zip_mut_with(&(&ha * coeff), |x, y| *x += y);
                table.row_mut(neg).zip_mut_with(&(&ha * coeff), |x, y| *x -= y);
            }
        }
        // Re-center so no shared direction dominates cosine geometry.
        let mean = table.mean_axis(ndarray::Axis(0)).unwrap();
        for mut row in table.rows_mut() {
            row.zip_mut_with(&mean, |x, y| *x -= y);
        }
        if counted > 0 && confidence / counted as f64 >= PRETRAIN_TARGET_ACCURACY {
            eprintln!("PRETRAIN converged pass {} acc {:.4}", pass + 1, confidence / counted as f64);
            break;
        }
        if pass % 25 == 0 { eprintln!("PRETRAIN pass {pass} acc {:.4}", confidence / counted.max(1) as f64); }
    }

    params.base.assign(&table);
    glm::rescale_activations(&dataset.ckg, params, 0.3)?;
    Ok(())
}

/// The iterative optimization: initialize the recommender with uniform
/// negatives, then per epoch (with embeddings, lists, and factor snapshot
/// frozen at the epoch boundary) roll out one episode per shuffled train
/// positive, accumulate the policy gradient, pick the episode's
/// counterfactual item as the negative for that positive's factor update,
/// apply the accumulated policy ascent, and early-stop on validation
/// Recall@20.
///
/// Dead-end episodes (and the uniform-negative ablation mode) fall back to
/// a uniformly drawn unobserved negative.
pub fn co_train(
    dataset: &Dataset,
    config: &RunConfig,
    seed: u64,
    resume: Option<ResumePoint>,
    on_epoch: &mut dyn FnMut(EpochSnapshot<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.train.is_empty() {
        return Err(CerecError::invalid("co_train requires a non-empty train split"));
    }
    let ckg = &dataset.ckg;
    let m = ckg.num_users();
    let n = ckg.num_items();
    let dim = config.dim();

    let (mut factors, mut params, mut state) = match resume {
        Some(r) => (r.factors, r.params, r.state),
        None => {
            let mut factors = LatentFactors::init(m, n, dim, util::derive_seed(seed, "factors", 0));
            let init_steps = config.init_epochs * dataset.train.len();
            if init_steps > 0 {
                init_with_uniform_negatives(
                    &mut factors,
                    &dataset.train,
                    &dataset.observed,
                    init_steps,
                    config.lr,
                    config.reg,
                    util::derive_seed(seed, "init", 0),
                )?;
            }
            let mut params =
                glm::init_params(ckg, &config.dims, util::derive_seed(seed, "glm", 0))?;
            params.leaky_slope = config.leaky_slope;
            if config.pretrain_glm {
                pretrain_glm(dataset, &mut params, seed)?;
            }
            (factors, params, TrainState::fresh())
        }
    };

    let k_list = config.k.min(n);
    let no_exclusions = HashSet::new();
    let mut stopped_early = false;

    let start_epoch = state.epoch;
    for epoch in start_epoch..config.epochs {
        let t0 = Instant::now();

        // Frozen per-epoch snapshots.
        let cache = glm::forward_cached(ckg, &params)?;
        let emb = &cache.output;
        let factors_frozen = factors.clone();
        let mut rec_lists: Vec<RecList> = Vec::with_capacity(m);
        let mut masks: Vec<HashSet<u32>> = Vec::with_capacity(m);
        for u in 0..m as u32 {
            let list = factors_frozen.top_k(u, k_list, &no_exclusions)?;
            masks.push(list.item_set());
            rec_lists.push(list);
        }

        let mut shuffle_rng = util::stream_rng(seed, "epoch-shuffle", epoch as u64);
        let mut rollout_rng = util::stream_rng(seed, "epoch-rollout", epoch as u64);
        let mut fallback_rng = util::stream_rng(seed, "epoch-fallback", epoch as u64);
        let mut order = dataset.train.clone();
        order.shuffle(&mut shuffle_rng);

        let mut d_emb: Array2<f64> = Array2::zeros(emb.table.dim());
        let mut reward_sum = 0.0;
        let mut step_count = 0usize;
        let mut return_sum = 0.0;
        let mut episodes = 0usize;
        let mut fallbacks = 0usize;

        for &(u, i) in &order {
            let mut negative: Option<u32> = None;
            if config.counterfactual_negatives {
                let ectx = EpisodeCtx {
                    sampler: SamplerCtx::new(ckg, emb, config.leaky_slope),
                    factors: &factors_frozen,
                    rec_list: &rec_lists[u as usize],
                    mask: &masks[u as usize],
                };
                let traj = rollout(&ectx, u, i, config.t, config.gamma, &mut rollout_rng)?;
                if !traj.is_empty() {
                    episodes += 1;
                    return_sum += discounted_return(&traj);
                    let mut episode_reward = 0.0;
                    for s in &traj.steps {
                        reward_sum += s.reward;
                        episode_reward += s.reward;
                        step_count += 1;
                    }
                    let b = if config.baseline_on { state.baseline } else { 0.0 };
                    accumulate_reinforce_demb(&ectx, &traj, b, &mut d_emb)?;
                    if config.baseline_on {
                        let mean_step = episode_reward / traj.len() as f64;
                        state.baseline = 0.9 * state.baseline + 0.1 * mean_step;
                    }
                    negative = select_counterfactual(&traj).filter(|&j| j != i);
                }
            }
            let negative = match negative {
                Some(j) => j,
                None => {
                    fallbacks += 1;
                    match sample_unobserved(n, &dataset.observed[u as usize], &mut fallback_rng) {
                        Some(j) => j,
                        None => continue,
                    }
                }
            };
            factors.sgd_step(u, i, negative, config.lr, config.reg)?;
        }

        if config.counterfactual_negatives && config.lr_policy > 0.0 {
            let grads = cache.backward(ckg, &params, &d_emb);
            params.apply_ascent(&grads, config.lr_policy);
        }
        if fallbacks > 0 {
            log::debug!("epoch {epoch}: {fallbacks} uniform-negative fallbacks");
        }

        let val = validation_recall(&factors, dataset, config.exclude_train_at_eval)?;
        let record = EpochRecord {
            epoch,
            mean_reward: if step_count > 0 { reward_sum / step_count as f64 } else { 0.0 },
            cumulative_reward: if episodes > 0 { return_sum / episodes as f64 } else { 0.0 },
            val_recall_at_20: val,
            wall_time_s: t0.elapsed().as_secs_f64(),
        };
        state.log.push(record);
        state.epoch = epoch + 1;

        if val > state.best_recall {
            state.best_recall = val;
            state.best_epoch = epoch;
            state.epochs_since_best = 0;
        } else {
            state.epochs_since_best += 1;
        }

        on_epoch(EpochSnapshot { state: &state, factors: &factors, params: &params })?;

        if state.epochs_since_best >= config.patience {
            log::info!(
                "early stop at epoch {epoch}: no validation improvement for {} epochs",
                state.epochs_since_best
            );
            stopped_early = true;
            break;
        }
    }

    Ok(TrainOutcome { factors, params, state, stopped_early })
}

/// Borrowed view of the training state handed to the per-epoch callback
/// (checkpoint writing lives in the CLI).
pub struct EpochSnapshot<'a> {
    pub state: &'a TrainState,
    pub factors: &'a LatentFactors,
    pub params: &'a GlmParams,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ckg::{build_ckg, InteractionSet, Triple};
    use crate::synth::{self, SynthSpec};
    use std::collections::BTreeMap;

    fn fixture() -> (CollabKG, GlmParams) {
        // 1 user, 5 items, 2 attributes; item 0 carries both attributes.
        let interactions = InteractionSet::from_pairs([(0, 0), (0, 1)]);
        let alignment: BTreeMap<u64, u64> = (0..5).map(|i| (i, i)).collect();
        let triples = vec![
            Triple { head: 0, relation: 1, tail: 100 },
            Triple { head: 1, relation: 1, tail: 100 },
            Triple { head: 2, relation: 1, tail: 100 },
            Triple { head: 0, relation: 1, tail: 101 },
            Triple { head: 3, relation: 1, tail: 101 },
            Triple { head: 4, relation: 1, tail: 101 },
        ];
        let ckg = build_ckg(&interactions, &triples, &alignment).unwrap();
        let params = glm::init_params_with_scale(&ckg, &[3, 3], 71, 0.6).unwrap();
        (ckg, params)
    }

    fn episode_pieces(
        ckg: &CollabKG,
        params: &GlmParams,
        factors: &LatentFactors,
        k: usize,
    ) -> (GlmForward, RecList, HashSet<u32>) {
        let cache = glm::forward_cached(ckg, params).unwrap();
        let list = factors.top_k(0, k, &HashSet::new()).unwrap();
        let mask = list.item_set();
        (cache, list, mask)
    }

    #[test]
    fn epsilon_is_zero_for_kth_item() {
        let factors = LatentFactors::init(1, 5, 4, 3);
        let list = factors.top_k(0, 3, &HashSet::new()).unwrap();
        let kth = list.kth_item();
        let eps = epsilon_threshold(&factors, 0, &list, kth).unwrap();
        assert_eq!(eps, 0.0);
    }

    #[test]
    fn epsilon_closed_form_two_items() {
        // Scores 1.0 and 0.0; e_t is the top item of the two-item list.
        let user = ndarray::array![[1.0]];
        let item = ndarray::array![[1.0], [0.0]];
        let factors = LatentFactors { user, item };
        let list = factors.top_k(0, 2, &HashSet::new()).unwrap();
        let eps = epsilon_threshold(&factors, 0, &list, 0).unwrap();
        let want = util::sigmoid(1.0) - util::sigmoid(-1.0);
        assert!((eps - want).abs() < 1e-12);
        assert!((eps - 0.4622).abs() < 1e-4);
    }

    #[test]
    fn epsilon_matches_direct_softmax_arithmetic() {
        let factors = LatentFactors::init(4, 30, 6, 9);
        for u in 0..4u32 {
            let list = factors.top_k(u, 10, &HashSet::new()).unwrap();
            for e_t in [0u32, 5, 29] {
                let got = epsilon_threshold(&factors, u, &list, e_t).unwrap();
                // Direct recomputation with raw exponentials.
                let cands = candidates_with(&list.items, &[e_t]);
                let raw: Vec<f64> =
                    cands.iter().map(|&c| factors.predict_score(u, c).unwrap()).collect();
                let mx = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = raw.iter().map(|s| (s - mx).exp()).sum();
                let p = |item: u32| {
                    let pos = cands.iter().position(|&c| c == item).unwrap();
                    (raw[pos] - mx).exp() / z
                };
                let want = p(e_t) - p(list.kth_item());
                assert!((got - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn reward_branch_hand_cases() {
        let (ckg, params) = fixture();
        let factors = LatentFactors::init(1, 5, 3, 5);
        let (cache, list, _mask) = episode_pieces(&ckg, &params, &factors, 2);
        let mut emb = cache.output.clone();

        let state = State::new(EntityId::user(0), EntityId::item(0));
        let action = Action {
            item: EntityId::item(0),
            attribute: EntityId::attribute(0),
            next_item: EntityId::item(2),
            log_prob: -0.5,
        };

        // Identical embeddings -> cos = 1; epsilon very negative forces the
        // rational branch -> reward 2.
        let row = emb.table.row(ckg.global_index(EntityId::item(0))).to_owned();
        emb.table.row_mut(ckg.global_index(EntityId::item(2))).assign(&row);
        let r = reward(&state, &action, &factors, &list, &emb, &ckg, -10.0).unwrap();
        assert!((r - 2.0).abs() < 1e-12);

        // Orthogonal embeddings and an unreachable margin -> reward 0.
        let gi = ckg.global_index(EntityId::item(0));
        let gj = ckg.global_index(EntityId::item(2));
        emb.table.row_mut(gi).assign(&ndarray::array![1.0, 0.0, 0.0]);
        emb.table.row_mut(gj).assign(&ndarray::array![0.0, 1.0, 0.0]);
        let r = reward(&state, &action, &factors, &list, &emb, &ckg, 10.0).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn reward_matches_recomputation_and_stays_bounded() {
        let (ckg, params) = fixture();
        let factors = LatentFactors::init(1, 5, 3, 6);
        let (cache, list, _) = episode_pieces(&ckg, &params, &factors, 2);
        let emb = &cache.output;
        let mut rng = util::stream_rng(44, "reward-contract", 0);

        for _ in 0..1000 {
            let e_t = rng.random_range(0..5u32);
            let e_next = rng.random_range(0..5u32);
            let state = State::new(EntityId::user(0), EntityId::item(e_t));
            let action = Action {
                item: EntityId::item(e_t),
                attribute: EntityId::attribute(0),
                next_item: EntityId::item(e_next),
                log_prob: 0.0,
            };
            let eps = epsilon_threshold(&factors, 0, &list, e_t).unwrap();
            let r = reward(&state, &action, &factors, &list, emb, &ckg, eps).unwrap();
            assert!((-1.0..=2.0).contains(&r), "reward {r} out of bounds");

            // Branch decision recomputed from raw scores.
            let cands = candidates_with(&list.items, &[e_t, e_next]);
            let raw: Vec<f64> =
                cands.iter().map(|&c| factors.predict_score(0, c).unwrap()).collect();
            let mx = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = raw.iter().map(|s| (s - mx).exp()).sum();
            let p = |item: u32| {
                let pos = cands.iter().position(|&c| c == item).unwrap();
                (raw[pos] - mx).exp() / z
            };
            let rational = p(e_t) - p(e_next) >= eps;
            let c = util::cosine(
                emb.get(&ckg, EntityId::item(e_t)),
                emb.get(&ckg, EntityId::item(e_next)),
            );
            let want = if rational { 1.0 + c } else { c };
            assert!((r - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rollout_chains_states_and_truncates_on_dead_end() {
        let (ckg, params) = fixture();
        let factors = LatentFactors::init(1, 5, 3, 7);
        let (cache, list, mask) = episode_pieces(&ckg, &params, &factors, 2);
        let ectx = EpisodeCtx {
            sampler: SamplerCtx::new(&ckg, &cache.output, 0.01),
            factors: &factors,
            rec_list: &list,
            mask: &mask,
        };
        let mut rng = util::stream_rng(4, "rollout", 0);
        for _ in 0..200 {
            let traj = rollout(&ectx, 0, 0, 3, 0.95, &mut rng).unwrap();
            for w in traj.steps.windows(2) {
                assert_eq!(w[1].state.item, w[0].action.next_item);
                assert_eq!(w[1].state.user, w[0].state.user);
            }
            for s in &traj.steps {
                assert!(!mask.contains(&s.action.next_item.index));
                assert!((-1.0..=2.0).contains(&s.reward));
                assert!(s.log_prob() <= 0.0);
            }
        }

        // Mask every item: dead end at step 0 gives an empty trajectory.
        let all: HashSet<u32> = (0..5).collect();
        let ectx = EpisodeCtx {
            sampler: SamplerCtx::new(&ckg, &cache.output, 0.01),
            factors: &factors,
            rec_list: &list,
            mask: &all,
        };
        let traj = rollout(&ectx, 0, 0, 3, 0.95, &mut rng).unwrap();
        assert!(traj.is_empty());
        assert_eq!(discounted_return(&traj), 0.0);
    }

    #[test]
    fn single_path_rollout_return_is_first_reward() {
        // Mask all of attribute 0's items except item 2 and use item 1
        // (whose only attribute is 0) as the origin: exactly one path.
        let (ckg, params) = fixture();
        let factors = LatentFactors::init(1, 5, 3, 8);
        let cache = glm::forward_cached(&ckg, &params).unwrap();
        let list = factors.top_k(0, 2, &HashSet::new()).unwrap();
        let mask: HashSet<u32> = [0, 1].into();
        let ectx = EpisodeCtx {
            sampler: SamplerCtx::new(&ckg, &cache.output, 0.01),
            factors: &factors,
            rec_list: &list,
            mask: &mask,
        };
        let mut rng = util::stream_rng(5, "single", 0);
        let traj = rollout(&ectx, 0, 1, 1, 0.5, &mut rng).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj.steps[0].action.log_prob, 0.0);
        assert!((discounted_return(&traj) - traj.steps[0].reward).abs() < 1e-15);
    }

    #[test]
    fn discounted_return_hand_and_loop_oracle() {
        let mk = |rewards: &[f64], gamma: f64| Trajectory {
            origin: (0, 0),
            gamma,
            steps: rewards
                .iter()
                .map(|&r| StepRecord {
                    state: State::new(EntityId::user(0), EntityId::item(0)),
                    action: Action {
                        item: EntityId::item(0),
                        attribute: EntityId::attribute(0),
                        next_item: EntityId::item(1),
                        log_prob: -0.1,
                    },
                    reward: r,
                })
                .collect(),
        };
        assert!((discounted_return(&mk(&[1.0, 1.0], 0.5)) - 1.5).abs() < 1e-15);
        assert_eq!(discounted_return(&mk(&[], 0.9)), 0.0);

        let mut rng = util::stream_rng(6, "return", 0);
        let rewards: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..2.0)).collect();
        let traj = mk(&rewards, 0.83);
        let mut want = 0.0;
        let mut g = 1.0;
        for r in &rewards {
            want += g * r;
            g *= 0.83;
        }
        assert!((discounted_return(&traj) - want).abs() < 1e-12);
    }

    #[test]
    fn expected_return_matches_enumeration_within_monte_carlo_error() {
        let (ckg, params) = fixture();
        let factors = LatentFactors::init(1, 5, 3, 9);
        let (cache, list, mask) = episode_pieces(&ckg, &params, &factors, 2);
        let ectx = EpisodeCtx {
            sampler: SamplerCtx::new(&ckg, &cache.output, 0.01),
            factors: &factors,
            rec_list: &list,
            mask: &mask,
        };

        // Single-step episodes from item 0: exact expected return is
        // sum_a P(a) r(a).
        let exact_dist =
            sampler::enumerate_action_dist(&ectx.sampler, &State::new(EntityId::user(0), EntityId::item(0)), &mask, 1000)
                .unwrap();
        let eps = epsilon_threshold(&factors, 0, &list, 0).unwrap();
        let mut exact = 0.0;
        for (action, p) in &exact_dist {
            let r = reward(
                &State::new(EntityId::user(0), EntityId::item(0)),
                action,
                &factors,
                &list,
                &cache.output,
                &ckg,
                eps,
            )
            .unwrap();
            exact += p * r;
        }

        let mut rng = util::stream_rng(7, "mc-return", 0);
        let episodes = 20_000;
        let mut total = 0.0;
        let mut totalsq = 0.0;
        for _ in 0..episodes {
            let traj = rollout(&ectx, 0, 0, 1, 0.95, &mut rng).unwrap();
            let ret = discounted_return(&traj);
            total += ret;
            totalsq += ret * ret;
        }
        let mean = total / episodes as f64;
        let var = (totalsq / episodes as f64 - mean * mean).max(0.0);
        let se = (var / episodes as f64).sqrt();
        assert!(
            (mean - exact).abs() <= 3.0 * se + 1e-9,
            "mc {mean} vs exact {exact} (se {se})"
        );
    }

    #[test]
    fn reinforce_grad_zero_when_rewards_equal_baseline() {
        let (ckg, params) = fixture();
        let factors = LatentFactors::init(1, 5, 3, 10);
        let (cache, list, mask) = episode_pieces(&ckg, &params, &factors, 2);
        let ectx = EpisodeCtx {
            sampler: SamplerCtx::new(&ckg, &cache.output, 0.01),
            factors: &factors,
            rec_list: &list,
            mask: &mask,
        };
        let mut rng = util::stream_rng(8, "zero-adv", 0);
        let mut traj = rollout(&ectx, 0, 0, 2, 1.0, &mut rng).unwrap();
        assert!(!traj.is_empty());
        for s in &mut traj.steps {
            s.reward = 0.7;
        }
        let grads = reinforce_grad(&ectx, &traj, &params, &cache, 0.7).unwrap();
        for idx in 0..params.num_params() {
            assert_eq!(grads.param(idx), 0.0);
        }
    }

    #[test]
    fn reinforce_grad_is_linear_in_rewards() {
        let (ckg, params) = fixture();
        let factors = LatentFactors::init(1, 5, 3, 11);
        let (cache, list, mask) = episode_pieces(&ckg, &params, &factors, 2);
        let ectx = EpisodeCtx {
            sampler: SamplerCtx::new(&ckg, &cache.output, 0.01),
            factors: &factors,
            rec_list: &list,
            mask: &mask,
        };
        let mut rng = util::stream_rng(9, "linear", 0);
        let traj = rollout(&ectx, 0, 0, 2, 0.9, &mut rng).unwrap();
        assert!(!traj.is_empty());

        let g1 = reinforce_grad(&ectx, &traj, &params, &cache, 0.0).unwrap();
        let mut doubled = traj.clone();
        for s in &mut doubled.steps {
            s.reward *= 2.0;
        }
        let g2 = reinforce_grad(&ectx, &doubled, &params, &cache, 0.0).unwrap();
        for idx in 0..params.num_params() {
            assert!((g2.param(idx) - 2.0 * g1.param(idx)).abs() < 1e-12);
        }
    }

    #[test]
    fn reinforce_grad_single_step_matches_finite_differences() {
        let (ckg, params) = fixture();
        assert!(params.num_params() <= 100);
        let factors = LatentFactors::init(1, 5, 3, 12);
        let (cache, list, mask) = episode_pieces(&ckg, &params, &factors, 2);
        let ectx = EpisodeCtx {
            sampler: SamplerCtx::new(&ckg, &cache.output, 0.01),
            factors: &factors,
            rec_list: &list,
            mask: &mask,
        };
        let mut rng = util::stream_rng(10, "fd", 0);
        let traj = rollout(&ectx, 0, 0, 1, 0.95, &mut rng).unwrap();
        assert_eq!(traj.len(), 1);
        let r = traj.steps[0].reward;
        let action = traj.steps[0].action;
        let state = traj.steps[0].state;

        let grads = reinforce_grad(&ectx, &traj, &params, &cache, 0.0).unwrap();

        // f(theta) = r * log P(a | s) with r held fixed.
        let objective = |p: &GlmParams| -> f64 {
            let emb = glm::forward(&ckg, p).unwrap();
            let sctx = SamplerCtx::new(&ckg, &emb, 0.01);
            let hop1 = sampler::step_one_dist(&sctx, &state).unwrap();
            let p1 = hop1.iter().find(|&&(a, _)| a == action.attribute).unwrap().1;
            let hop2 = sampler::step_two_dist(&sctx, &state, action.attribute, &mask).unwrap();
            let p2 = hop2.iter().find(|&&(i, _)| i == action.next_item).unwrap().1;
            r * (p1.ln() + p2.ln())
        };
        let h = 1e-6;
        for idx in 0..params.num_params() {
            let orig = params.param(idx);
            let mut p = params.clone();
            p.set_param(idx, orig + h);
            let up = objective(&p);
            p.set_param(idx, orig - h);
            let down = objective(&p);
            let fd = (up - down) / (2.0 * h);
            let an = grads.param(idx);
            let denom = an.abs().max(fd.abs()).max(1e-3);
            assert!(
                (an - fd).abs() / denom <= 1e-4,
                "param {idx}: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn select_counterfactual_argmax_and_ties() {
        let step = |reward: f64, item: u32| StepRecord {
            state: State::new(EntityId::user(0), EntityId::item(0)),
            action: Action {
                item: EntityId::item(0),
                attribute: EntityId::attribute(0),
                next_item: EntityId::item(item),
                log_prob: -0.2,
            },
            reward,
        };
        let traj = Trajectory {
            origin: (0, 0),
            gamma: 0.9,
            steps: vec![step(0.2, 1), step(1.5, 2)],
        };
        assert_eq!(select_counterfactual(&traj), Some(2));

        let traj = Trajectory { origin: (0, 0), gamma: 0.9, steps: vec![step(0.3, 4)] };
        assert_eq!(select_counterfactual(&traj), Some(4));

        let traj = Trajectory {
            origin: (0, 0),
            gamma: 0.9,
            steps: vec![step(1.0, 1), step(1.0, 2)],
        };
        assert_eq!(select_counterfactual(&traj), Some(1));

        let empty = Trajectory { origin: (0, 0), gamma: 0.9, steps: vec![] };
        assert_eq!(select_counterfactual(&empty), None);
    }

    fn tiny_config(epochs: usize) -> RunConfig {
        RunConfig {
            dims: vec![8, 8],
            k: 5,
            epochs,
            patience: 50,
            init_epochs: 1,
            t: 2,
            eval_ks: vec![5],
            ..RunConfig::default()
        }
    }

    fn tiny_dataset(seed: u64) -> Dataset {
        let spec = SynthSpec {
            users: 15,
            items: 30,
            attributes: 10,
            attrs_per_item: 3,
            planted_per_user: 2,
            interactions_per_user: 10,
            clusters: 3,
            cluster_weight: 4.0,
        };
        synth::planted_dataset(&spec, seed).unwrap().0
    }

    #[test]
    fn co_train_zero_epochs_returns_init_only() {
        let ds = tiny_dataset(1);
        let outcome = co_train(&ds, &tiny_config(0), 3, None, &mut |_| Ok(())).unwrap();
        assert!(outcome.state.log.is_empty());
        assert_eq!(outcome.state.epoch, 0);
        assert!(!outcome.stopped_early);
    }

    #[test]
    fn co_train_is_deterministic() {
        let ds = tiny_dataset(2);
        let run = || co_train(&ds, &tiny_config(3), 5, None, &mut |_| Ok(())).unwrap();
        let a = run();
        let b = run();
        assert_eq!(a.factors, b.factors);
        for idx in 0..a.params.num_params() {
            assert_eq!(a.params.param(idx), b.params.param(idx));
        }
        assert_eq!(a.state.log.len(), b.state.log.len());
        for (ra, rb) in a.state.log.iter().zip(&b.state.log) {
            assert_eq!(ra.epoch, rb.epoch);
            assert_eq!(ra.mean_reward, rb.mean_reward);
            assert_eq!(ra.cumulative_reward, rb.cumulative_reward);
            assert_eq!(ra.val_recall_at_20, rb.val_recall_at_20);
            // wall_time_s is the one nondeterministic field by nature.
        }
    }

    #[test]
    fn co_train_resume_matches_uninterrupted_run() {
        let ds = tiny_dataset(3);
        let config = tiny_config(4);
        let full = co_train(&ds, &config, 9, None, &mut |_| Ok(())).unwrap();

        // Stop after 2 epochs, then resume.
        let two = tiny_config(2);
        let partial = co_train(&ds, &two, 9, None, &mut |_| Ok(())).unwrap();
        let snapshot = ResumePoint {
            state: partial.state.clone(),
            factors: partial.factors.clone(),
            params: partial.params.clone(),
        };
        let resumed = co_train(&ds, &config, 9, Some(snapshot), &mut |_| Ok(())).unwrap();

        assert_eq!(full.factors, resumed.factors);
        assert_eq!(full.state.log.len(), resumed.state.log.len());
        for (a, b) in full.state.log.iter().zip(&resumed.state.log) {
            assert_eq!(a.val_recall_at_20, b.val_recall_at_20);
        }
    }

    #[test]
    fn co_train_baseline_flag_changes_updates_but_stays_finite() {
        let ds = tiny_dataset(4);
        let mut config = tiny_config(2);
        config.baseline_on = true;
        let outcome = co_train(&ds, &config, 7, None, &mut |_| Ok(())).unwrap();
        assert!(outcome.factors.user.iter().all(|v| v.is_finite()));
        assert!(outcome.state.baseline.is_finite());
    }

    #[test]
    fn counterfactual_negatives_never_come_from_current_list() {
        // Every selected counterfactual was unmasked at sampling time, so it
        // cannot sit on the frozen recommendation list.
        let ds = tiny_dataset(5);
        let config = tiny_config(1);
        let factors = LatentFactors::init(ds.ckg.num_users(), ds.ckg.num_items(), 8, 1);
        let params = glm::init_params(&ds.ckg, &config.dims, 2).unwrap();
        let cache = glm::forward_cached(&ds.ckg, &params).unwrap();
        let mut rng = util::stream_rng(6, "validity", 0);
        for u in 0..ds.ckg.num_users() as u32 {
            let list = factors.top_k(u, config.k, &HashSet::new()).unwrap();
            let mask = list.item_set();
            let ectx = EpisodeCtx {
                sampler: SamplerCtx::new(&ds.ckg, &cache.output, 0.01),
                factors: &factors,
                rec_list: &list,
                mask: &mask,
            };
            for &(uu, ii) in ds.train.iter().filter(|&&(uu, _)| uu == u).take(3) {
                let traj = rollout(&ectx, uu, ii, 2, 0.95, &mut rng).unwrap();
                if let Some(j) = select_counterfactual(&traj) {
                    assert!(!mask.contains(&j));
                }
            }
        }
    }
}
