// Instrumented co-training loop: per-epoch negative composition, cluster
// cosine geometry, and recall trajectory.

use std::collections::{BTreeSet, HashSet};

use cerec::agent::{self, EpisodeCtx};
use cerec::config::RunConfig;
use cerec::eval;
use cerec::glm;
use cerec::recommender::{init_with_uniform_negatives, sample_unobserved, LatentFactors, RecList};
use cerec::sampler::SamplerCtx;
use cerec::synth;
use cerec::util;
use ndarray::Array2;
use rand::seq::SliceRandom;

fn val_recall(f: &LatentFactors, ds: &cerec::pipeline::Dataset, split: &[(u32, u32)]) -> f64 {
    let (rows, _) = eval::evaluate_ranking(f, ds, split, &[20], true).unwrap();
    rows.iter().find(|r| r.metric == "recall").unwrap().value
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let init_epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let lr_policy: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let mode: String = args.get(4).cloned().unwrap_or_else(|| "cf".into());
    let lr: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let dims_raw: String = args.get(6).cloned().unwrap_or_else(|| "32,16,32".into());
    let dims: Vec<usize> = dims_raw.split(',').map(|x| x.parse().unwrap()).collect();
    let dim: usize = *dims.last().unwrap();

    let spec = cerec::fixtures::planted_spec();
    let seed = 1000u64;
    let (ds, planted) = synth::planted_dataset(&spec, seed).unwrap();
    let ckg = &ds.ckg;
    let m = ckg.num_users();
    let n = ckg.num_items();

    // Disliked dense item ids per user.
    let item_attr_sets: Vec<BTreeSet<u32>> =
        (0..n as u32).map(|i| ds.item_attributes(i).into_iter().collect()).collect();
    let disliked: Vec<HashSet<u32>> = (0..m)
        .map(|u| {
            (0..n as u32)
                .filter(|&i| !item_attr_sets[i as usize].is_disjoint(&planted[u]))
                .collect()
        })
        .collect();
    let test_rel = ds.relevant_by_user(&ds.test);

    let config = RunConfig {
        dims: dims.clone(),
        k: 20,
        lr,
        lr_policy,
        pretrain_glm: true,
        ..RunConfig::default()
    };

    let mut factors = LatentFactors::init(m, n, dim, util::derive_seed(seed, "factors", 0));
    init_with_uniform_negatives(
        &mut factors,
        &ds.train,
        &ds.observed,
        init_epochs * ds.train.len(),
        config.lr,
        config.reg,
        util::derive_seed(seed, "init", 0),
    )
    .unwrap();
    // Reuse the crate's pretraining by running a 0-epoch co_train.
    let warm = agent::co_train(
        &ds,
        &RunConfig { epochs: 0, pretrain_glm: true, dims: config.dims.clone(), ..config.clone() },
        seed,
        None,
        &mut |_| Ok(()),
    )
    .unwrap();
    let mut params = warm.params;

    // Cluster cosine diagnostic (base table first, then forward output).
    {
        let mut same = Vec::new();
        let mut cross = Vec::new();
        let mut rng = util::stream_rng(7, "cosdiag-base", 0);
        use rand::Rng;
        let cluster_of = |i: u32| (ds.ckg.item_raw_id(i) as usize) % spec.clusters;
        for _ in 0..4000 {
            let a = rng.random_range(0..n as u32);
            let b = rng.random_range(0..n as u32);
            if a == b { continue; }
            let ga = ds.ckg.global_index(cerec::ckg::EntityId::item(a));
            let gb = ds.ckg.global_index(cerec::ckg::EntityId::item(b));
            let c = util::cosine(params.base.row(ga), params.base.row(gb));
            if cluster_of(a) == cluster_of(b) { same.push(c); } else { cross.push(c); }
        }
        println!("base cos same {:.3} cross {:.3}",
            same.iter().sum::<f64>() / same.len() as f64,
            cross.iter().sum::<f64>() / cross.len() as f64);
    }
    let emb0 = glm::forward(ckg, &params).unwrap();
    let cluster_of = |i: u32| (ds.ckg.item_raw_id(i) as usize) % spec.clusters;
    let mut same = Vec::new();
    let mut cross = Vec::new();
    let mut rng = util::stream_rng(7, "cosdiag", 0);
    use rand::Rng;
    for _ in 0..4000 {
        let a = rng.random_range(0..n as u32);
        let b = rng.random_range(0..n as u32);
        if a == b {
            continue;
        }
        let c = util::cosine(
            emb0.get(ckg, cerec::ckg::EntityId::item(a)),
            emb0.get(ckg, cerec::ckg::EntityId::item(b)),
        );
        if cluster_of(a) == cluster_of(b) {
            same.push(c);
        } else {
            cross.push(c);
        }
    }
    println!(
        "cos same-cluster {:.3}, cross {:.3}",
        same.iter().sum::<f64>() / same.len() as f64,
        cross.iter().sum::<f64>() / cross.len() as f64
    );
    println!("init val recall {:.4}", val_recall(&factors, &ds, &ds.valid));

    let no_excl = HashSet::new();
    let mut baseline_carry = 1.4f64;
    for epoch in 0..epochs {
        let cache = glm::forward_cached(ckg, &params).unwrap();
        let emb = &cache.output;
        let frozen = factors.clone();
        let mut lists: Vec<RecList> = Vec::with_capacity(m);
        let mut masks: Vec<HashSet<u32>> = Vec::with_capacity(m);
        for u in 0..m as u32 {
            let list = frozen.top_k(u, 20, &no_excl).unwrap();
            masks.push(list.item_set());
            lists.push(list);
        }
        let mut order = ds.train.clone();
        let mut shuffle_rng = util::stream_rng(seed, "s", epoch as u64);
        let mut roll_rng = util::stream_rng(seed, "r", epoch as u64);
        let mut fb_rng = util::stream_rng(seed, "f", epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let mut d_emb: Array2<f64> = Array2::zeros(emb.table.dim());
        let mut baseline = if epoch == 0 { 1.4f64 } else { baseline_carry };
        let (mut neg_dis, mut neg_test, mut neg_same_cluster, mut total, mut fallback) =
            (0usize, 0usize, 0usize, 0usize, 0usize);
        let mut reward_sum = 0.0;
        let mut steps = 0usize;
        let mut rational = 0usize;

        for &(u, i) in &order {
            let mut neg = None;
            if mode == "cf" {
                let ectx = EpisodeCtx {
                    sampler: SamplerCtx::new(ckg, emb, 0.01),
                    factors: &frozen,
                    rec_list: &lists[u as usize],
                    mask: &masks[u as usize],
                };
                let traj = agent::rollout(&ectx, u, i, config.t, config.gamma, &mut roll_rng).unwrap();
                if !traj.is_empty() {
                    let mut ep_r = 0.0;
                    for s in &traj.steps {
                        reward_sum += s.reward;
                        ep_r += s.reward;
                        steps += 1;
                        if s.reward >= 1.0 - 1e-12 {
                            rational += 1;
                        }
                    }
                    agent::accumulate_reinforce_demb(&ectx, &traj, baseline, &mut d_emb).unwrap();
                    baseline = 0.9 * baseline + 0.1 * ep_r / traj.len() as f64;
                    neg = agent::select_counterfactual(&traj).filter(|&j| j != i);
                }
            }
            let j = match neg {
                Some(j) => j,
                None => {
                    fallback += 1;
                    match sample_unobserved(n, &ds.observed[u as usize], &mut fb_rng) {
                        Some(j) => j,
                        None => continue,
                    }
                }
            };
            if mode == "cf" && neg.is_some() {
                total += 1;
                if disliked[u as usize].contains(&j) {
                    neg_dis += 1;
                }
                if test_rel[u as usize].contains(&j) {
                    neg_test += 1;
                }
                if cluster_of(j) == cluster_of(i) {
                    neg_same_cluster += 1;
                }
            }
            factors.sgd_step(u, i, j, config.lr, config.reg).unwrap();
        }
        if mode == "cf" && lr_policy > 0.0 {
            let grads = cache.backward(ckg, &params, &d_emb);
            params.apply_ascent(&grads, lr_policy);
        }
        baseline_carry = baseline;

        if epoch % 2 == 0 || epoch == epochs - 1 {
            println!(
                "epoch {epoch}: val={:.4} | neg disliked {:.2} test {:.3} same_cluster {:.2} (n={total}, fb={fallback}) | r={:.3} rational={:.2}",
                val_recall(&factors, &ds, &ds.valid),
                neg_dis as f64 / total.max(1) as f64,
                neg_test as f64 / total.max(1) as f64,
                neg_same_cluster as f64 / total.max(1) as f64,
                reward_sum / steps.max(1) as f64,
                rational as f64 / steps.max(1) as f64,
            );
        }
    }
}
