// Temporary tuning probe for the planted-synthetic acceptance bars.

use std::collections::BTreeSet;
use std::time::Instant;

use cerec::agent;
use cerec::config::RunConfig;
use cerec::eval;
use cerec::explain::NameTable;
use cerec::fixtures;
use cerec::recommender::LatentFactors;
use cerec::synth;
use cerec::util;
use rand::seq::SliceRandom;

fn test_recall(
    factors: &LatentFactors,
    dataset: &cerec::pipeline::Dataset,
    config: &RunConfig,
) -> f64 {
    let (rows, _) =
        eval::evaluate_ranking(factors, dataset, &dataset.test, &[20], true).unwrap();
    let _ = config;
    rows.iter().find(|r| r.metric == "recall").unwrap().value
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(15);
    let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let attrs_per_item: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2);
    let inter: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(40);
    let lr_policy: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.005);

    let mut spec = fixtures::planted_spec();
    spec.attrs_per_item = attrs_per_item;
    spec.interactions_per_user = inter;

    let t_total = Instant::now();
    let mut lifts = Vec::new();
    let mut ratios = Vec::new();

    for seed in 0..seeds {
        let t0 = Instant::now();
        let (dataset, planted) = synth::planted_dataset(&spec, 1000 + seed).unwrap();
        let mut config = RunConfig {
            dims: vec![32, 16, 32],
            k: 20,
            epochs,
            patience: 1000,
            init_epochs: 8,
            t: 2,
            lr_policy,
            pretrain_glm: true,
            eval_ks: vec![20],
            ..RunConfig::default()
        };

        config.counterfactual_negatives = true;
        let cf = agent::co_train(&dataset, &config, seed, None, &mut |_| Ok(())).unwrap();
        let cf_recall = test_recall(&cf.factors, &dataset, &config);

        config.counterfactual_negatives = false;
        let uni = agent::co_train(&dataset, &config, seed, None, &mut |_| Ok(())).unwrap();
        let uni_recall = test_recall(&uni.factors, &dataset, &config);

        let lift = cf_recall / uni_recall;
        lifts.push(lift);

        // Reward curve quartiles.
        let curve: Vec<f64> = cf.state.log.iter().map(|r| r.cumulative_reward).collect();
        let q = curve.len() / 4;
        let first: f64 = curve[..q.max(1)].iter().sum::<f64>() / q.max(1) as f64;
        let last: f64 = curve[curve.len() - q.max(1)..].iter().sum::<f64>() / q.max(1) as f64;

        // Explanation consistency.
        let gt = eval::dns_ground_truth(&dataset, 20, 10, 16, 0.05, seed).unwrap();
        let records = cerec::cli::explain_pairs(
            &dataset,
            &cf.factors,
            &cf.params,
            &NameTable::new(),
            &dataset.test,
            20,
            config.t,
            config.gamma,
        )
        .unwrap();
        let mut cerec_prf = Vec::new();
        let mut good = 0usize;
        for r in &records {
            let u = dataset.ckg.user_by_raw(r.user).unwrap();
            let delta: BTreeSet<u32> =
                r.delta_ids.iter().filter_map(|&a| dataset.ckg.attr_by_raw(a)).collect();
            if !delta.is_disjoint(&planted[u as usize]) {
                good += 1;
            }
            if let Some(v) = eval::explanation_prf(&delta, gt.negatives_of(u)) {
                cerec_prf.push(v);
            }
        }
        let cerec_f1 = eval::prf_summary(&cerec_prf).map(|s| s.f1).unwrap_or(0.0);

        // Random 10-attribute baseline on the same pairs.
        let mut rng = util::stream_rng(seed, "rdexp", 0);
        let mut rand_prf = Vec::new();
        for r in &records {
            let u = dataset.ckg.user_by_raw(r.user).unwrap();
            let mut pool: Vec<u32> = (0..dataset.ckg.num_attributes() as u32).collect();
            pool.shuffle(&mut rng);
            let delta: BTreeSet<u32> = pool.into_iter().take(10).collect();
            if let Some(v) = eval::explanation_prf(&delta, gt.negatives_of(u)) {
                rand_prf.push(v);
            }
        }
        let rand_f1 = eval::prf_summary(&rand_prf).map(|s| s.f1).unwrap_or(0.0);
        let ratio = if rand_f1 > 0.0 { cerec_f1 / rand_f1 } else { f64::INFINITY };
        ratios.push(ratio);

        // DNS sanity: fraction of planted attrs recovered.
        let mut hits = 0;
        let mut total = 0;
        for (u, dis) in planted.iter().enumerate() {
            for a in dis {
                total += 1;
                if gt.negatives[u].contains(a) {
                    hits += 1;
                }
            }
        }

        println!(
            "seed {seed}: cf={cf_recall:.4} uni={uni_recall:.4} lift={lift:.3} | \
             f1 cerec={cerec_f1:.4} rand={rand_f1:.4} ratio={ratio:.2} | \
             good_frac={:.2} n_expl={} | curve {first:.3}->{last:.3} | dns_rec={:.2} | {:.1}s",
            good as f64 / records.len().max(1) as f64,
            records.len(),
            hits as f64 / total as f64,
            t0.elapsed().as_secs_f64()
        );
    }
    let mean_lift: f64 = lifts.iter().sum::<f64>() / lifts.len() as f64;
    let mean_ratio: f64 = ratios.iter().sum::<f64>() / ratios.len() as f64;
    println!(
        "mean lift {mean_lift:.3}, mean f1 ratio {mean_ratio:.2}, total {:.1}s",
        t_total.elapsed().as_secs_f64()
    );
}
