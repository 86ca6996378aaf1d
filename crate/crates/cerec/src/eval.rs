//! Evaluation harness: Top-K ranking metrics, explanation consistency
//! against a negative-preference ground truth, the ground-truth builder
//! (iterated hard-negative sampling over a user x attribute factor model),
//! the reinforcement-depth sweep, and a brute-force minimality oracle for
//! counterfactual attribute sets.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent;
use crate::ckg::{CollabKG, EntityId, EntityKind};
use crate::config::RunConfig;
use crate::error::{CerecError, Result};
use crate::pipeline::Dataset;
use crate::recommender::{candidates_with, LatentFactors, RecList};
use crate::util;

/// Fraction of the relevant items that made the list; `None` (user skipped)
/// when nothing is relevant.
pub fn recall_at_k(topk: &[u32], relevant: &HashSet<u32>) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let hits = topk.iter().filter(|i| relevant.contains(i)).count();
    Some(hits as f64 / relevant.len() as f64)
}

/// Binary-relevance NDCG with a log2 position discount.
pub fn ndcg_at_k(topk: &[u32], relevant: &HashSet<u32>) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let dcg: f64 = topk
        .iter()
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(rank, _)| 1.0 / ((rank + 2) as f64).log2())
        .sum();
    let ideal_hits = relevant.len().min(topk.len());
    let idcg: f64 = (0..ideal_hits).map(|rank| 1.0 / ((rank + 2) as f64).log2()).sum();
    Some(dcg / idcg)
}

/// 1 when any relevant item made the list, else 0.
pub fn hr_at_k(topk: &[u32], relevant: &HashSet<u32>) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    Some(if topk.iter().any(|i| relevant.contains(i)) { 1.0 } else { 0.0 })
}

/// Precision/recall/F1 of an emitted attribute set against the user's
/// negative-preference set, both over the shared attribute universe.
/// `None` (pair skipped) when the ground truth is empty; empty delta gives
/// precision 0 by convention.
pub fn explanation_prf(
    delta: &BTreeSet<u32>,
    truth: &BTreeSet<u32>,
) -> Option<(f64, f64, f64)> {
    if truth.is_empty() {
        return None;
    }
    let hits = delta.intersection(truth).count() as f64;
    let precision = if delta.is_empty() { 0.0 } else { hits / delta.len() as f64 };
    let recall = hits / truth.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Some((precision, recall, f1))
}

/// One metric value at one cutoff.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub k: usize,
    pub value: f64,
}

/// Explanation consistency summary with standard errors over pairs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrfSummary {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub se_precision: f64,
    pub se_recall: f64,
    pub se_f1: f64,
    pub pairs: usize,
}

/// Evaluation output: ranking rows per (metric, K), optional explanation
/// consistency, and the configuration echo that produced it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub config: serde_json::Value,
    pub rows: Vec<MetricRow>,
    pub explanation: Option<PrfSummary>,
    pub users_evaluated: usize,
}

impl MetricReport {
    /// Line-delimited JSON: one config record, then one record per row.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let io = |e| CerecError::Io { path: path.to_path_buf(), source: e };
        let file = File::create(path).map_err(io)?;
        let mut w = BufWriter::new(file);
        let header = serde_json::json!({
            "type": "config",
            "config": self.config,
            "users_evaluated": self.users_evaluated,
        });
        writeln!(w, "{header}").map_err(io)?;
        for row in &self.rows {
            let rec = serde_json::json!({
                "type": "metric", "metric": row.metric, "k": row.k, "value": row.value,
            });
            writeln!(w, "{rec}").map_err(io)?;
        }
        if let Some(prf) = &self.explanation {
            let rec = serde_json::json!({ "type": "explanation_consistency", "summary": prf });
            writeln!(w, "{rec}").map_err(io)?;
        }
        Ok(())
    }

    /// Flat CSV: `metric,k,value` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e| CerecError::Io { path: path.to_path_buf(), source: e };
        let file = File::create(path).map_err(io)?;
        let mut w = BufWriter::new(file);
        writeln!(w, "metric,k,value").map_err(io)?;
        for row in &self.rows {
            writeln!(w, "{},{},{}", row.metric, row.k, row.value).map_err(io)?;
        }
        if let Some(prf) = &self.explanation {
            writeln!(w, "explanation_precision,,{}", prf.precision).map_err(io)?;
            writeln!(w, "explanation_recall,,{}", prf.recall).map_err(io)?;
            writeln!(w, "explanation_f1,,{}", prf.f1).map_err(io)?;
        }
        Ok(())
    }
}

/// Mean ranking metrics over users with at least one relevant item in the
/// split. Train positives are excluded from candidate lists when
/// `exclude_train` is set.
pub fn evaluate_ranking(
    factors: &LatentFactors,
    dataset: &Dataset,
    split: &[(u32, u32)],
    ks: &[usize],
    exclude_train: bool,
) -> Result<(Vec<MetricRow>, usize)> {
    let relevant = dataset.relevant_by_user(split);
    let n_items = dataset.ckg.num_items();
    let empty = HashSet::new();

    let mut sums: Vec<[f64; 3]> = vec![[0.0; 3]; ks.len()];
    let mut users_evaluated = 0usize;

    for u in 0..dataset.ckg.num_users() as u32 {
        let rel: HashSet<u32> = relevant[u as usize].iter().copied().collect();
        if rel.is_empty() {
            continue;
        }
        let exclusions = if exclude_train { &dataset.observed[u as usize] } else { &empty };
        let available = n_items - exclusions.len();
        if available == 0 {
            continue;
        }
        let k_max = ks.iter().copied().max().unwrap().min(available);
        let list = factors.top_k(u, k_max, exclusions)?;
        users_evaluated += 1;
        for (slot, &k) in ks.iter().enumerate() {
            let cut = &list.items[..k.min(list.items.len())];
            sums[slot][0] += recall_at_k(cut, &rel).unwrap_or(0.0);
            sums[slot][1] += ndcg_at_k(cut, &rel).unwrap_or(0.0);
            sums[slot][2] += hr_at_k(cut, &rel).unwrap_or(0.0);
        }
    }

    let denom = users_evaluated.max(1) as f64;
    let mut rows = Vec::new();
    for (slot, &k) in ks.iter().enumerate() {
        rows.push(MetricRow { metric: "recall".into(), k, value: sums[slot][0] / denom });
        rows.push(MetricRow { metric: "ndcg".into(), k, value: sums[slot][1] / denom });
        rows.push(MetricRow { metric: "hr".into(), k, value: sums[slot][2] / denom });
    }
    Ok((rows, users_evaluated))
}

/// Per-user negative-preference attribute sets (dense attribute ids) plus
/// the pair-level indicator accessor.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthSet {
    pub negatives: Vec<BTreeSet<u32>>,
}

impl GroundTruthSet {
    pub fn negatives_of(&self, user: u32) -> &BTreeSet<u32> {
        &self.negatives[user as usize]
    }

    /// Binary indicator over an explicit attribute universe.
    pub fn indicator(&self, user: u32, universe: &[u32]) -> Vec<u8> {
        let set = self.negatives_of(user);
        universe.iter().map(|a| u8::from(set.contains(a))).collect()
    }
}

/// Ground-truth builder: trains a user x attribute factor model on the
/// attributes of interacted items, then for a number of rounds uniformly
/// draws candidate attributes, promotes the highest-scoring non-positive
/// one per update as the hard negative, and keeps the final round's
/// selections as each user's negative-preference set.
pub fn dns_ground_truth(
    dataset: &Dataset,
    rounds: usize,
    pool: usize,
    dim: usize,
    lr: f64,
    seed: u64,
) -> Result<GroundTruthSet> {
    let m = dataset.ckg.num_users();
    let p = dataset.ckg.num_attributes();
    if p == 0 {
        return Err(CerecError::invalid("ground-truth builder needs a non-empty attribute universe"));
    }

    // Positive attributes per user: union over the user's train items.
    let mut positives: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); m];
    for &(u, i) in &dataset.train {
        for a in dataset.item_attributes(i) {
            positives[u as usize].insert(a);
        }
    }

    let mut rng = util::stream_rng(seed, "dns", 0);
    let mut user_f = Array2::from_shape_fn((m, dim), |_| rng.random_range(-0.1..=0.1));
    let mut attr_f = Array2::from_shape_fn((p, dim), |_| rng.random_range(-0.1..=0.1));
    let mut negatives: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); m];

    for _ in 0..rounds {
        for set in &mut negatives {
            set.clear();
        }
        for u in 0..m {
            for &pos in positives[u].clone().iter() {
                // Uniform candidate pool, positives filtered out.
                let mut best: Option<(u32, f64)> = None;
                for _ in 0..pool {
                    let cand = rng.random_range(0..p as u32);
                    if positives[u].contains(&cand) {
                        continue;
                    }
                    let score = user_f.row(u).dot(&attr_f.row(cand as usize));
                    let better = match best {
                        None => true,
                        Some((b, s)) => score > s || (score == s && cand < b),
                    };
                    if better {
                        best = Some((cand, score));
                    }
                }
                let Some((neg, _)) = best else { continue };

                // Pairwise ascent on ln sigma(s(u,pos) - s(u,neg)).
                let s_pos = user_f.row(u).dot(&attr_f.row(pos as usize));
                let s_neg = user_f.row(u).dot(&attr_f.row(neg as usize));
                let coeff = lr * (1.0 - util::sigmoid(s_pos - s_neg));
                let xu = user_f.row(u).to_owned();
                let ap = attr_f.row(pos as usize).to_owned();
                let an = attr_f.row(neg as usize).to_owned();
                user_f.row_mut(u).scaled_add(coeff, &(&ap - &an));
                attr_f.row_mut(pos as usize).scaled_add(coeff, &xu);
                attr_f.row_mut(neg as usize).scaled_add(-coeff, &xu);

                negatives[u].insert(neg);
            }
        }
    }

    Ok(GroundTruthSet { negatives })
}

/// Result of the exhaustive minimality search.
#[derive(Clone, Debug)]
pub struct MinCounterfactual {
    /// Smallest non-empty attribute delta among rational 2-hop candidates.
    pub delta: BTreeSet<u32>,
    pub size: usize,
    /// False when no rational candidate with a non-empty delta exists.
    pub feasible: bool,
    /// False when the candidate budget was exhausted before finishing.
    pub complete: bool,
}

/// Exhaustive audit oracle: scan every item reachable in two hops from `i`
/// that is off the user's list, recompute the margin test from raw scores,
/// and return the smallest non-empty attribute delta among passing items.
/// Rationality is recomputed here from first principles, independent of the
/// agent's reward code.
pub fn brute_force_min_counterfactual(
    factors: &LatentFactors,
    ckg: &CollabKG,
    rec_list: &RecList,
    u: u32,
    i: u32,
    budget: usize,
) -> Result<MinCounterfactual> {
    let attrs_of = |item: u32| -> Result<BTreeSet<u32>> {
        Ok(ckg
            .neighbors(EntityId::item(item), EntityKind::Attribute)?
            .iter()
            .map(|e| e.index)
            .collect())
    };
    let i_attrs = attrs_of(i)?;
    let listed: HashSet<u32> = rec_list.item_set();

    // Two-hop candidates, deterministic order.
    let mut candidates: BTreeSet<u32> = BTreeSet::new();
    for &attr in ckg.neighbors(EntityId::item(i), EntityKind::Attribute)? {
        for &item in ckg.neighbors(attr, EntityKind::Item)? {
            if item.index != i && !listed.contains(&item.index) {
                candidates.insert(item.index);
            }
        }
    }

    let epsilon = independent_margin(factors, rec_list, u, i)?;
    let mut best: Option<BTreeSet<u32>> = None;
    let mut complete = true;
    for (scanned, &j) in candidates.iter().enumerate() {
        if scanned >= budget {
            complete = false;
            log::warn!("minimality search for ({u}, {i}) hit the budget of {budget} candidates");
            break;
        }
        if !independent_rationality(factors, rec_list, u, i, j, epsilon)? {
            continue;
        }
        let delta: BTreeSet<u32> = attrs_of(j)?.difference(&i_attrs).copied().collect();
        if delta.is_empty() {
            continue;
        }
        let replace = match &best {
            None => true,
            Some(b) => delta.len() < b.len(),
        };
        if replace {
            best = Some(delta);
        }
    }

    Ok(match best {
        Some(delta) => {
            let size = delta.len();
            MinCounterfactual { delta, size, feasible: true, complete }
        }
        None => MinCounterfactual { delta: BTreeSet::new(), size: 0, feasible: false, complete },
    })
}

/// Margin recomputed from raw dot products with explicit exponentials
/// (max-shifted), on the list plus the queried item.
fn independent_margin(
    factors: &LatentFactors,
    rec_list: &RecList,
    u: u32,
    e_t: u32,
) -> Result<f64> {
    let cands = candidates_with(&rec_list.items, &[e_t]);
    let scores: Vec<f64> =
        cands.iter().map(|&c| factors.predict_score(u, c)).collect::<Result<_>>()?;
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    let prob = |item: u32| -> f64 {
        let pos = cands.iter().position(|&c| c == item).unwrap();
        (scores[pos] - max).exp() / z
    };
    Ok(prob(e_t) - prob(rec_list.kth_item()))
}

/// The margin test over the list plus both queried items.
fn independent_rationality(
    factors: &LatentFactors,
    rec_list: &RecList,
    u: u32,
    e_t: u32,
    e_next: u32,
    epsilon: f64,
) -> Result<bool> {
    let cands = candidates_with(&rec_list.items, &[e_t, e_next]);
    let scores: Vec<f64> =
        cands.iter().map(|&c| factors.predict_score(u, c)).collect::<Result<_>>()?;
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    let prob = |item: u32| -> f64 {
        let pos = cands.iter().position(|&c| c == item).unwrap();
        (scores[pos] - max).exp() / z
    };
    Ok(prob(e_t) - prob(e_next) >= epsilon)
}

/// Re-run co-training at each reinforcement depth with shared seeds and
/// evaluate on the test split; one report per depth, the depth echoed in
/// each report's config.
pub fn depth_sweep(
    dataset: &Dataset,
    base: &RunConfig,
    depths: &[usize],
    seed: u64,
) -> Result<Vec<MetricReport>> {
    let mut reports = Vec::with_capacity(depths.len());
    for &t in depths {
        let mut config = base.clone();
        config.t = t;
        config.validate()?;
        let outcome = agent::co_train(dataset, &config, seed, None, &mut |_| Ok(()))?;
        let (rows, users_evaluated) = evaluate_ranking(
            &outcome.factors,
            dataset,
            &dataset.test,
            &config.eval_ks,
            config.exclude_train_at_eval,
        )?;
        reports.push(MetricReport {
            config: config.echo(),
            rows,
            explanation: None,
            users_evaluated,
        });
    }
    Ok(reports)
}

/// Plot-ready TSV for a sweep: one line per (depth, metric, k).
pub fn write_sweep_tsv(path: &Path, depths: &[usize], reports: &[MetricReport]) -> Result<()> {
    let io = |e| CerecError::Io { path: path.to_path_buf(), source: e };
    let file = File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "t\tmetric\tk\tvalue").map_err(io)?;
    for (t, report) in depths.iter().zip(reports) {
        for row in &report.rows {
            writeln!(w, "{t}\t{}\t{}\t{}", row.metric, row.k, row.value).map_err(io)?;
        }
    }
    Ok(())
}

/// Mean and standard error of explanation consistency over explained pairs.
pub fn prf_summary(values: &[(f64, f64, f64)]) -> Option<PrfSummary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = |f: &dyn Fn(&(f64, f64, f64)) -> f64| values.iter().map(f).sum::<f64>() / n;
    let se = |f: &dyn Fn(&(f64, f64, f64)) -> f64, m: f64| {
        if values.len() < 2 {
            return 0.0;
        }
        let var = values.iter().map(|v| (f(v) - m).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    };
    let (p, r, f1) = (
        mean(&|v| v.0),
        mean(&|v| v.1),
        mean(&|v| v.2),
    );
    Some(PrfSummary {
        precision: p,
        recall: r,
        f1,
        se_precision: se(&|v| v.0, p),
        se_recall: se(&|v| v.1, r),
        se_f1: se(&|v| v.2, f1),
        pairs: values.len(),
    })
}
