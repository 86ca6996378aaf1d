//! Planted-structure synthetic data: each user dislikes items carrying any of
//! a small set of planted attributes and interacts only with clean items.
//! The planted sets double as recovery targets for the ground-truth builder
//! and the explanation-consistency checks.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ckg::{InteractionSet, RelationVocab, Triple};
use crate::error::{CerecError, Result};
use crate::pipeline::{self, Dataset};
use crate::util;

/// Shape of a generated dataset. Items are split round-robin into taste
/// clusters; each user samples likable items with extra weight on one
/// preferred cluster, which gives the recommender real collaborative
/// structure to learn on top of the planted dislikes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthSpec {
    pub users: usize,
    pub items: usize,
    pub attributes: usize,
    pub attrs_per_item: usize,
    pub planted_per_user: usize,
    pub interactions_per_user: usize,
    /// Number of taste clusters; 0 or 1 disables taste structure.
    pub clusters: usize,
    /// Sampling weight of the user's preferred cluster relative to 1.
    pub cluster_weight: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            users: 200,
            items: 300,
            attributes: 20,
            attrs_per_item: 2,
            planted_per_user: 2,
            interactions_per_user: 60,
            clusters: 6,
            cluster_weight: 8.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.items == 0 || self.attributes == 0 {
            return Err(CerecError::InvalidConfig("synth sizes must be positive".into()));
        }
        if self.attrs_per_item == 0 || self.attrs_per_item > self.attributes {
            return Err(CerecError::InvalidConfig(
                "attrs_per_item must be in 1..=attributes".into(),
            ));
        }
        if self.planted_per_user >= self.attributes {
            return Err(CerecError::InvalidConfig(
                "planted_per_user must leave likable attributes".into(),
            ));
        }
        if self.interactions_per_user == 0 {
            return Err(CerecError::InvalidConfig(
                "interactions_per_user must be positive".into(),
            ));
        }
        if self.clusters > self.items {
            return Err(CerecError::InvalidConfig("more clusters than items".into()));
        }
        if !(self.cluster_weight >= 1.0) {
            return Err(CerecError::InvalidConfig("cluster_weight must be >= 1".into()));
        }
        Ok(())
    }

    /// Parse a flat `key = value` spec file.
    pub fn from_file(path: &Path) -> Result<SynthSpec> {
        let body = fs::read_to_string(path)
            .map_err(|e| CerecError::Io { path: path.to_path_buf(), source: e })?;
        let mut spec = SynthSpec::default();
        for (idx, raw) in body.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CerecError::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: "expected `key = value`".into(),
            })?;
            let value: usize = value.trim().parse().map_err(|_| CerecError::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: "expected a non-negative integer".into(),
            })?;
            match key.trim() {
                "users" => spec.users = value,
                "items" => spec.items = value,
                "attributes" => spec.attributes = value,
                "attrs_per_item" => spec.attrs_per_item = value,
                "planted_per_user" => spec.planted_per_user = value,
                "interactions_per_user" => spec.interactions_per_user = value,
                "clusters" => spec.clusters = value,
                "cluster_weight" => spec.cluster_weight = value as f64,
                other => {
                    return Err(CerecError::Parse {
                        path: path.to_path_buf(),
                        line: idx + 1,
                        msg: format!("unknown synth key `{other}`"),
                    })
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Generated dataset in raw id space. Item `k` aligns to graph entity `k`;
/// attribute `a` is graph entity `items + a`.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub spec: SynthSpec,
    pub interactions: InteractionSet,
    pub triples: Vec<Triple>,
    pub alignment: BTreeMap<u64, u64>,
    pub vocab: RelationVocab,
    /// Per user: raw attribute entity ids the user dislikes.
    pub planted: Vec<BTreeSet<u64>>,
}

pub fn generate(spec: &SynthSpec, seed: u64) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = util::stream_rng(seed, "synth", 0);
    let attr_base = spec.items as u64;

    let mut vocab = RelationVocab::new();
    let rel = vocab.intern("has_attribute");

    // Item attribute sets: distinct attributes per item.
    let mut item_attrs: Vec<BTreeSet<u64>> = Vec::with_capacity(spec.items);
    let mut triples = Vec::new();
    for item in 0..spec.items as u64 {
        let mut attrs = BTreeSet::new();
        while attrs.len() < spec.attrs_per_item {
            attrs.insert(rng.random_range(0..spec.attributes as u64));
        }
        for &a in &attrs {
            triples.push(Triple { head: item, relation: rel, tail: attr_base + a });
        }
        item_attrs.push(attrs);
    }

    // Planted dislikes per user.
    let mut planted = Vec::with_capacity(spec.users);
    for _ in 0..spec.users {
        let mut dislikes = BTreeSet::new();
        while dislikes.len() < spec.planted_per_user {
            dislikes.insert(rng.random_range(0..spec.attributes as u64));
        }
        planted.push(dislikes);
    }

    // Interactions: each user samples without replacement from items
    // carrying none of their planted attributes, with the preferred
    // cluster's items upweighted.
    let clustered = spec.clusters > 1;
    let cluster_of = |item: u64| (item as usize) % spec.clusters.max(1);
    let mut interactions = InteractionSet::new();
    for (u, dislikes) in planted.iter().enumerate() {
        let preferred = if clustered { rng.random_range(0..spec.clusters) } else { 0 };
        let mut pool: Vec<(u64, f64)> = (0..spec.items as u64)
            .filter(|&i| item_attrs[i as usize].is_disjoint(dislikes))
            .map(|i| {
                let w = if clustered && cluster_of(i) == preferred {
                    spec.cluster_weight
                } else {
                    1.0
                };
                (i, w)
            })
            .collect();
        if pool.len() < spec.interactions_per_user {
            log::warn!(
                "user {u}: only {} likable items for {} requested interactions",
                pool.len(),
                spec.interactions_per_user
            );
        }
        let draws = spec.interactions_per_user.min(pool.len());
        for _ in 0..draws {
            let total: f64 = pool.iter().map(|&(_, w)| w).sum();
            let mut ticket = rng.random_range(0.0..total);
            let mut chosen = pool.len() - 1;
            for (idx, &(_, w)) in pool.iter().enumerate() {
                ticket -= w;
                if ticket < 0.0 {
                    chosen = idx;
                    break;
                }
            }
            let (item, _) = pool.swap_remove(chosen);
            interactions.insert(u as u64, item);
        }
    }

    let alignment: BTreeMap<u64, u64> = (0..spec.items as u64).map(|i| (i, i)).collect();
    let planted: Vec<BTreeSet<u64>> =
        planted.into_iter().map(|s| s.into_iter().map(|a| attr_base + a).collect()).collect();

    Ok(SynthData { spec: spec.clone(), interactions, triples, alignment, vocab, planted })
}

impl SynthData {
    /// Write the dataset in raw TSV form plus a `planted.tsv` sidecar
    /// (`user<TAB>attr_entity` per planted dislike) for audits.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)
            .map_err(|e| CerecError::Io { path: dir.to_path_buf(), source: e })?;
        self.interactions.write_tsv(&dir.join("interactions.tsv"))?;
        crate::ckg::write_triples(&dir.join("triples.tsv"), &self.triples, &self.vocab)?;
        crate::ckg::write_alignment(&dir.join("alignment.tsv"), &self.alignment)?;
        self.vocab.write_tsv(&dir.join("relations.tsv"))?;

        let path = dir.join("planted.tsv");
        let mut body = String::new();
        for (u, attrs) in self.planted.iter().enumerate() {
            for a in attrs {
                body.push_str(&format!("{u}\t{a}\n"));
            }
        }
        fs::write(&path, body).map_err(|e| CerecError::Io { path, source: e })?;
        pipeline::write_json(&dir.join("synth_spec.json"), &self.spec)
    }

    /// Assemble directly (no k-core pass: the generator already controls
    /// degree structure) with a per-user split of the given ratios.
    pub fn into_dataset(
        self,
        ratios: (f64, f64, f64),
        seed: u64,
    ) -> Result<(Dataset, Vec<BTreeSet<u32>>)> {
        let (train, valid, test) =
            crate::ckg::split_interactions(&self.interactions, ratios, seed)?;
        let dataset =
            Dataset::assemble(&train, &valid, &test, &self.triples, &self.alignment, self.vocab)?;
        let planted_dense: Vec<BTreeSet<u32>> = self
            .planted
            .iter()
            .map(|attrs| {
                attrs
                    .iter()
                    .filter_map(|&raw| dataset.ckg.attr_by_raw(raw))
                    .collect()
            })
            .collect();
        Ok((dataset, planted_dense))
    }
}

/// Convenience wrapper used by tests and the acceptance suite.
pub fn planted_dataset(
    spec: &SynthSpec,
    seed: u64,
) -> Result<(Dataset, Vec<BTreeSet<u32>>)> {
    generate(spec, seed)?.into_dataset((0.6, 0.2, 0.2), seed)
}
