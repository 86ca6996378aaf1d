//! Attribute-difference explanations: the attributes the counterfactual item
//! carries that the original item does not, rendered through a fixed
//! sentence template and emitted as line-delimited JSON.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::agent::{self, EpisodeCtx};
use crate::ckg::{CollabKG, EntityId, EntityKind};
use crate::error::{CerecError, Result};

/// One emitted explanation. Ids are dense; the JSON form carries raw ids
/// and resolved names alongside the rendered sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplanationRecord {
    pub user: u32,
    pub item: u32,
    pub counterfactual_item: u32,
    /// Dense attribute indices: exactly `attrs(j) \ attrs(i)`, non-empty.
    pub delta: BTreeSet<u32>,
    pub rendered: String,
}

/// Serialized form of an explanation record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExplanationJson {
    pub user: u64,
    pub item: u64,
    pub counterfactual_item: u64,
    pub delta_ids: Vec<u64>,
    pub delta_names: Vec<String>,
    pub text: String,
    pub delta_size: usize,
}

/// Optional display names keyed by raw graph-entity id; anything missing
/// falls back to the numeric id.
#[derive(Clone, Debug, Default)]
pub struct NameTable {
    names: HashMap<u64, String>,
}

impl NameTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, entity: u64, name: impl Into<String>) {
        self.names.insert(entity, name.into());
    }

    pub fn resolve(&self, entity: u64) -> String {
        match self.names.get(&entity) {
            Some(name) => name.clone(),
            None => entity.to_string(),
        }
    }

    /// `entity<TAB>name` per line.
    pub fn load_tsv(path: &Path) -> Result<NameTable> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| CerecError::Io { path: path.to_path_buf(), source: e })?;
        let mut table = NameTable::new();
        for (idx, line) in body.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (id, name) = line.split_once('\t').ok_or_else(|| CerecError::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: "expected `entity\\tname`".into(),
            })?;
            let id: u64 = id.trim().parse().map_err(|_| CerecError::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: "bad entity id".into(),
            })?;
            table.insert(id, name);
        }
        Ok(table)
    }
}

/// Attributes of `j` that `i` lacks, as dense attribute indices.
pub fn extract_attributes(ckg: &CollabKG, i: u32, j: u32) -> Result<BTreeSet<u32>> {
    let set_of = |item: u32| -> Result<BTreeSet<u32>> {
        Ok(ckg
            .neighbors(EntityId::item(item), EntityKind::Attribute)?
            .iter()
            .map(|e| e.index)
            .collect())
    };
    let ji = set_of(j)?;
    let ii = set_of(i)?;
    Ok(ji.difference(&ii).copied().collect())
}

/// Render the counterfactual sentence. Attribute names are joined in
/// ascending attribute-id order; missing names fall back to numeric ids.
pub fn render_explanation(
    ckg: &CollabKG,
    i: u32,
    j: u32,
    delta: &BTreeSet<u32>,
    names: &NameTable,
) -> Result<String> {
    if delta.is_empty() {
        return Err(CerecError::invalid("cannot render an empty attribute delta"));
    }
    let attr_names: Vec<String> =
        delta.iter().map(|&a| names.resolve(ckg.attr_raw_id(a))).collect();
    let i_name = names.resolve(ckg.item_entity_id(i));
    let j_name = names.resolve(ckg.item_entity_id(j));
    Ok(format!(
        "Had a minimal set of attributes [{}] been different for item {}, the recommended item would have been {} instead.",
        attr_names.join(", "),
        i_name,
        j_name,
    ))
}

/// Build the JSON form of a record.
pub fn to_json(ckg: &CollabKG, record: &ExplanationRecord, names: &NameTable) -> ExplanationJson {
    let delta_ids: Vec<u64> = record.delta.iter().map(|&a| ckg.attr_raw_id(a)).collect();
    ExplanationJson {
        user: ckg.user_raw_id(record.user),
        item: ckg.item_raw_id(record.item),
        counterfactual_item: ckg.item_raw_id(record.counterfactual_item),
        delta_names: delta_ids.iter().map(|&a| names.resolve(a)).collect(),
        delta_ids,
        text: record.rendered.clone(),
        delta_size: record.delta.len(),
    }
}

pub fn write_jsonl(path: &Path, records: &[ExplanationJson]) -> Result<()> {
    let io = |e| CerecError::Io { path: path.to_path_buf(), source: e };
    let file = File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| CerecError::invalid(format!("serialize explanation: {e}")))?;
        writeln!(w, "{line}").map_err(io)?;
    }
    Ok(())
}

/// Deploy a frozen policy on one positive pair: greedy rollout, then try the
/// trajectory's steps in descending reward order until one yields a
/// non-empty attribute delta. `None` when the episode dead-ends immediately
/// or every candidate shares all attributes with the original item.
pub fn explain_pair(
    ectx: &EpisodeCtx<'_>,
    names: &NameTable,
    u: u32,
    i: u32,
    depth: usize,
    gamma: f64,
) -> Result<Option<ExplanationRecord>> {
    let traj = agent::rollout_greedy(ectx, u, i, depth, gamma)?;
    if traj.is_empty() {
        log::debug!("({u}, {i}): episode dead-ended, no explanation");
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..traj.len()).collect();
    // Stable sort keeps the earliest step first among equal rewards.
    order.sort_by(|&a, &b| traj.steps[b].reward.total_cmp(&traj.steps[a].reward));

    for idx in order {
        let j = traj.steps[idx].action.next_item.index;
        if j == i {
            continue;
        }
        let delta = extract_attributes(ectx.sampler.ckg, i, j)?;
        if delta.is_empty() {
            log::debug!("({u}, {i}): candidate {j} shares all attributes, trying next step");
            continue;
        }
        let rendered = render_explanation(ectx.sampler.ckg, i, j, &delta, names)?;
        return Ok(Some(ExplanationRecord {
            user: u,
            item: i,
            counterfactual_item: j,
            delta,
            rendered,
        }));
    }
    log::debug!("({u}, {i}): no step produced a non-empty delta");
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ckg::{build_ckg, InteractionSet, Triple};
    use std::collections::BTreeMap;

    /// Items: 0 has attrs {p1, p2}, 1 has {p1, p3}, 2 has {p1}.
    fn fixture() -> CollabKG {
        let interactions = InteractionSet::from_pairs([(0, 0)]);
        let alignment: BTreeMap<u64, u64> = [(0, 0), (1, 1), (2, 2)].into();
        let triples = vec![
            Triple { head: 0, relation: 1, tail: 100 },
            Triple { head: 0, relation: 1, tail: 101 },
            Triple { head: 1, relation: 1, tail: 100 },
            Triple { head: 1, relation: 1, tail: 102 },
            Triple { head: 2, relation: 1, tail: 100 },
        ];
        build_ckg(&interactions, &triples, &alignment).unwrap()
    }

    #[test]
    fn extract_is_set_difference() {
        let ckg = fixture();
        // attrs(1) = {100, 102}, attrs(0) = {100, 101} -> delta = {102}.
        let delta = extract_attributes(&ckg, 0, 1).unwrap();
        let attr_102 = ckg.attr_by_raw(102).unwrap();
        assert_eq!(delta, BTreeSet::from([attr_102]));

        // attrs(2) subset attrs(0) -> empty.
        assert!(extract_attributes(&ckg, 0, 2).unwrap().is_empty());
    }

    #[test]
    fn extract_of_item_with_itself_is_empty() {
        let ckg = fixture();
        for i in 0..3u32 {
            assert!(extract_attributes(&ckg, i, i).unwrap().is_empty());
        }
    }

    #[test]
    fn extract_matches_recomputation_from_triples() {
        use rand::Rng;
        let mut rng = crate::util::stream_rng(3, "explain-oracle", 0);
        let alignment: BTreeMap<u64, u64> = (0..8).map(|i| (i, i)).collect();
        let mut triples = Vec::new();
        let mut attr_sets: Vec<BTreeSet<u64>> = vec![BTreeSet::new(); 8];
        for item in 0..8u64 {
            for _ in 0..3 {
                let a = 100 + rng.random_range(0..6);
                if attr_sets[item as usize].insert(a) {
                    triples.push(Triple { head: item, relation: 1, tail: a });
                }
            }
        }
        let interactions = InteractionSet::from_pairs([(0, 0)]);
        let ckg = build_ckg(&interactions, &triples, &alignment).unwrap();
        for i in 0..8u32 {
            for j in 0..8u32 {
                let got: BTreeSet<u64> = extract_attributes(&ckg, i, j)
                    .unwrap()
                    .iter()
                    .map(|&a| ckg.attr_raw_id(a))
                    .collect();
                let want: BTreeSet<u64> = attr_sets[j as usize]
                    .difference(&attr_sets[i as usize])
                    .copied()
                    .collect();
                assert_eq!(got, want, "({i}, {j})");
            }
        }
    }

    #[test]
    fn render_matches_template_with_names() {
        let ckg = fixture();
        let mut names = NameTable::new();
        names.insert(0, "Perfect 10");
        names.insert(1, "Loving you is killing me");
        names.insert(100, "Pop");
        names.insert(101, "Mercury");
        names.insert(102, "Soul");

        let delta = extract_attributes(&ckg, 0, 1).unwrap();
        let text = render_explanation(&ckg, 0, 1, &delta, &names).unwrap();
        assert_eq!(
            text,
            "Had a minimal set of attributes [Soul] been different for item Perfect 10, \
             the recommended item would have been Loving you is killing me instead."
        );
    }

    #[test]
    fn render_joins_multiple_attributes_without_trailing_comma() {
        let ckg = fixture();
        let mut names = NameTable::new();
        names.insert(101, "Mercury");
        names.insert(102, "Soul");
        let attr_101 = ckg.attr_by_raw(101).unwrap();
        let attr_102 = ckg.attr_by_raw(102).unwrap();
        let delta: BTreeSet<u32> = [attr_101, attr_102].into();
        let text = render_explanation(&ckg, 0, 1, &delta, &names).unwrap();
        assert!(text.contains("[Mercury, Soul]"), "{text}");
        assert!(!text.contains(",]"), "{text}");

        let single: BTreeSet<u32> = [attr_102].into();
        let text = render_explanation(&ckg, 0, 1, &single, &names).unwrap();
        assert!(text.contains("[Soul]"), "{text}");
    }

    #[test]
    fn render_falls_back_to_numeric_ids() {
        let ckg = fixture();
        let delta = extract_attributes(&ckg, 0, 1).unwrap();
        let text = render_explanation(&ckg, 0, 1, &delta, &NameTable::new()).unwrap();
        assert!(text.contains("[102]"), "{text}");
        assert!(text.contains("item 0"), "{text}");
        assert!(text.contains("been 1 instead"), "{text}");
    }

    #[test]
    fn render_rejects_empty_delta() {
        let ckg = fixture();
        assert!(render_explanation(&ckg, 0, 1, &BTreeSet::new(), &NameTable::new()).is_err());
    }

    #[test]
    fn explain_pair_skips_empty_delta_and_tries_next_step() {
        use crate::agent::EpisodeCtx;
        use crate::glm;
        use crate::recommender::LatentFactors;
        use crate::sampler::SamplerCtx;
        use std::collections::HashSet;

        // Item 3 duplicates item 0's attributes exactly; item 4 adds one.
        // Force the first greedy hop onto the shared attribute chain and
        // verify the empty-delta candidate is passed over.
        let interactions = InteractionSet::from_pairs([(0, 0)]);
        let alignment: BTreeMap<u64, u64> = (0..5).map(|i| (i, i)).collect();
        let triples = vec![
            Triple { head: 0, relation: 1, tail: 100 },
            Triple { head: 0, relation: 1, tail: 101 },
            Triple { head: 3, relation: 1, tail: 100 },
            Triple { head: 3, relation: 1, tail: 101 },
            Triple { head: 4, relation: 1, tail: 100 },
            Triple { head: 4, relation: 1, tail: 102 },
        ];
        let ckg = build_ckg(&interactions, &triples, &alignment).unwrap();
        let params = glm::init_params_with_scale(&ckg, &[2, 2], 13, 0.5).unwrap();
        let cache = glm::forward_cached(&ckg, &params).unwrap();
        let factors = LatentFactors::init(1, 5, 2, 3);
        let list = factors.top_k(0, 2, &HashSet::new()).unwrap();
        let mask = list.item_set();
        let ectx = EpisodeCtx {
            sampler: SamplerCtx::new(&ckg, &cache.output, 0.01),
            factors: &factors,
            rec_list: &list,
            mask: &mask,
        };
        // Depth 2 gives a fallback step when the best-reward step has an
        // empty delta.
        let record = explain_pair(&ectx, &NameTable::new(), 0, 0, 2, 0.95).unwrap();
        if let Some(rec) = record {
            assert!(!rec.delta.is_empty());
            assert_ne!(rec.counterfactual_item, 0);
            let recomputed =
                extract_attributes(&ckg, 0, rec.counterfactual_item).unwrap();
            assert_eq!(rec.delta, recomputed);
        }
    }

    #[test]
    fn rendering_round_trips_to_ids() {
        // With the identity name table the sentence is parseable back into
        // (delta, i, j).
        let ckg = fixture();
        let names = NameTable::new();
        let delta = extract_attributes(&ckg, 0, 1).unwrap();
        let text = render_explanation(&ckg, 0, 1, &delta, &names).unwrap();

        let open = text.find('[').unwrap();
        let close = text.find(']').unwrap();
        let parsed_delta: BTreeSet<u64> = text[open + 1..close]
            .split(", ")
            .map(|s| s.parse().unwrap())
            .collect();
        let rest = &text[close + 1..];
        let i_id: u64 = rest
            .split("for item ")
            .nth(1)
            .unwrap()
            .split(',')
            .next()
            .unwrap()
            .parse()
            .unwrap();
        let j_id: u64 = rest
            .split("would have been ")
            .nth(1)
            .unwrap()
            .split(" instead")
            .next()
            .unwrap()
            .parse()
            .unwrap();
        let want_delta: BTreeSet<u64> =
            delta.iter().map(|&a| ckg.attr_raw_id(a)).collect();
        assert_eq!(parsed_delta, want_delta);
        assert_eq!(i_id, ckg.item_entity_id(0));
        assert_eq!(j_id, ckg.item_entity_id(1));
    }
}
