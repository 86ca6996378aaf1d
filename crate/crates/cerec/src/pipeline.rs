//! Dataset assembly: raw TSV files -> k-core filtering -> triple filtering ->
//! per-user splits -> an immutable [`Dataset`] with dense ids, plus the
//! on-disk layout shared by the CLI commands.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ckg::{
    self, build_ckg, CollabKG, EntityId, EntityKind, InteractionSet, RelationVocab, Triple,
};
use crate::error::{CerecError, Result};

/// File names used inside a preprocessed data directory.
pub mod files {
    pub const INTERACTIONS: &str = "interactions.tsv";
    pub const TRAIN: &str = "train.tsv";
    pub const VALID: &str = "valid.tsv";
    pub const TEST: &str = "test.tsv";
    pub const TRIPLES: &str = "triples.tsv";
    pub const ALIGNMENT: &str = "alignment.tsv";
    pub const RELATIONS: &str = "relations.tsv";
    pub const STATS: &str = "stats.json";
}

/// A fully assembled dataset: the graph is built from train interactions
/// only, while valid/test pairs are kept aside in dense id space.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub ckg: CollabKG,
    pub vocab: RelationVocab,
    pub train: Vec<(u32, u32)>,
    pub valid: Vec<(u32, u32)>,
    pub test: Vec<(u32, u32)>,
    /// Per user: the train items, used for negative masking and for
    /// excluding train positives from evaluation lists.
    pub observed: Vec<HashSet<u32>>,
}

impl Dataset {
    /// Assemble from already preprocessed pieces. Every user must appear in
    /// train (per-user splitting guarantees this) and every item in the
    /// alignment.
    pub fn assemble(
        train: &InteractionSet,
        valid: &InteractionSet,
        test: &InteractionSet,
        triples: &[Triple],
        alignment: &BTreeMap<u64, u64>,
        vocab: RelationVocab,
    ) -> Result<Dataset> {
        let ckg = build_ckg(train, triples, alignment)?;
        let to_dense = |set: &InteractionSet, ckg: &CollabKG| -> Result<Vec<(u32, u32)>> {
            set.iter()
                .map(|(u, i)| {
                    let ud = ckg.user_by_raw(u).ok_or_else(|| {
                        CerecError::invalid(format!("user {u} absent from the training graph"))
                    })?;
                    let id = ckg
                        .item_by_raw(i)
                        .ok_or_else(|| CerecError::UnalignedItem { item: i })?;
                    Ok((ud, id))
                })
                .collect()
        };
        let train_d = to_dense(train, &ckg)?;
        let valid_d = to_dense(valid, &ckg)?;
        let test_d = to_dense(test, &ckg)?;

        let mut observed = vec![HashSet::new(); ckg.num_users()];
        for &(u, i) in &train_d {
            observed[u as usize].insert(i);
        }
        Ok(Dataset { ckg, vocab, train: train_d, valid: valid_d, test: test_d, observed })
    }

    /// Load a directory produced by the preprocess command.
    pub fn load_dir(dir: &Path) -> Result<Dataset> {
        let vocab = RelationVocab::read_tsv(&dir.join(files::RELATIONS))?;
        let mut scratch = vocab.clone();
        let triples = ckg::load_triples(&dir.join(files::TRIPLES), &mut scratch)?;
        if scratch.len() != vocab.len() {
            return Err(CerecError::invalid(
                "triples reference relations missing from the relation sidecar",
            ));
        }
        let alignment = ckg::load_alignment(&dir.join(files::ALIGNMENT))?;
        let (train, _) = ckg::load_interactions(&dir.join(files::TRAIN))?;
        let (valid, _) = ckg::load_interactions(&dir.join(files::VALID))?;
        let (test, _) = ckg::load_interactions(&dir.join(files::TEST))?;
        Dataset::assemble(&train, &valid, &test, &triples, &alignment, vocab)
    }

    /// Relevant items per user for a split, in dense id space.
    pub fn relevant_by_user(&self, split: &[(u32, u32)]) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.ckg.num_users()];
        for &(u, i) in split {
            out[u as usize].push(i);
        }
        for v in &mut out {
            v.sort_unstable();
            v.dedup();
        }
        out
    }

    /// Dense attribute indices of one item.
    pub fn item_attributes(&self, item: u32) -> Vec<u32> {
        self.ckg
            .neighbors(EntityId::item(item), EntityKind::Attribute)
            .map(|ns| ns.iter().map(|e| e.index).collect())
            .unwrap_or_default()
    }
}

/// Summary emitted by the preprocess command; density is
/// `interactions / (users * items)` reported as a percentage.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub density_percent: String,
    pub kg_entities: usize,
    pub kg_relations: usize,
    pub kg_triples: usize,
    pub duplicates_dropped: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

pub fn density_percent(interactions: usize, users: usize, items: usize) -> f64 {
    if users == 0 || items == 0 {
        return 0.0;
    }
    interactions as f64 / (users as f64 * items as f64) * 100.0
}

/// Three-decimal percentage string, e.g. `0.268%`.
pub fn format_density(interactions: usize, users: usize, items: usize) -> String {
    format!("{:.3}%", density_percent(interactions, users, items))
}

/// Options for [`preprocess`].
#[derive(Clone, Debug)]
pub struct PreprocessOptions {
    pub k_core: usize,
    pub entity_min: usize,
    pub relation_min: usize,
    pub ratios: (f64, f64, f64),
    pub seed: u64,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            k_core: 10,
            entity_min: 10,
            relation_min: 50,
            ratios: (0.6, 0.2, 0.2),
            seed: 0,
        }
    }
}

/// Outputs of in-memory preprocessing, ready to be written or assembled.
pub struct Preprocessed {
    pub interactions: InteractionSet,
    pub train: InteractionSet,
    pub valid: InteractionSet,
    pub test: InteractionSet,
    pub triples: Vec<Triple>,
    pub alignment: BTreeMap<u64, u64>,
    pub vocab: RelationVocab,
    pub stats: PreprocessStats,
}

/// Apply the k-core filter to interactions, restrict the alignment to the
/// surviving items, drop triples touching entities of dropped items, and
/// filter infrequent relations/attribute entities to a fixed point, then
/// split per user.
pub fn preprocess(
    interactions: InteractionSet,
    duplicates: usize,
    triples: Vec<Triple>,
    alignment: BTreeMap<u64, u64>,
    vocab: RelationVocab,
    opts: &PreprocessOptions,
) -> Result<Preprocessed> {
    for (_, item) in interactions.iter() {
        if !alignment.contains_key(&item) {
            return Err(CerecError::UnalignedItem { item });
        }
    }

    let original_item_entities: HashSet<u64> = alignment.values().copied().collect();

    let cored = ckg::apply_k_core(&interactions, opts.k_core);
    let surviving_items = cored.items();
    let alignment: BTreeMap<u64, u64> = alignment
        .into_iter()
        .filter(|(item, _)| surviving_items.contains(item))
        .collect();
    let item_entities: HashSet<u64> = alignment.values().copied().collect();

    // Entities aligned to items dropped by the k-core filter must not
    // degrade into attributes, so triples touching them go too.
    let triples: Vec<Triple> = triples
        .into_iter()
        .filter(|t| {
            [t.head, t.tail].iter().all(|e| {
                item_entities.contains(e) || !original_item_entities.contains(e)
            })
        })
        .collect();
    let triples = ckg::filter_infrequent(&triples, &item_entities, opts.entity_min, opts.relation_min);

    let (train, valid, test) = ckg::split_interactions(&cored, opts.ratios, opts.seed)?;

    let users = cored.users().len();
    let items = cored.items().len();
    let mut entity_set: HashSet<u64> = triples.iter().flat_map(|t| [t.head, t.tail]).collect();
    entity_set.extend(item_entities.iter());
    let relations_used: HashSet<u32> = triples.iter().map(|t| t.relation).collect();

    let stats = PreprocessStats {
        users,
        items,
        interactions: cored.len(),
        density_percent: format_density(cored.len(), users, items),
        kg_entities: entity_set.len(),
        kg_relations: relations_used.len(),
        kg_triples: triples.len(),
        duplicates_dropped: duplicates,
        train: train.len(),
        valid: valid.len(),
        test: test.len(),
    };

    Ok(Preprocessed { interactions: cored, train, valid, test, triples, alignment, vocab, stats })
}

impl Preprocessed {
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CerecError::Io { path: dir.to_path_buf(), source: e })?;
        self.interactions.write_tsv(&dir.join(files::INTERACTIONS))?;
        self.train.write_tsv(&dir.join(files::TRAIN))?;
        self.valid.write_tsv(&dir.join(files::VALID))?;
        self.test.write_tsv(&dir.join(files::TEST))?;
        ckg::write_triples(&dir.join(files::TRIPLES), &self.triples, &self.vocab)?;
        ckg::write_alignment(&dir.join(files::ALIGNMENT), &self.alignment)?;
        self.vocab.write_tsv(&dir.join(files::RELATIONS))?;
        write_json(&dir.join(files::STATS), &self.stats)
    }

    pub fn into_dataset(self) -> Result<Dataset> {
        Dataset::assemble(
            &self.train,
            &self.valid,
            &self.test,
            &self.triples,
            &self.alignment,
            self.vocab,
        )
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| CerecError::invalid(format!("serialize {}: {e}", path.display())))?;
    fs::write(path, body + "\n").map_err(|e| CerecError::Io { path: path.to_path_buf(), source: e })
}

/// SHA-256 content hash of a file, as lowercase hex.
pub fn content_hash(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path).map_err(|e| CerecError::Io { path: path.to_path_buf(), source: e })?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Run manifest written next to every command's outputs: the effective
/// configuration echo plus content hashes of the consumed inputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            input_hashes: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        self.input_hashes
            .insert(path.display().to_string(), content_hash(path)?);
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("manifest.json"), self)
    }
}

/// Resolve a raw (user, item) pair against the graph.
pub fn dense_pair(ckg: &CollabKG, user_raw: u64, item_raw: u64) -> Result<(u32, u32)> {
    let u = ckg
        .user_by_raw(user_raw)
        .ok_or_else(|| CerecError::invalid(format!("unknown user id {user_raw}")))?;
    let i = ckg
        .item_by_raw(item_raw)
        .ok_or_else(|| CerecError::UnalignedItem { item: item_raw })?;
    Ok((u, i))
}

/// Output paths for a training run directory.
pub struct TrainPaths {
    pub dir: PathBuf,
}

impl TrainPaths {
    pub fn new(dir: &Path) -> Self {
        TrainPaths { dir: dir.to_path_buf() }
    }

    pub fn factors(&self) -> PathBuf {
        self.dir.join("factors.tsv")
    }

    pub fn policy(&self) -> PathBuf {
        self.dir.join("policy.tsv")
    }

    pub fn state(&self) -> PathBuf {
        self.dir.join("train_state.json")
    }

    pub fn epoch_log(&self) -> PathBuf {
        self.dir.join("epochs.jsonl")
    }

    pub fn reward_curve(&self) -> PathBuf {
        self.dir.join("reward_curve.tsv")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_formula_matches_published_counts() {
        assert_eq!(format_density(3_034_796, 23_566, 48_123), "0.268%");
        assert_eq!(format_density(0, 10, 10), "0.000%");
    }

    #[test]
    fn assemble_builds_dense_splits() {
        let train = InteractionSet::from_pairs([(1, 10), (1, 11), (2, 10)]);
        let valid = InteractionSet::from_pairs([(1, 12)]);
        let test = InteractionSet::from_pairs([(2, 12)]);
        let alignment: BTreeMap<u64, u64> = [(10, 10), (11, 11), (12, 12)].into();
        let ds =
            Dataset::assemble(&train, &valid, &test, &[], &alignment, RelationVocab::new())
                .unwrap();
        assert_eq!(ds.train.len(), 3);
        assert_eq!(ds.valid, vec![(0, 2)]);
        assert_eq!(ds.test, vec![(1, 2)]);
        assert_eq!(ds.observed[0], HashSet::from([0, 1]));
        // Item 12 exists in the graph even with no train edges.
        assert_eq!(ds.ckg.num_items(), 3);
    }

    #[test]
    fn assemble_rejects_unknown_eval_user() {
        let train = InteractionSet::from_pairs([(1, 10)]);
        let valid = InteractionSet::from_pairs([(9, 10)]);
        let alignment: BTreeMap<u64, u64> = [(10, 10)].into();
        let err = Dataset::assemble(
            &train,
            &valid,
            &InteractionSet::new(),
            &[],
            &alignment,
            RelationVocab::new(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn preprocess_round_trips_through_directory() {
        let mut interactions = InteractionSet::new();
        for u in 0..6u64 {
            for i in 0..6u64 {
                interactions.insert(u, i);
            }
        }
        let alignment: BTreeMap<u64, u64> = (0..6).map(|i| (i, i)).collect();
        let mut vocab = RelationVocab::new();
        let rel = vocab.intern("has_attr");
        let mut triples = Vec::new();
        for i in 0..6u64 {
            for a in 0..2u64 {
                triples.push(Triple { head: i, relation: rel, tail: 100 + a });
            }
        }
        let opts = PreprocessOptions {
            k_core: 2,
            entity_min: 2,
            relation_min: 2,
            ratios: (0.6, 0.2, 0.2),
            seed: 5,
        };
        let pre = preprocess(interactions, 0, triples, alignment, vocab, &opts).unwrap();
        assert_eq!(pre.stats.users, 6);
        assert_eq!(pre.stats.items, 6);
        assert_eq!(pre.stats.kg_triples, 12);

        let dir = tempfile::tempdir().unwrap();
        pre.write_dir(dir.path()).unwrap();
        let ds = Dataset::load_dir(dir.path()).unwrap();
        assert_eq!(ds.ckg.num_users(), 6);
        assert_eq!(ds.ckg.num_items(), 6);
        assert_eq!(ds.ckg.num_attributes(), 2);
        assert_eq!(ds.train.len() + ds.valid.len() + ds.test.len(), 36);
    }

    #[test]
    fn preprocess_rerun_is_byte_identical() {
        let mut interactions = InteractionSet::new();
        for u in 0..5u64 {
            for i in 0..5u64 {
                interactions.insert(u, i * 7);
            }
        }
        let alignment: BTreeMap<u64, u64> = (0..5).map(|i| (i * 7, 50 + i)).collect();
        let vocab = RelationVocab::new();
        let opts = PreprocessOptions {
            k_core: 2,
            entity_min: 1,
            relation_min: 1,
            ratios: (0.6, 0.2, 0.2),
            seed: 9,
        };
        let write = |dir: &Path| {
            let pre = preprocess(
                interactions.clone(),
                0,
                Vec::new(),
                alignment.clone(),
                vocab.clone(),
                &opts,
            )
            .unwrap();
            pre.write_dir(dir).unwrap();
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write(a.path());
        write(b.path());
        for name in [files::TRAIN, files::VALID, files::TEST, files::STATS, files::ALIGNMENT] {
            let fa = fs::read(a.path().join(name)).unwrap();
            let fb = fs::read(b.path().join(name)).unwrap();
            assert_eq!(fa, fb, "{name}");
        }
    }

    #[test]
    fn stats_with_empty_triples_report_zero() {
        let interactions = InteractionSet::from_pairs([(0, 0), (0, 1), (1, 0), (1, 1)]);
        let alignment: BTreeMap<u64, u64> = [(0, 0), (1, 1)].into();
        let opts = PreprocessOptions {
            k_core: 2,
            entity_min: 1,
            relation_min: 1,
            ratios: (0.6, 0.2, 0.2),
            seed: 1,
        };
        let pre =
            preprocess(interactions, 0, Vec::new(), alignment, RelationVocab::new(), &opts)
                .unwrap();
        assert_eq!(pre.stats.kg_triples, 0);
    }
}
