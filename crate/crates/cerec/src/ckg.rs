//! Collaborative knowledge graph: loading, filtering, splitting, and typed
//! neighbor queries.
//!
//! Raw inputs are plain TSV files with decimal integer ids. Users live in
//! their own id space; items have both an interaction-side id and an aligned
//! graph-entity id (the alignment file maps one to the other); attributes are
//! all remaining graph entities referenced by triples. After [`build_ckg`]
//! every entity gets a dense per-kind index and the graph is immutable.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{CerecError, Result};
use crate::util;

/// Entity kind within the collaborative knowledge graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityKind {
    User,
    Item,
    Attribute,
}

impl EntityKind {
    fn tag(self) -> &'static str {
        match self {
            EntityKind::User => "u",
            EntityKind::Item => "i",
            EntityKind::Attribute => "a",
        }
    }
}

/// Dense per-kind entity handle. Indices are assigned at build time and are
/// stable for the lifetime of the graph.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityId {
    pub kind: EntityKind,
    pub index: u32,
}

impl EntityId {
    pub fn user(index: u32) -> Self {
        EntityId { kind: EntityKind::User, index }
    }

    pub fn item(index: u32) -> Self {
        EntityId { kind: EntityKind::Item, index }
    }

    pub fn attribute(index: u32) -> Self {
        EntityId { kind: EntityKind::Attribute, index }
    }
}

impl fmt::Debug for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.kind.tag(), self.index)
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.kind.tag(), self.index)
    }
}

/// Interned relation vocabulary. Id 0 is reserved for the user-item
/// interaction edge; ids for named relations are assigned in first-seen
/// order while loading triples.
#[derive(Clone, Debug)]
pub struct RelationVocab {
    names: Vec<String>,
    by_name: HashMap<String, u32>,
}

/// Reserved relation id for user-item interaction edges.
pub const INTERACT_RELATION: u32 = 0;

impl Default for RelationVocab {
    fn default() -> Self {
        Self::new()
    }
}

impl RelationVocab {
    pub fn new() -> Self {
        let mut vocab = RelationVocab { names: Vec::new(), by_name: HashMap::new() };
        vocab.intern("interacts");
        vocab
    }

    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.by_name.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(|s| s.as_str())
    }

    /// Number of interned relations, including the reserved interaction id.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Sidecar format: one `id\tname` line per relation.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        let mut w = BufWriter::new(file);
        for (id, name) in self.names.iter().enumerate() {
            writeln!(w, "{id}\t{name}").map_err(|e| io_err(path, e))?;
        }
        Ok(())
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let mut vocab = RelationVocab { names: Vec::new(), by_name: HashMap::new() };
        for (lineno, line) in read_lines(path)?.into_iter().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let id: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| parse_err(path, lineno + 1, "expected integer relation id"))?;
            let name = parts
                .next()
                .ok_or_else(|| parse_err(path, lineno + 1, "expected `id\\tname`"))?;
            if id != vocab.names.len() {
                return Err(parse_err(path, lineno + 1, "relation ids must be dense and in order"));
            }
            vocab.by_name.insert(name.to_string(), id as u32);
            vocab.names.push(name.to_string());
        }
        Ok(vocab)
    }
}

/// A knowledge triple over raw graph-entity ids with an interned relation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triple {
    pub head: u64,
    pub relation: u32,
    pub tail: u64,
}

/// Deduplicated set of (user, item) interaction pairs in raw id space.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InteractionSet {
    pairs: BTreeSet<(u64, u64)>,
}

impl InteractionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (u64, u64)>) -> Self {
        InteractionSet { pairs: pairs.into_iter().collect() }
    }

    pub fn insert(&mut self, user: u64, item: u64) -> bool {
        self.pairs.insert((user, item))
    }

    pub fn contains(&self, user: u64, item: u64) -> bool {
        self.pairs.contains(&(user, item))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pairs in ascending (user, item) order.
    pub fn iter(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.pairs.iter().copied()
    }

    pub fn users(&self) -> BTreeSet<u64> {
        self.pairs.iter().map(|&(u, _)| u).collect()
    }

    pub fn items(&self) -> BTreeSet<u64> {
        self.pairs.iter().map(|&(_, i)| i).collect()
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        let mut w = BufWriter::new(file);
        for (u, i) in self.iter() {
            writeln!(w, "{u}\t{i}").map_err(|e| io_err(path, e))?;
        }
        Ok(())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CerecError {
    CerecError::Io { path: path.to_path_buf(), source: e }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> CerecError {
    CerecError::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    BufReader::new(file)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| io_err(path, e))
}

fn parse_u64(path: &Path, lineno: usize, field: &str, what: &str) -> Result<u64> {
    field
        .trim()
        .parse::<u64>()
        .map_err(|_| parse_err(path, lineno, format!("expected non-negative integer {what}, got {field:?}")))
}

/// Parse a triples file: `head\trelation\ttail` per non-empty line, with
/// relation names interned into `vocab` in first-seen order.
pub fn load_triples(path: &Path, vocab: &mut RelationVocab) -> Result<Vec<Triple>> {
    let mut triples = Vec::new();
    for (idx, line) in read_lines(path)?.into_iter().enumerate() {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected 3 tab-separated fields, got {}", fields.len()),
            ));
        }
        let head = parse_u64(path, lineno, fields[0], "head entity")?;
        let tail = parse_u64(path, lineno, fields[2], "tail entity")?;
        if head == tail {
            return Err(parse_err(path, lineno, "self-loop triple (head == tail)"));
        }
        let relation = vocab.intern(fields[1].trim());
        triples.push(Triple { head, relation, tail });
    }
    Ok(triples)
}

/// Write triples back out with relation names resolved through the vocab.
pub fn write_triples(path: &Path, triples: &[Triple], vocab: &RelationVocab) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for t in triples {
        let name = vocab
            .name(t.relation)
            .ok_or_else(|| CerecError::invalid(format!("relation id {} not in vocab", t.relation)))?;
        writeln!(w, "{}\t{}\t{}", t.head, name, t.tail).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

/// Parse an interactions file: `user\titem` per non-empty line. Duplicate
/// pairs collapse; the duplicate count is returned for logging.
pub fn load_interactions(path: &Path) -> Result<(InteractionSet, usize)> {
    let mut set = InteractionSet::new();
    let mut duplicates = 0usize;
    for (idx, line) in read_lines(path)?.into_iter().enumerate() {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected 2 tab-separated fields, got {}", fields.len()),
            ));
        }
        let user = parse_u64(path, lineno, fields[0], "user id")?;
        let item = parse_u64(path, lineno, fields[1], "item id")?;
        if !set.insert(user, item) {
            duplicates += 1;
        }
    }
    Ok((set, duplicates))
}

/// Parse an alignment file: `item\tentity` per non-empty line. Duplicate
/// item keys are an error (the alignment must be a function).
pub fn load_alignment(path: &Path) -> Result<BTreeMap<u64, u64>> {
    let mut map = BTreeMap::new();
    for (idx, line) in read_lines(path)?.into_iter().enumerate() {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected 2 tab-separated fields, got {}", fields.len()),
            ));
        }
        let item = parse_u64(path, lineno, fields[0], "item id")?;
        let entity = parse_u64(path, lineno, fields[1], "entity id")?;
        if map.insert(item, entity).is_some() {
            return Err(parse_err(path, lineno, format!("duplicate alignment for item {item}")));
        }
    }
    Ok(map)
}

pub fn write_alignment(path: &Path, alignment: &BTreeMap<u64, u64>) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for (item, entity) in alignment {
        writeln!(w, "{item}\t{entity}").map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

/// Iteratively remove users and items with fewer than `k` interactions until
/// a fixed point: every surviving user and item has at least `k`.
pub fn apply_k_core(interactions: &InteractionSet, k: usize) -> InteractionSet {
    assert!(k >= 1, "k-core threshold must be >= 1");
    let mut pairs: Vec<(u64, u64)> = interactions.iter().collect();
    loop {
        let mut user_deg: HashMap<u64, usize> = HashMap::new();
        let mut item_deg: HashMap<u64, usize> = HashMap::new();
        for &(u, i) in &pairs {
            *user_deg.entry(u).or_default() += 1;
            *item_deg.entry(i).or_default() += 1;
        }
        let before = pairs.len();
        pairs.retain(|&(u, i)| user_deg[&u] >= k && item_deg[&i] >= k);
        if pairs.len() == before {
            break;
        }
    }
    InteractionSet::from_pairs(pairs)
}

/// Drop triples of relations occurring fewer than `relation_min` times, then
/// triples referencing attribute entities (entities not in `item_entities`)
/// occurring fewer than `entity_min` times; iterate to a fixed point so the
/// result is order-independent.
pub fn filter_infrequent(
    triples: &[Triple],
    item_entities: &HashSet<u64>,
    entity_min: usize,
    relation_min: usize,
) -> Vec<Triple> {
    assert!(entity_min >= 1 && relation_min >= 1, "thresholds must be >= 1");
    let mut kept: Vec<Triple> = triples.to_vec();
    loop {
        let before = kept.len();

        let mut rel_count: HashMap<u32, usize> = HashMap::new();
        for t in &kept {
            *rel_count.entry(t.relation).or_default() += 1;
        }
        kept.retain(|t| rel_count[&t.relation] >= relation_min);

        let mut ent_count: HashMap<u64, usize> = HashMap::new();
        for t in &kept {
            for e in [t.head, t.tail] {
                if !item_entities.contains(&e) {
                    *ent_count.entry(e).or_default() += 1;
                }
            }
        }
        kept.retain(|t| {
            [t.head, t.tail]
                .iter()
                .all(|e| item_entities.contains(e) || ent_count[e] >= entity_min)
        });

        if kept.len() == before {
            return kept;
        }
    }
}

/// Immutable collaborative knowledge graph with dense per-kind entity
/// indices and per-kind sorted adjacency.
#[derive(Clone, Debug)]
pub struct CollabKG {
    user_raw: Vec<u64>,
    item_raw: Vec<u64>,
    attr_raw: Vec<u64>,
    user_index: HashMap<u64, u32>,
    item_index: HashMap<u64, u32>,
    attr_index: HashMap<u64, u32>,
    /// Dense item index -> aligned graph-entity id.
    item_entity: Vec<u64>,
    entity_to_item: HashMap<u64, u32>,
    /// Per global entity index: neighbor lists split by kind
    /// `[users, items, attributes]`, each deduplicated and ascending.
    adj: Vec<[Vec<EntityId>; 3]>,
}

fn kind_slot(kind: EntityKind) -> usize {
    match kind {
        EntityKind::User => 0,
        EntityKind::Item => 1,
        EntityKind::Attribute => 2,
    }
}

impl CollabKG {
    pub fn num_users(&self) -> usize {
        self.user_raw.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_raw.len()
    }

    pub fn num_attributes(&self) -> usize {
        self.attr_raw.len()
    }

    /// Total entity count across all kinds.
    pub fn entity_count(&self) -> usize {
        self.num_users() + self.num_items() + self.num_attributes()
    }

    pub fn contains(&self, e: EntityId) -> bool {
        let n = match e.kind {
            EntityKind::User => self.num_users(),
            EntityKind::Item => self.num_items(),
            EntityKind::Attribute => self.num_attributes(),
        };
        (e.index as usize) < n
    }

    /// Flat index into per-entity tables: users, then items, then attributes.
    pub fn global_index(&self, e: EntityId) -> usize {
        let idx = e.index as usize;
        match e.kind {
            EntityKind::User => idx,
            EntityKind::Item => self.num_users() + idx,
            EntityKind::Attribute => self.num_users() + self.num_items() + idx,
        }
    }

    pub fn entity_at(&self, global: usize) -> EntityId {
        let m = self.num_users();
        let n = self.num_items();
        if global < m {
            EntityId::user(global as u32)
        } else if global < m + n {
            EntityId::item((global - m) as u32)
        } else {
            EntityId::attribute((global - m - n) as u32)
        }
    }

    pub fn user_raw_id(&self, index: u32) -> u64 {
        self.user_raw[index as usize]
    }

    pub fn item_raw_id(&self, index: u32) -> u64 {
        self.item_raw[index as usize]
    }

    pub fn attr_raw_id(&self, index: u32) -> u64 {
        self.attr_raw[index as usize]
    }

    /// Graph-entity id the item is aligned to.
    pub fn item_entity_id(&self, index: u32) -> u64 {
        self.item_entity[index as usize]
    }

    pub fn user_by_raw(&self, raw: u64) -> Option<u32> {
        self.user_index.get(&raw).copied()
    }

    pub fn item_by_raw(&self, raw: u64) -> Option<u32> {
        self.item_index.get(&raw).copied()
    }

    pub fn attr_by_raw(&self, raw: u64) -> Option<u32> {
        self.attr_index.get(&raw).copied()
    }

    /// Kind-filtered neighbor list in ascending index order.
    pub fn neighbors(&self, e: EntityId, kind: EntityKind) -> Result<&[EntityId]> {
        if !self.contains(e) {
            return Err(CerecError::UnknownEntity(e));
        }
        Ok(&self.adj[self.global_index(e)][kind_slot(kind)])
    }

    /// All neighbors regardless of kind (users, then items, then attributes).
    pub fn all_neighbors(&self, e: EntityId) -> impl Iterator<Item = EntityId> + '_ {
        self.adj[self.global_index(e)].iter().flatten().copied()
    }

    /// Total neighbor count across kinds.
    pub fn degree(&self, e: EntityId) -> usize {
        self.adj[self.global_index(e)].iter().map(|v| v.len()).sum()
    }
}

/// Build the immutable graph. Users come from the interaction set, items
/// from the alignment domain, attributes from triple endpoints that are not
/// aligned item entities. User-item edges exist exactly for the given pairs.
pub fn build_ckg(
    interactions: &InteractionSet,
    triples: &[Triple],
    alignment: &BTreeMap<u64, u64>,
) -> Result<CollabKG> {
    for (_, item) in interactions.iter() {
        if !alignment.contains_key(&item) {
            return Err(CerecError::UnalignedItem { item });
        }
    }

    let user_raw: Vec<u64> = interactions.users().into_iter().collect();
    let item_raw: Vec<u64> = alignment.keys().copied().collect();
    let item_entity: Vec<u64> = alignment.values().copied().collect();

    let mut entity_to_item = HashMap::new();
    for (idx, &e) in item_entity.iter().enumerate() {
        if entity_to_item.insert(e, idx as u32).is_some() {
            return Err(CerecError::invalid(format!(
                "alignment is not injective: entity {e} mapped from multiple items"
            )));
        }
    }

    let mut attr_set: BTreeSet<u64> = BTreeSet::new();
    for t in triples {
        for e in [t.head, t.tail] {
            if !entity_to_item.contains_key(&e) {
                attr_set.insert(e);
            }
        }
    }
    let attr_raw: Vec<u64> = attr_set.into_iter().collect();

    let user_index: HashMap<u64, u32> =
        user_raw.iter().enumerate().map(|(i, &r)| (r, i as u32)).collect();
    let item_index: HashMap<u64, u32> =
        item_raw.iter().enumerate().map(|(i, &r)| (r, i as u32)).collect();
    let attr_index: HashMap<u64, u32> =
        attr_raw.iter().enumerate().map(|(i, &r)| (r, i as u32)).collect();

    let total = user_raw.len() + item_raw.len() + attr_raw.len();
    let mut adj: Vec<[BTreeSet<EntityId>; 3]> = vec![Default::default(); total];

    let mut ckg = CollabKG {
        user_raw,
        item_raw,
        attr_raw,
        user_index,
        item_index,
        attr_index,
        item_entity,
        entity_to_item,
        adj: Vec::new(),
    };

    let resolve = |ckg: &CollabKG, raw: u64| -> EntityId {
        match ckg.entity_to_item.get(&raw) {
            Some(&idx) => EntityId::item(idx),
            None => EntityId::attribute(ckg.attr_index[&raw]),
        }
    };

    for (u, i) in interactions.iter() {
        let ue = EntityId::user(ckg.user_index[&u]);
        let ie = EntityId::item(ckg.item_index[&i]);
        adj[ckg.global_index(ue)][kind_slot(EntityKind::Item)].insert(ie);
        adj[ckg.global_index(ie)][kind_slot(EntityKind::User)].insert(ue);
    }

    for t in triples {
        let he = resolve(&ckg, t.head);
        let te = resolve(&ckg, t.tail);
        adj[ckg.global_index(he)][kind_slot(te.kind)].insert(te);
        adj[ckg.global_index(te)][kind_slot(he.kind)].insert(he);
    }

    ckg.adj = adj
        .into_iter()
        .map(|slots| slots.map(|set| set.into_iter().collect()))
        .collect();
    Ok(ckg)
}

/// Per-user stratified random split. Counts per bucket follow the largest
/// remainder of `n * ratio`; users with fewer than 3 interactions put all
/// pairs into train. Deterministic given the seed.
pub fn split_interactions(
    interactions: &InteractionSet,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(InteractionSet, InteractionSet, InteractionSet)> {
    let (rt, rv, rs) = ratios;
    if (rt + rv + rs - 1.0).abs() > 1e-9 || rt < 0.0 || rv < 0.0 || rs < 0.0 {
        return Err(CerecError::invalid(format!(
            "split ratios must be non-negative and sum to 1, got ({rt}, {rv}, {rs})"
        )));
    }

    let mut per_user: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    for (u, i) in interactions.iter() {
        per_user.entry(u).or_default().push(i);
    }

    let mut train = InteractionSet::new();
    let mut valid = InteractionSet::new();
    let mut test = InteractionSet::new();
    let mut forced_train_users = 0usize;

    for (u, mut items) in per_user {
        items.sort_unstable();
        let n = items.len();
        if n < 3 {
            forced_train_users += 1;
            for i in items {
                train.insert(u, i);
            }
            continue;
        }
        let mut rng = util::stream_rng(seed, "split", u);
        items.shuffle(&mut rng);

        let counts = largest_remainder(n, [rt, rv, rs]);
        let (nt, nv) = (counts[0], counts[1]);
        for (pos, i) in items.into_iter().enumerate() {
            if pos < nt {
                train.insert(u, i);
            } else if pos < nt + nv {
                valid.insert(u, i);
            } else {
                test.insert(u, i);
            }
        }
    }

    if forced_train_users > 0 {
        log::info!("{forced_train_users} users with < 3 interactions assigned entirely to train");
    }
    Ok((train, valid, test))
}

/// Integer allocation of `n` slots across buckets by quota floor plus
/// largest fractional remainder; ties go to the earlier bucket.
fn largest_remainder(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: [usize; 3] = [0; 3];
    let mut fracs: Vec<(usize, f64)> = Vec::with_capacity(3);
    let mut assigned = 0usize;
    for (b, q) in quotas.iter().enumerate() {
        counts[b] = q.floor() as usize;
        assigned += counts[b];
        fracs.push((b, q - q.floor()));
    }
    fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (b, _) in fracs.into_iter().take(n - assigned) {
        counts[b] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_triples_parses_and_interns() {
        let f = tmp_file("7\tgenre\t42\n");
        let mut vocab = RelationVocab::new();
        let triples = load_triples(f.path(), &mut vocab).unwrap();
        assert_eq!(triples, vec![Triple { head: 7, relation: 1, tail: 42 }]);
        assert_eq!(vocab.name(1), Some("genre"));
        assert_eq!(vocab.name(INTERACT_RELATION), Some("interacts"));
    }

    #[test]
    fn load_triples_empty_file_is_empty_list() {
        let f = tmp_file("");
        let mut vocab = RelationVocab::new();
        assert!(load_triples(f.path(), &mut vocab).unwrap().is_empty());
    }

    #[test]
    fn load_triples_rejects_wrong_arity() {
        let f = tmp_file("7\tgenre\n");
        let mut vocab = RelationVocab::new();
        let err = load_triples(f.path(), &mut vocab).unwrap_err();
        assert!(err.to_string().contains(":1:"), "{err}");
    }

    #[test]
    fn load_triples_rejects_self_loop() {
        let f = tmp_file("7\tgenre\t7\n");
        let mut vocab = RelationVocab::new();
        assert!(load_triples(f.path(), &mut vocab).is_err());
    }

    #[test]
    fn load_interactions_dedups_and_counts() {
        let f = tmp_file("1\t9\n1\t9\n");
        let (set, dups) = load_interactions(f.path()).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(dups, 1);

        let f = tmp_file("1\t9\n2\t9\n");
        let (set, dups) = load_interactions(f.path()).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(dups, 0);
    }

    #[test]
    fn load_interactions_rejects_non_integer() {
        let f = tmp_file("a\t9\n");
        let err = load_interactions(f.path()).unwrap_err();
        assert!(err.to_string().contains(":1:"), "{err}");
    }

    #[test]
    fn k_core_removes_below_threshold() {
        let set = InteractionSet::from_pairs([(1, 10), (2, 10), (2, 11)]);
        // user 1 has 1 interaction, k=2 removes it; then item 10 drops to
        // degree 1 and goes too, which strands user 2's pair with item 10.
        let core = apply_k_core(&set, 2);
        assert!(!core.users().contains(&1));
        for u in core.users() {
            let deg = core.iter().filter(|&(x, _)| x == u).count();
            assert!(deg >= 2);
        }
    }

    #[test]
    fn k_core_complete_bipartite_is_fixed_point() {
        let mut set = InteractionSet::new();
        for u in 0..3 {
            for i in 0..3 {
                set.insert(u, 100 + i);
            }
        }
        assert_eq!(apply_k_core(&set, 3), set);
    }

    /// Independent recursive-deletion oracle: remove any one offending
    /// endpoint, recurse until clean.
    fn k_core_oracle(set: &InteractionSet, k: usize) -> InteractionSet {
        let mut pairs: BTreeSet<(u64, u64)> = set.iter().collect();
        loop {
            let mut user_deg: HashMap<u64, usize> = HashMap::new();
            let mut item_deg: HashMap<u64, usize> = HashMap::new();
            for &(u, i) in &pairs {
                *user_deg.entry(u).or_default() += 1;
                *item_deg.entry(i).or_default() += 1;
            }
            let offender = user_deg
                .iter()
                .filter(|&(_, &d)| d < k)
                .map(|(&u, _)| (true, u))
                .chain(item_deg.iter().filter(|&(_, &d)| d < k).map(|(&i, _)| (false, i)))
                .min();
            match offender {
                Some((true, u)) => pairs.retain(|&(x, _)| x != u),
                Some((false, i)) => pairs.retain(|&(_, y)| y != i),
                None => return InteractionSet::from_pairs(pairs),
            }
        }
    }

    #[test]
    fn k_core_cascade_matches_recursive_oracle() {
        // Chain-like fixture where one removal cascades.
        let set = InteractionSet::from_pairs([
            (1, 10),
            (1, 11),
            (2, 11),
            (2, 12),
            (3, 12),
            (3, 13),
            (4, 13),
            (4, 10),
            (5, 10),
        ]);
        for k in 1..=3 {
            assert_eq!(apply_k_core(&set, k), k_core_oracle(&set, k), "k={k}");
        }

        // Randomized small fixtures.
        use rand::Rng;
        let mut rng = util::stream_rng(11, "kcore-fixture", 0);
        for trial in 0..30 {
            let mut set = InteractionSet::new();
            for _ in 0..rng.random_range(5..40) {
                set.insert(rng.random_range(0..8), 100 + rng.random_range(0..8));
            }
            for k in 1..=3 {
                assert_eq!(apply_k_core(&set, k), k_core_oracle(&set, k), "trial={trial} k={k}");
            }
        }
    }

    #[test]
    fn k_core_result_degrees_hold() {
        use rand::Rng;
        let mut rng = util::stream_rng(12, "kcore-degrees", 0);
        let mut set = InteractionSet::new();
        for _ in 0..200 {
            set.insert(rng.random_range(0..20), 500 + rng.random_range(0..20));
        }
        let core = apply_k_core(&set, 4);
        for u in core.users() {
            assert!(core.iter().filter(|&(x, _)| x == u).count() >= 4);
        }
        for i in core.items() {
            assert!(core.iter().filter(|&(_, y)| y == i).count() >= 4);
        }
    }

    fn t(head: u64, relation: u32, tail: u64) -> Triple {
        Triple { head, relation, tail }
    }

    #[test]
    fn filter_drops_rare_relation_at_boundary() {
        let mut triples = Vec::new();
        for k in 0..49 {
            triples.push(t(1000 + k, 1, 2000 + k));
        }
        let kept = filter_infrequent(&triples, &HashSet::new(), 1, 50);
        assert!(kept.is_empty());

        triples.push(t(5000, 1, 6000));
        let kept = filter_infrequent(&triples, &HashSet::new(), 1, 50);
        assert_eq!(kept.len(), 50);
    }

    #[test]
    fn filter_is_identity_above_thresholds() {
        let triples: Vec<Triple> = (0..5).map(|k| t(1, 1, 100 + (k % 2))).collect();
        let kept = filter_infrequent(&triples, &HashSet::from([1]), 2, 3);
        assert_eq!(kept, triples);
    }

    /// Fixed-point oracle: alternate single filter passes until stable.
    fn filter_oracle(
        triples: &[Triple],
        items: &HashSet<u64>,
        entity_min: usize,
        relation_min: usize,
    ) -> Vec<Triple> {
        let mut kept = triples.to_vec();
        loop {
            let before = kept.len();
            let mut rel: HashMap<u32, usize> = HashMap::new();
            for t in &kept {
                *rel.entry(t.relation).or_default() += 1;
            }
            kept.retain(|t| rel[&t.relation] >= relation_min);
            let mut ent: HashMap<u64, usize> = HashMap::new();
            for t in &kept {
                for e in [t.head, t.tail] {
                    if !items.contains(&e) {
                        *ent.entry(e).or_default() += 1;
                    }
                }
            }
            kept.retain(|t| {
                [t.head, t.tail].iter().all(|e| items.contains(e) || ent[e] >= entity_min)
            });
            if kept.len() == before {
                return kept;
            }
        }
    }

    #[test]
    fn filter_interacting_thresholds_reach_fixed_point() {
        use rand::Rng;
        let items: HashSet<u64> = (0..5).collect();
        let mut rng = util::stream_rng(13, "filter-fixture", 0);
        for trial in 0..40 {
            let mut triples = Vec::new();
            for _ in 0..rng.random_range(10..80) {
                let head = rng.random_range(0..5);
                let tail = 100 + rng.random_range(0..10);
                triples.push(t(head, rng.random_range(1..4), tail));
            }
            let got = filter_infrequent(&triples, &items, 3, 5);
            let want = filter_oracle(&triples, &items, 3, 5);
            assert_eq!(got, want, "trial={trial}");
            // Fixed point: re-filtering changes nothing.
            assert_eq!(filter_infrequent(&got, &items, 3, 5), got);
        }
    }

    fn small_ckg() -> CollabKG {
        // 2 users, 3 items, 2 attributes. Item raw ids 10..12 align to
        // entities 10..12; attributes are entities 100, 101.
        let interactions = InteractionSet::from_pairs([(1, 10), (1, 11), (2, 11), (2, 12)]);
        let alignment: BTreeMap<u64, u64> = [(10, 10), (11, 11), (12, 12)].into();
        let triples = vec![t(10, 1, 100), t(11, 1, 100), t(11, 1, 101), t(12, 1, 101)];
        build_ckg(&interactions, &triples, &alignment).unwrap()
    }

    #[test]
    fn build_ckg_constructs_expected_adjacency() {
        let ckg = small_ckg();
        assert_eq!(ckg.num_users(), 2);
        assert_eq!(ckg.num_items(), 3);
        assert_eq!(ckg.num_attributes(), 2);

        // Item 11 (index 1): attributes {100, 101} = indices {0, 1}.
        let attrs = ckg.neighbors(EntityId::item(1), EntityKind::Attribute).unwrap();
        assert_eq!(attrs, &[EntityId::attribute(0), EntityId::attribute(1)]);
        // User 1 (index 0): items {10, 11} = indices {0, 1}.
        let items = ckg.neighbors(EntityId::user(0), EntityKind::Item).unwrap();
        assert_eq!(items, &[EntityId::item(0), EntityId::item(1)]);
        // Attribute 101 (index 1): items {11, 12}.
        let back = ckg.neighbors(EntityId::attribute(1), EntityKind::Item).unwrap();
        assert_eq!(back, &[EntityId::item(1), EntityId::item(2)]);
    }

    #[test]
    fn build_ckg_without_triples_has_only_interaction_edges() {
        let interactions = InteractionSet::from_pairs([(1, 10)]);
        let alignment: BTreeMap<u64, u64> = [(10, 50)].into();
        let ckg = build_ckg(&interactions, &[], &alignment).unwrap();
        assert_eq!(ckg.num_attributes(), 0);
        assert_eq!(ckg.degree(EntityId::item(0)), 1);
        assert_eq!(
            ckg.neighbors(EntityId::item(0), EntityKind::User).unwrap(),
            &[EntityId::user(0)]
        );
    }

    #[test]
    fn build_ckg_rejects_unaligned_item() {
        let interactions = InteractionSet::from_pairs([(1, 10), (1, 99)]);
        let alignment: BTreeMap<u64, u64> = [(10, 50)].into();
        let err = build_ckg(&interactions, &[], &alignment).unwrap_err();
        assert!(err.to_string().contains("99"), "{err}");
    }

    #[test]
    fn neighbors_unknown_entity_errors() {
        let ckg = small_ckg();
        assert!(ckg.neighbors(EntityId::user(5), EntityKind::Item).is_err());
    }

    #[test]
    fn neighbors_match_recomputation_from_raw_triples() {
        use rand::Rng;
        let mut rng = util::stream_rng(14, "nbr-fixture", 0);
        let alignment: BTreeMap<u64, u64> = (0..6).map(|i| (i, i)).collect();
        let mut interactions = InteractionSet::new();
        for _ in 0..12 {
            interactions.insert(rng.random_range(0..4), rng.random_range(0..6));
        }
        let mut triples = Vec::new();
        for _ in 0..20 {
            let head = rng.random_range(0..6);
            let tail = 100 + rng.random_range(0..5);
            triples.push(t(head, 1, tail));
        }
        let ckg = build_ckg(&interactions, &triples, &alignment).unwrap();

        for item_idx in 0..ckg.num_items() as u32 {
            let raw_entity = ckg.item_entity_id(item_idx);
            let mut want: BTreeSet<u64> = BTreeSet::new();
            for tr in &triples {
                if tr.head == raw_entity {
                    want.insert(tr.tail);
                } else if tr.tail == raw_entity {
                    want.insert(tr.head);
                }
            }
            let got: BTreeSet<u64> = ckg
                .neighbors(EntityId::item(item_idx), EntityKind::Attribute)
                .unwrap()
                .iter()
                .map(|a| ckg.attr_raw_id(a.index))
                .collect();
            assert_eq!(got, want, "item {item_idx}");
        }
    }

    #[test]
    fn typed_adjacency_is_involutive() {
        let ckg = small_ckg();
        for item_idx in 0..ckg.num_items() as u32 {
            let i = EntityId::item(item_idx);
            for &p in ckg.neighbors(i, EntityKind::Attribute).unwrap() {
                assert!(ckg.neighbors(p, EntityKind::Item).unwrap().contains(&i));
            }
        }
        for attr_idx in 0..ckg.num_attributes() as u32 {
            let p = EntityId::attribute(attr_idx);
            for &i in ckg.neighbors(p, EntityKind::Item).unwrap() {
                assert!(ckg.neighbors(i, EntityKind::Attribute).unwrap().contains(&p));
            }
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = small_ckg();
        let b = small_ckg();
        assert_eq!(a.adj, b.adj);
        assert_eq!(a.user_raw, b.user_raw);
    }

    #[test]
    fn split_exact_for_ten_interactions() {
        let set = InteractionSet::from_pairs((0..10).map(|i| (1u64, i)));
        let (train, valid, test) = split_interactions(&set, (0.6, 0.2, 0.2), 7).unwrap();
        assert_eq!((train.len(), valid.len(), test.len()), (6, 2, 2));
    }

    #[test]
    fn split_is_deterministic() {
        let mut set = InteractionSet::new();
        for u in 0..5 {
            for i in 0..7 {
                set.insert(u, i * 3);
            }
        }
        let a = split_interactions(&set, (0.6, 0.2, 0.2), 99).unwrap();
        let b = split_interactions(&set, (0.6, 0.2, 0.2), 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_small_users_go_to_train() {
        let set = InteractionSet::from_pairs([(1, 5), (1, 6)]);
        let (train, valid, test) = split_interactions(&set, (0.6, 0.2, 0.2), 3).unwrap();
        assert_eq!(train.len(), 2);
        assert!(valid.is_empty() && test.is_empty());
    }

    #[test]
    fn split_partitions_and_counts_match_ratios() {
        use rand::Rng;
        let mut rng = util::stream_rng(15, "split-fixture", 0);
        let mut set = InteractionSet::new();
        while set.len() < 1000 {
            set.insert(rng.random_range(0..40), rng.random_range(0..200));
        }
        let (train, valid, test) = split_interactions(&set, (0.6, 0.2, 0.2), 21).unwrap();

        // Disjoint and covering.
        assert_eq!(train.len() + valid.len() + test.len(), set.len());
        for (u, i) in set.iter() {
            let hits = [train.contains(u, i), valid.contains(u, i), test.contains(u, i)]
                .iter()
                .filter(|&&x| x)
                .count();
            assert_eq!(hits, 1);
        }

        // Per-user counting oracle: each bucket within +-1 of its quota.
        for u in set.users() {
            let n = set.iter().filter(|&(x, _)| x == u).count() as f64;
            for (bucket, ratio) in
                [(&train, 0.6), (&valid, 0.2), (&test, 0.2)]
            {
                let got = bucket.iter().filter(|&(x, _)| x == u).count() as f64;
                assert!(
                    (got - ratio * n).abs() <= 1.0 + 1e-9,
                    "user {u}: got {got}, quota {}",
                    ratio * n
                );
            }
        }
    }

    #[test]
    fn largest_remainder_allocates_all() {
        for n in 0..50 {
            let c = largest_remainder(n, [0.6, 0.2, 0.2]);
            assert_eq!(c[0] + c[1] + c[2], n);
        }
        assert_eq!(largest_remainder(10, [0.6, 0.2, 0.2]), [6, 2, 2]);
        assert_eq!(largest_remainder(3, [0.6, 0.2, 0.2]), [2, 1, 0]);
    }

    #[test]
    fn vocab_round_trips_through_sidecar() {
        let mut vocab = RelationVocab::new();
        vocab.intern("genre");
        vocab.intern("artist");
        let f = tempfile::NamedTempFile::new().unwrap();
        vocab.write_tsv(f.path()).unwrap();
        let back = RelationVocab::read_tsv(f.path()).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.name(2), Some("artist"));
    }
}
