//! Triples, vocabularies and the split indexes used for labels and filtering.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Suffix appended to a relation name to mint its reciprocal.
pub const INVERSE_SUFFIX: &str = "__inv";

pub const SPLIT_FILES: [&str; 3] = ["train.txt", "valid.txt", "test.txt"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub s: usize,
    pub r: usize,
    pub o: usize,
}

impl Triple {
    pub const fn new(s: usize, r: usize, o: usize) -> Self {
        Self { s, r, o }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split `{other}`"))),
        }
    }
}

/// Dense id assignment for entity and relation names.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    entities: Vec<String>,
    relations: Vec<String>,
    entity_ids: HashMap<String, usize>,
    relation_ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary; names are deduplicated and ids follow sorted order.
    pub fn new<E, R>(entities: E, relations: R) -> Self
    where
        E: IntoIterator,
        E::Item: Into<String>,
        R: IntoIterator,
        R::Item: Into<String>,
    {
        let entities: BTreeSet<String> = entities.into_iter().map(Into::into).collect();
        let relations: BTreeSet<String> = relations.into_iter().map(Into::into).collect();
        Self::from_ordered(entities.into_iter().collect(), relations.into_iter().collect())
    }

    fn from_ordered(entities: Vec<String>, relations: Vec<String>) -> Self {
        let entity_ids = entities.iter().enumerate().map(|(i, e)| (e.clone(), i)).collect();
        let relation_ids = relations.iter().enumerate().map(|(i, r)| (r.clone(), i)).collect();
        Self {
            entities,
            relations,
            entity_ids,
            relation_ids,
        }
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entity_id(&self, name: &str) -> Option<usize> {
        self.entity_ids.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relation_ids.get(name).copied()
    }

    pub fn entity(&self, id: usize) -> &str {
        &self.entities[id]
    }

    pub fn relation(&self, id: usize) -> &str {
        &self.relations[id]
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    /// SHA-256 over both name lists in id order.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (tag, names) in [(b'E', &self.entities), (b'R', &self.relations)] {
            h.update([tag]);
            h.update((names.len() as u64).to_le_bytes());
            for n in names {
                h.update((n.len() as u64).to_le_bytes());
                h.update(n.as_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn hash_hex(&self) -> String {
        hex(&self.hash())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `(s, r) → sorted objects` and `(o, r) → sorted subjects`.
#[derive(Clone, Debug, Default)]
pub struct TripleIndex {
    sr: BTreeMap<(usize, usize), Vec<usize>>,
    or: BTreeMap<(usize, usize), Vec<usize>>,
}

impl TripleIndex {
    pub fn build<'a>(triples: impl IntoIterator<Item = &'a Triple>) -> Self {
        let mut sr: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        let mut or: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for t in triples {
            sr.entry((t.s, t.r)).or_default().push(t.o);
            or.entry((t.o, t.r)).or_default().push(t.s);
        }
        for v in sr.values_mut().chain(or.values_mut()) {
            v.sort_unstable();
            v.dedup();
        }
        Self { sr, or }
    }

    pub fn objects(&self, s: usize, r: usize) -> &[usize] {
        self.sr.get(&(s, r)).map_or(&[], Vec::as_slice)
    }

    pub fn subjects(&self, r: usize, o: usize) -> &[usize] {
        self.or.get(&(o, r)).map_or(&[], Vec::as_slice)
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.objects(t.s, t.r).binary_search(&t.o).is_ok()
    }

    /// Distinct `(s, r)` keys in ascending order.
    pub fn queries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.sr.keys().copied()
    }

    pub fn n_queries(&self) -> usize {
        self.sr.len()
    }
}

/// Counts reported while loading a dataset directory.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    /// Duplicate lines dropped per split (train, valid, test).
    pub duplicates: [usize; 3],
    /// Entities that never occur in train.
    pub entities_outside_train: usize,
    /// Relations that never occur in train.
    pub relations_outside_train: usize,
}

#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    vocab: Vocabulary,
    train: Vec<Triple>,
    valid: Vec<Triple>,
    test: Vec<Triple>,
    /// Set after reciprocal augmentation: the inverse of relation `r < n` is `r + n`.
    reciprocal_offset: Option<usize>,
    train_index: TripleIndex,
    all_index: TripleIndex,
}

impl KnowledgeGraph {
    /// Builds a graph from id triples. Duplicates inside a split are removed
    /// (first occurrence kept) and ids are bounds-checked.
    pub fn new(vocab: Vocabulary, train: Vec<Triple>, valid: Vec<Triple>, test: Vec<Triple>) -> Result<Self> {
        Ok(Self::with_report(vocab, [train, valid, test])?.0)
    }

    fn with_report(vocab: Vocabulary, splits: [Vec<Triple>; 3]) -> Result<(Self, [usize; 3])> {
        let mut dups = [0; 3];
        let mut out: [Vec<Triple>; 3] = Default::default();
        for (i, split) in splits.into_iter().enumerate() {
            let mut seen = std::collections::HashSet::with_capacity(split.len());
            for t in split {
                for (what, id, len) in [
                    ("entity", t.s, vocab.n_entities()),
                    ("relation", t.r, vocab.n_relations()),
                    ("entity", t.o, vocab.n_entities()),
                ] {
                    if id >= len {
                        return Err(Error::Index { what, index: id, len });
                    }
                }
                if seen.insert(t) {
                    out[i].push(t);
                } else {
                    dups[i] += 1;
                }
            }
        }
        let [train, valid, test] = out;
        let train_index = TripleIndex::build(&train);
        let all_index = TripleIndex::build(train.iter().chain(&valid).chain(&test));
        Ok((
            Self {
                vocab,
                train,
                valid,
                test,
                reciprocal_offset: None,
                train_index,
                all_index,
            },
            dups,
        ))
    }

    /// Rebuilds the vocabulary from the names actually used by the given
    /// triples (ids refer to `vocab`), so unused entities and relations vanish.
    pub fn compacted(vocab: &Vocabulary, train: &[Triple], valid: &[Triple], test: &[Triple]) -> Result<Self> {
        let all = || train.iter().chain(valid).chain(test);
        let new_vocab = Vocabulary::new(
            all().flat_map(|t| [vocab.entity(t.s), vocab.entity(t.o)]).map(str::to_string),
            all().map(|t| vocab.relation(t.r).to_string()),
        );
        let remap = |ts: &[Triple]| -> Vec<Triple> {
            ts.iter()
                .map(|t| {
                    Triple::new(
                        new_vocab.entity_id(vocab.entity(t.s)).expect("entity kept"),
                        new_vocab.relation_id(vocab.relation(t.r)).expect("relation kept"),
                        new_vocab.entity_id(vocab.entity(t.o)).expect("entity kept"),
                    )
                })
                .collect()
        };
        let (tr, va, te) = (remap(train), remap(valid), remap(test));
        Self::new(new_vocab, tr, va, te)
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn n_entities(&self) -> usize {
        self.vocab.n_entities()
    }

    pub fn n_relations(&self) -> usize {
        self.vocab.n_relations()
    }

    pub fn train(&self) -> &[Triple] {
        &self.train
    }

    pub fn valid(&self) -> &[Triple] {
        &self.valid
    }

    pub fn test(&self) -> &[Triple] {
        &self.test
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn n_triples(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn train_index(&self) -> &TripleIndex {
        &self.train_index
    }

    /// Index over train ∪ valid ∪ test, used for filtering.
    pub fn all_index(&self) -> &TripleIndex {
        &self.all_index
    }

    pub fn is_reciprocal(&self) -> bool {
        self.reciprocal_offset.is_some()
    }

    /// Number of relations before reciprocal augmentation.
    pub fn n_base_relations(&self) -> usize {
        self.reciprocal_offset.unwrap_or(self.n_relations())
    }

    /// The reciprocal relation id of `r`, if augmentation has been applied.
    pub fn inverse_relation(&self, r: usize) -> Option<usize> {
        let n = self.reciprocal_offset?;
        Some(if r < n { r + n } else { r - n })
    }

    /// Triples of `split` restricted to the original relations.
    pub fn base_triples(&self, split: Split) -> &[Triple] {
        // augmentation appends all reciprocals after the originals
        let ts = self.split(split);
        if self.is_reciprocal() {
            &ts[..ts.len() / 2]
        } else {
            ts
        }
    }

    /// Mints `r__inv` for every relation and adds `(o, r__inv, s)` for every
    /// triple to the same split.
    pub fn add_reciprocals(&self) -> Result<Self> {
        if self.is_reciprocal() {
            return Err(Error::config("reciprocal relations were already added"));
        }
        let n = self.n_relations();
        let relations: Vec<String> = self
            .vocab
            .relations
            .iter()
            .cloned()
            .chain(self.vocab.relations.iter().map(|r| format!("{r}{INVERSE_SUFFIX}")))
            .collect();
        let vocab = Vocabulary::from_ordered(self.vocab.entities.clone(), relations);
        let augment = |ts: &[Triple]| -> Vec<Triple> {
            ts.iter()
                .copied()
                .chain(ts.iter().map(|t| Triple::new(t.o, t.r + n, t.s)))
                .collect()
        };
        let mut kg = Self::new(vocab, augment(&self.train), augment(&self.valid), augment(&self.test))?;
        kg.reciprocal_offset = Some(n);
        Ok(kg)
    }

    /// Multi-hot training targets for the query `(s, r, ?)`.
    pub fn build_label_vector(&self, s: usize, r: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_entities()];
        for &o in self.train_index.objects(s, r) {
            v[o] = 1.0;
        }
        v
    }

    /// Marks every known-true object of `(s, r, ?)` other than `test_o`.
    pub fn filter_candidates(&self, s: usize, r: usize, test_o: usize) -> Vec<bool> {
        let mut mask = vec![false; self.n_entities()];
        for &o in self.all_index.objects(s, r) {
            mask[o] = o != test_o;
        }
        mask
    }

    /// Marks every known-true subject of `(?, r, o)` other than `test_s`.
    pub fn filter_subjects(&self, r: usize, o: usize, test_s: usize) -> Vec<bool> {
        let mut mask = vec![false; self.n_entities()];
        for &s in self.all_index.subjects(r, o) {
            mask[s] = s != test_s;
        }
        mask
    }

    /// SHA-256 over the vocabulary and all three splits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.vocab.hash());
        for split in Split::ALL {
            h.update((self.split(split).len() as u64).to_le_bytes());
            for t in self.split(split) {
                for id in [t.s, t.r, t.o] {
                    h.update((id as u64).to_le_bytes());
                }
            }
        }
        hex(&h.finalize())
    }
}

fn parse_split(path: &Path) -> Result<Vec<[String; 3]>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        rows.push([fields[0].to_string(), fields[1].to_string(), fields[2].to_string()]);
    }
    Ok(rows)
}

/// Reads `train.txt`, `valid.txt` and `test.txt` from `dir`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(KnowledgeGraph, LoadReport)> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let rows: Vec<Vec<[String; 3]>> = SPLIT_FILES
        .iter()
        .map(|f| parse_split(&dir.join(f)))
        .collect::<Result<_>>()?;
    let vocab = Vocabulary::new(
        rows.iter().flatten().flat_map(|[s, _, o]| [s.clone(), o.clone()]),
        rows.iter().flatten().map(|[_, r, _]| r.clone()),
    );
    let encode = |rs: &[[String; 3]]| -> Vec<Triple> {
        rs.iter()
            .map(|[s, r, o]| {
                Triple::new(
                    vocab.entity_id(s).unwrap(),
                    vocab.relation_id(r).unwrap(),
                    vocab.entity_id(o).unwrap(),
                )
            })
            .collect()
    };
    let splits = [encode(&rows[0]), encode(&rows[1]), encode(&rows[2])];
    let (kg, duplicates) = KnowledgeGraph::with_report(vocab, splits)?;

    let mut in_train_e = vec![false; kg.n_entities()];
    let mut in_train_r = vec![false; kg.n_relations()];
    for t in kg.train() {
        in_train_e[t.s] = true;
        in_train_e[t.o] = true;
        in_train_r[t.r] = true;
    }
    let report = LoadReport {
        duplicates,
        entities_outside_train: in_train_e.iter().filter(|&&b| !b).count(),
        relations_outside_train: in_train_r.iter().filter(|&&b| !b).count(),
    };
    for (split, d) in Split::ALL.iter().zip(duplicates) {
        if d > 0 {
            log::warn!("{}: dropped {d} duplicate {split} triples", dir.display());
        }
    }
    if report.entities_outside_train > 0 || report.relations_outside_train > 0 {
        log::warn!(
            "{}: {} entities and {} relations occur only in valid/test",
            dir.display(),
            report.entities_outside_train,
            report.relations_outside_train
        );
    }
    Ok((kg, report))
}

/// Writes the three split files (original relations only) into `dir`.
pub fn write_dataset(kg: &KnowledgeGraph, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let v = kg.vocab();
    let mut paths = Vec::new();
    for (split, file) in Split::ALL.iter().zip(SPLIT_FILES) {
        let path = dir.join(file);
        let mut out = std::io::BufWriter::new(fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
        for t in kg.base_triples(*split) {
            writeln!(out, "{}\t{}\t{}", v.entity(t.s), v.relation(t.r), v.entity(t.o))
                .map_err(|e| Error::io(&path, e))?;
        }
        out.flush().map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, train: &str, valid: &str, test: &str) {
        fs::write(dir.join("train.txt"), train).unwrap();
        fs::write(dir.join("valid.txt"), valid).unwrap();
        fs::write(dir.join("test.txt"), test).unwrap();
    }

    fn toy() -> KnowledgeGraph {
        let vocab = Vocabulary::new(["a", "b", "c", "d", "e", "f"], ["r", "q"]);
        let t = |s, r, o| Triple::new(s, r, o);
        KnowledgeGraph::new(
            vocab,
            vec![t(0, 0, 2), t(0, 0, 5), t(1, 1, 0), t(3, 0, 4)],
            vec![t(0, 0, 1)],
            vec![t(0, 0, 3), t(4, 1, 3)],
        )
        .unwrap()
    }

    #[test]
    fn duplicate_lines_are_counted() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a\tr\tb\na\tr\tb\nb\tr\tc\n", "", "");
        let (kg, report) = load_dataset(dir.path()).unwrap();
        assert_eq!(kg.train().len(), 2);
        assert_eq!(report.duplicates, [1, 0, 0]);
        assert!(kg.valid().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a\tr\tb\na\tr\n", "", "");
        match load_dataset(dir.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("train.txt"), "a\tr\tb\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Io { .. })));
        assert!(matches!(load_dataset(dir.path().join("nope")), Err(Error::Io { .. })));
    }

    #[test]
    fn entities_only_in_test_are_kept() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), " a \tr\tb\n", "", "a\tr\tz\n");
        let (kg, report) = load_dataset(dir.path()).unwrap();
        assert_eq!(kg.n_entities(), 3);
        assert_eq!(report.entities_outside_train, 1);
        assert!(kg.vocab().entity_id("a").is_some());
    }

    #[test]
    fn vocabulary_round_trip() {
        let v = Vocabulary::new(["x", "y", "x"], ["r"]);
        assert_eq!(v.n_entities(), 2);
        for id in 0..v.n_entities() {
            assert_eq!(v.entity_id(v.entity(id)), Some(id));
        }
    }

    #[test]
    fn reciprocals_single_triple() {
        let vocab = Vocabulary::new(["a", "b"], ["r"]);
        let kg = KnowledgeGraph::new(vocab, vec![Triple::new(0, 0, 1)], vec![], vec![]).unwrap();
        let aug = kg.add_reciprocals().unwrap();
        assert_eq!(aug.n_relations(), 2);
        assert_eq!(aug.vocab().relation(1), "r__inv");
        assert_eq!(aug.train(), &[Triple::new(0, 0, 1), Triple::new(1, 1, 0)]);
        assert_eq!(aug.inverse_relation(0), Some(1));
        assert_eq!(aug.inverse_relation(1), Some(0));
        assert!(aug.add_reciprocals().is_err());
    }

    #[test]
    fn label_vector() {
        let kg = toy();
        assert_eq!(kg.build_label_vector(0, 0), vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        assert!(kg.build_label_vector(5, 1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn filter_masks_other_true_objects() {
        let kg = toy();
        // (a, r, ?) has objects {b, c, d, f} over all splits
        let mask = kg.filter_candidates(0, 0, 3);
        assert_eq!(mask, vec![false, true, true, false, false, true]);
        assert!(kg.filter_candidates(3, 0, 4).iter().all(|&m| !m));
        let subj = kg.filter_subjects(1, 3, 4);
        assert!(subj.iter().all(|&m| !m));
    }

    #[test]
    fn write_then_load_round_trip() {
        let kg = toy();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&kg.add_reciprocals().unwrap(), dir.path()).unwrap();
        let (back, _) = load_dataset(dir.path()).unwrap();
        assert_eq!(back.train(), kg.train());
        assert_eq!(back.test(), kg.test());
        assert_eq!(back.vocab().hash(), kg.vocab().hash());
    }

    #[test]
    fn compacted_drops_unused_names() {
        let kg = toy();
        let only_r: Vec<Triple> = kg.train().iter().filter(|t| t.r == 0).copied().collect();
        let c = KnowledgeGraph::compacted(kg.vocab(), &only_r, &[], &[]).unwrap();
        assert_eq!(c.n_relations(), 1);
        assert_eq!(c.n_entities(), 5);
    }
}
