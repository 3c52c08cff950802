//! Domain types shared across the toolkit.
//!
//! Nothing in here performs I/O or implements an algorithm; the types only
//! enforce their own invariants at construction time and are immutable
//! afterwards.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Malformed `KIND:name` tag token.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed tag token {token:?}: {reason}")]
pub struct TagParseError {
    pub token: String,
    pub reason: &'static str,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("duplicate tag {0} in tag list")]
    DuplicateTag(Tag),
    #[error("tag {0} has score 0, scores must be >= 1")]
    ZeroScore(Tag),
    #[error("invalid sha256 {0:?}: expected 64 hex characters")]
    InvalidSha(String),
    #[error("invalid year-month {0:?}: expected YYYY-MM")]
    InvalidYearMonth(String),
    #[error("label {label} is inconsistent with subset {subset}")]
    LabelSubsetMismatch { label: Label, subset: Subset },
    #[error("invalid label code {0}, expected -1, 0 or 1")]
    InvalidLabel(i64),
    #[error("unknown subset {0:?}")]
    InvalidSubset(String),
    #[error("leaf matrix must have at least one sample and one tree (got {n_samples}x{n_trees})")]
    EmptyMatrix { n_samples: usize, n_trees: usize },
    #[error("leaf matrix data has {actual} entries, expected {expected}")]
    MatrixShape { expected: usize, actual: usize },
    #[error("leaf vector {row} has length {actual}, expected {expected}")]
    RaggedRows {
        row: usize,
        expected: usize,
        actual: usize,
    },
    #[error("co-occurrence pair ({a}, {b}): {reason}")]
    InconsistentPair { a: Tag, b: Tag, reason: String },
    #[error("ranking for kind {kind} contains {tag}")]
    RankingKind { kind: TagKind, tag: Tag },
    #[error("ranking is not ordered at position {0}")]
    RankingOrder(usize),
}

/// Tag kinds emitted by AVClass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TagKind {
    File,
    Class,
    Fam,
    Beh,
    Unk,
}

impl TagKind {
    pub const ALL: [TagKind; 5] = [
        TagKind::File,
        TagKind::Class,
        TagKind::Fam,
        TagKind::Beh,
        TagKind::Unk,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TagKind::File => "FILE",
            TagKind::Class => "CLASS",
            TagKind::Fam => "FAM",
            TagKind::Beh => "BEH",
            TagKind::Unk => "UNK",
        }
    }
}

impl fmt::Display for TagKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TagKind {
    type Err = TagParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TagKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| TagParseError {
                token: s.to_string(),
                reason: "unknown tag kind",
            })
    }
}

/// A normalized AVClass tag. Kind and name together form the identity.
///
/// Tags order by their rendered `KIND:name` form. No kind string is a
/// prefix of another, so comparing `(kind, name)` component-wise gives the
/// same order as comparing the rendered strings.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Tag {
    kind: TagKind,
    name: String,
}

impl Tag {
    /// Builds a tag from parts, applying the same normalization as [`Tag::parse`].
    pub fn new(kind: TagKind, name: &str) -> Result<Self, TagParseError> {
        let name = name.to_lowercase();
        if name.is_empty() {
            return Err(TagParseError {
                token: format!("{kind}:"),
                reason: "empty tag name",
            });
        }
        if name
            .chars()
            .any(|c| c.is_whitespace() || c == ',' || c == '|' || c == '"')
        {
            return Err(TagParseError {
                token: format!("{kind}:{name}"),
                reason: "tag name contains a separator character",
            });
        }
        Ok(Tag { kind, name })
    }

    /// Parses a `KIND:name` token. Tokens without a `:` are bare names of
    /// kind UNK; a `:` before any known kind prefix is an error.
    pub fn parse(text: &str) -> Result<Self, TagParseError> {
        let text = text.trim();
        let Some((prefix, rest)) = text.split_once(':') else {
            return Tag::new(TagKind::Unk, text).map_err(|e| TagParseError {
                token: text.to_string(),
                reason: e.reason,
            });
        };
        let kind = prefix.parse::<TagKind>().map_err(|_| TagParseError {
            token: text.to_string(),
            reason: "unknown tag kind prefix",
        })?;
        Tag::new(kind, rest).map_err(|e| TagParseError {
            token: text.to_string(),
            reason: e.reason,
        })
    }

    pub fn kind(&self) -> TagKind {
        self.kind
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

impl Ord for Tag {
    fn cmp(&self, other: &Self) -> Ordering {
        self.kind
            .as_str()
            .cmp(other.kind.as_str())
            .then_with(|| self.name.cmp(&other.name))
    }
}

impl PartialOrd for Tag {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.name)
    }
}

impl FromStr for Tag {
    type Err = TagParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Tag::parse(s)
    }
}

/// Lowercase hex SHA-256 digest identifying a sample.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sha256(String);

impl Sha256 {
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        if s.len() != 64 || !s.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(ModelError::InvalidSha(s.to_string()));
        }
        Ok(Sha256(s.to_ascii_lowercase()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Sha256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// EMBER label. `Unlabeled` is the `-1` class, kept addressable on purpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Unlabeled,
    Benign,
    Malicious,
}

impl Label {
    pub fn from_code(code: i64) -> Result<Self, ModelError> {
        match code {
            -1 => Ok(Label::Unlabeled),
            0 => Ok(Label::Benign),
            1 => Ok(Label::Malicious),
            other => Err(ModelError::InvalidLabel(other)),
        }
    }

    pub fn code(self) -> i8 {
        match self {
            Label::Unlabeled => -1,
            Label::Benign => 0,
            Label::Malicious => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Unlabeled => "unlabeled",
            Label::Benign => "benign",
            Label::Malicious => "malicious",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Subset {
    Train,
    Test,
    Unlabeled,
}

impl Subset {
    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::Test => "test",
            Subset::Unlabeled => "unlabeled",
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Subset {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Subset::Train),
            "test" => Ok(Subset::Test),
            "unlabeled" => Ok(Subset::Unlabeled),
            other => Err(ModelError::InvalidSubset(other.to_string())),
        }
    }
}

/// Month a sample first appeared, `YYYY-MM`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct YearMonth {
    pub year: u16,
    pub month: u8,
}

impl FromStr for YearMonth {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ModelError::InvalidYearMonth(s.to_string());
        let (y, m) = s.split_once('-').ok_or_else(bad)?;
        if y.len() != 4 || m.len() != 2 {
            return Err(bad());
        }
        let year: u16 = y.parse().map_err(|_| bad())?;
        let month: u8 = m.parse().map_err(|_| bad())?;
        if !(1..=12).contains(&month) {
            return Err(bad());
        }
        Ok(YearMonth { year, month })
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleMeta {
    pub row: usize,
    pub sha256: Sha256,
    pub label: Label,
    pub subset: Subset,
    pub appeared: Option<YearMonth>,
}

impl SampleMeta {
    /// Enforces the EMBER convention `label = unlabeled <=> subset = unlabeled`.
    pub fn new(
        row: usize,
        sha256: Sha256,
        label: Label,
        subset: Subset,
        appeared: Option<YearMonth>,
    ) -> Result<Self, ModelError> {
        if (label == Label::Unlabeled) != (subset == Subset::Unlabeled) {
            return Err(ModelError::LabelSubsetMismatch { label, subset });
        }
        Ok(SampleMeta {
            row,
            sha256,
            label,
            subset,
            appeared,
        })
    }
}

/// AVClass tags of one sample with their rank scores, in file order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ScoredTagList {
    tags: Vec<(Tag, u32)>,
    detections: Option<u32>,
}

impl ScoredTagList {
    pub fn new(tags: Vec<(Tag, u32)>, detections: Option<u32>) -> Result<Self, ModelError> {
        let mut seen = HashSet::with_capacity(tags.len());
        for (tag, score) in &tags {
            if *score == 0 {
                return Err(ModelError::ZeroScore(tag.clone()));
            }
            if !seen.insert(tag) {
                return Err(ModelError::DuplicateTag(tag.clone()));
            }
        }
        Ok(ScoredTagList { tags, detections })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn tags(&self) -> &[(Tag, u32)] {
        &self.tags
    }

    pub fn detections(&self) -> Option<u32> {
        self.detections
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn contains(&self, tag: &Tag) -> bool {
        self.tags.iter().any(|(t, _)| t == tag)
    }

    pub fn score(&self, tag: &Tag) -> Option<u32> {
        self.tags.iter().find(|(t, _)| t == tag).map(|(_, s)| *s)
    }

    pub fn of_kind(&self, kind: TagKind) -> impl Iterator<Item = &(Tag, u32)> {
        self.tags.iter().filter(move |(t, _)| t.kind() == kind)
    }
}

/// Storage width of leaf indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafWidth {
    U16,
    U32,
}

impl LeafWidth {
    pub fn bytes(self) -> usize {
        match self {
            LeafWidth::U16 => 2,
            LeafWidth::U32 => 4,
        }
    }

    /// Narrowest width that can hold `max_leaf`.
    pub fn for_max(max_leaf: u32) -> Self {
        if max_leaf < 1 << 16 {
            LeafWidth::U16
        } else {
            LeafWidth::U32
        }
    }
}

/// Terminal-node indices of one sample, one per tree.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LeafVector(pub Vec<u32>);

impl LeafVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_row(&self) -> LeafRow<'_> {
        LeafRow::U32(&self.0)
    }
}

impl From<Vec<u32>> for LeafVector {
    fn from(v: Vec<u32>) -> Self {
        LeafVector(v)
    }
}

/// Borrowed view of one matrix row in its storage width.
#[derive(Debug, Clone, Copy)]
pub enum LeafRow<'a> {
    U16(&'a [u16]),
    U32(&'a [u32]),
}

impl LeafRow<'_> {
    pub fn len(&self) -> usize {
        match self {
            LeafRow::U16(r) => r.len(),
            LeafRow::U32(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> u32 {
        match self {
            LeafRow::U16(r) => u32::from(r[i]),
            LeafRow::U32(r) => r[i],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    pub fn to_vector(&self) -> LeafVector {
        LeafVector(self.iter().collect())
    }
}

#[derive(Debug, Clone)]
enum LeafStore {
    U16(Vec<u16>),
    U32(Vec<u32>),
}

/// N x T matrix of leaf indices, row-major. Row `i` is the leaf vector of
/// sample `i`.
#[derive(Debug, Clone)]
pub struct LeafMatrix {
    n_samples: usize,
    n_trees: usize,
    store: LeafStore,
}

impl LeafMatrix {
    fn check_shape(n_samples: usize, n_trees: usize, len: usize) -> Result<(), ModelError> {
        if n_samples == 0 || n_trees == 0 {
            return Err(ModelError::EmptyMatrix { n_samples, n_trees });
        }
        let expected = n_samples * n_trees;
        if len != expected {
            return Err(ModelError::MatrixShape {
                expected,
                actual: len,
            });
        }
        Ok(())
    }

    /// Builds a matrix, storing indices at 16 bits when they all fit.
    pub fn new(n_samples: usize, n_trees: usize, data: Vec<u32>) -> Result<Self, ModelError> {
        Self::check_shape(n_samples, n_trees, data.len())?;
        let max = data.iter().copied().max().unwrap_or(0);
        let store = match LeafWidth::for_max(max) {
            LeafWidth::U16 => LeafStore::U16(data.into_iter().map(|v| v as u16).collect()),
            LeafWidth::U32 => LeafStore::U32(data),
        };
        Ok(LeafMatrix {
            n_samples,
            n_trees,
            store,
        })
    }

    pub fn from_u16(n_samples: usize, n_trees: usize, data: Vec<u16>) -> Result<Self, ModelError> {
        Self::check_shape(n_samples, n_trees, data.len())?;
        Ok(LeafMatrix {
            n_samples,
            n_trees,
            store: LeafStore::U16(data),
        })
    }

    /// Builds a matrix that keeps 32-bit storage regardless of the values.
    pub fn from_u32(n_samples: usize, n_trees: usize, data: Vec<u32>) -> Result<Self, ModelError> {
        Self::check_shape(n_samples, n_trees, data.len())?;
        Ok(LeafMatrix {
            n_samples,
            n_trees,
            store: LeafStore::U32(data),
        })
    }

    pub fn from_vectors(rows: &[LeafVector]) -> Result<Self, ModelError> {
        let n_trees = rows.first().map_or(0, LeafVector::len);
        let mut data = Vec::with_capacity(rows.len() * n_trees);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n_trees {
                return Err(ModelError::RaggedRows {
                    row: i,
                    expected: n_trees,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(&row.0);
        }
        Self::new(rows.len(), n_trees, data)
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_trees(&self) -> usize {
        self.n_trees
    }

    pub fn width(&self) -> LeafWidth {
        match self.store {
            LeafStore::U16(_) => LeafWidth::U16,
            LeafStore::U32(_) => LeafWidth::U32,
        }
    }

    pub fn row(&self, i: usize) -> LeafRow<'_> {
        let range = i * self.n_trees..(i + 1) * self.n_trees;
        match &self.store {
            LeafStore::U16(d) => LeafRow::U16(&d[range]),
            LeafStore::U32(d) => LeafRow::U32(&d[range]),
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = LeafRow<'_>> {
        (0..self.n_samples).map(move |i| self.row(i))
    }

    pub fn get(&self, row: usize, tree: usize) -> u32 {
        self.row(row).get(tree)
    }

    pub fn max_leaf(&self) -> u32 {
        match &self.store {
            LeafStore::U16(d) => d.iter().copied().max().map_or(0, u32::from),
            LeafStore::U32(d) => d.iter().copied().max().unwrap_or(0),
        }
    }

    /// Copies the given rows, in order, into a new matrix of the same width.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self, ModelError> {
        Self::check_shape(rows.len(), self.n_trees, rows.len() * self.n_trees)?;
        let store = match &self.store {
            LeafStore::U16(_) => LeafStore::U16(
                rows.iter()
                    .flat_map(|&r| match self.row(r) {
                        LeafRow::U16(s) => s.iter().copied(),
                        LeafRow::U32(_) => unreachable!(),
                    })
                    .collect(),
            ),
            LeafStore::U32(_) => LeafStore::U32(
                rows.iter()
                    .flat_map(|&r| match self.row(r) {
                        LeafRow::U32(s) => s.iter().copied(),
                        LeafRow::U16(_) => unreachable!(),
                    })
                    .collect(),
            ),
        };
        Ok(LeafMatrix {
            n_samples: rows.len(),
            n_trees: self.n_trees,
            store,
        })
    }
}

/// Matrices compare by shape and values; storage width is not part of equality.
impl PartialEq for LeafMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.n_samples == other.n_samples
            && self.n_trees == other.n_trees
            && match (&self.store, &other.store) {
                (LeafStore::U16(a), LeafStore::U16(b)) => a == b,
                (LeafStore::U32(a), LeafStore::U32(b)) => a == b,
                _ => (0..self.n_samples).all(|i| self.row(i).iter().eq(other.row(i).iter())),
            }
    }
}

impl Eq for LeafMatrix {}

/// Co-occurrence statistics of a tag pair, oriented as `(a, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairStat {
    pub count_a: u64,
    pub count_b: u64,
    pub count_ab: u64,
}

impl PairStat {
    pub fn flipped(self) -> Self {
        PairStat {
            count_a: self.count_b,
            count_b: self.count_a,
            count_ab: self.count_ab,
        }
    }
}

/// Tag frequencies and pairwise co-occurrence counts over a corpus.
///
/// Pairs are stored once under the canonical key `(a, b)` with `a < b`.
#[derive(Debug, Clone, Default)]
pub struct CoocTable {
    tag_freq: BTreeMap<Tag, u64>,
    pairs: BTreeMap<(Tag, Tag), u64>,
    partners: HashMap<Tag, Vec<(Tag, u64)>>,
}

impl PartialEq for CoocTable {
    fn eq(&self, other: &Self) -> bool {
        self.tag_freq == other.tag_freq && self.pairs == other.pairs
    }
}

impl Eq for CoocTable {}

impl CoocTable {
    /// Builds a table from per-tag sample counts and joint counts. Pair keys
    /// may come in either orientation; `(a, a)` keys are rejected.
    pub fn new(
        tag_freq: BTreeMap<Tag, u64>,
        joint: impl IntoIterator<Item = ((Tag, Tag), u64)>,
    ) -> Result<Self, ModelError> {
        let mut pairs = BTreeMap::new();
        for ((a, b), count_ab) in joint {
            let bad = |reason: String| ModelError::InconsistentPair {
                a: a.clone(),
                b: b.clone(),
                reason,
            };
            if a == b {
                return Err(bad("a tag cannot pair with itself".into()));
            }
            let fa = *tag_freq
                .get(&a)
                .ok_or_else(|| bad(format!("{a} has no frequency")))?;
            let fb = *tag_freq
                .get(&b)
                .ok_or_else(|| bad(format!("{b} has no frequency")))?;
            if count_ab == 0 {
                return Err(bad("count_ab must be >= 1".into()));
            }
            if count_ab > fa.min(fb) {
                return Err(bad(format!(
                    "count_ab {count_ab} exceeds min(count_a, count_b) = {}",
                    fa.min(fb)
                )));
            }
            let key = if a < b { (a, b) } else { (b, a) };
            if pairs.insert(key.clone(), count_ab).is_some() {
                return Err(ModelError::InconsistentPair {
                    a: key.0,
                    b: key.1,
                    reason: "pair listed twice".into(),
                });
            }
        }
        if let Some((t, _)) = tag_freq.iter().find(|(_, &f)| f == 0) {
            return Err(ModelError::InconsistentPair {
                a: t.clone(),
                b: t.clone(),
                reason: "tag frequency must be >= 1".into(),
            });
        }

        let mut partners: HashMap<Tag, Vec<(Tag, u64)>> = HashMap::new();
        for ((a, b), &n) in &pairs {
            partners.entry(a.clone()).or_default().push((b.clone(), n));
            partners.entry(b.clone()).or_default().push((a.clone(), n));
        }
        for list in partners.values_mut() {
            list.sort_by(|x, y| x.0.cmp(&y.0));
        }
        Ok(CoocTable {
            tag_freq,
            pairs,
            partners,
        })
    }

    pub fn tag_freq(&self) -> &BTreeMap<Tag, u64> {
        &self.tag_freq
    }

    pub fn freq(&self, tag: &Tag) -> Option<u64> {
        self.tag_freq.get(tag).copied()
    }

    /// Number of samples carrying both tags; 0 when they never co-occur.
    pub fn joint(&self, a: &Tag, b: &Tag) -> u64 {
        let key = if a < b {
            (a.clone(), b.clone())
        } else {
            (b.clone(), a.clone())
        };
        self.pairs.get(&key).copied().unwrap_or(0)
    }

    /// Pair statistics oriented as `(a, b)`, if the pair co-occurs.
    pub fn pair(&self, a: &Tag, b: &Tag) -> Option<PairStat> {
        let n = self.joint(a, b);
        (n > 0).then(|| PairStat {
            count_a: self.tag_freq[a],
            count_b: self.tag_freq[b],
            count_ab: n,
        })
    }

    /// All tags that co-occur with `tag`, sorted, with their joint counts.
    pub fn partners(&self, tag: &Tag) -> &[(Tag, u64)] {
        self.partners.get(tag).map_or(&[], Vec::as_slice)
    }

    /// Canonical pairs `(a, b)` with `a < b`, in ascending order.
    pub fn pair_stats(&self) -> impl Iterator<Item = (&Tag, &Tag, PairStat)> {
        self.pairs.iter().map(|((a, b), &n)| {
            (
                a,
                b,
                PairStat {
                    count_a: self.tag_freq[a],
                    count_b: self.tag_freq[b],
                    count_ab: n,
                },
            )
        })
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tag_freq.is_empty()
    }
}

/// Tags added to a sample by co-occurrence, keyed by `(source, added)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnrichedTags {
    res: BTreeMap<(Tag, Tag), f64>,
}

impl EnrichedTags {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a pair, keeping the larger frequency on a repeated key.
    pub fn insert_max(&mut self, source: Tag, added: Tag, freq: f64) {
        self.res
            .entry((source, added))
            .and_modify(|f| *f = f.max(freq))
            .or_insert(freq);
    }

    pub fn get(&self, source: &Tag, added: &Tag) -> Option<f64> {
        self.res.get(&(source.clone(), added.clone())).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Tag, &Tag, f64)> {
        self.res.iter().map(|((s, a), &f)| (s, a, f))
    }

    pub fn len(&self) -> usize {
        self.res.len()
    }

    pub fn is_empty(&self) -> bool {
        self.res.is_empty()
    }

    pub fn keys_subset_of(&self, other: &EnrichedTags) -> bool {
        self.res.keys().all(|k| other.res.contains_key(k))
    }
}

/// Tags of one kind in descending rank-score order.
#[derive(Debug, Clone, PartialEq)]
pub struct TagRanking {
    kind: TagKind,
    ranked: Vec<(Tag, f64)>,
}

fn rank_order(a: &(Tag, f64), b: &(Tag, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.name().cmp(b.0.name()))
}

impl TagRanking {
    /// Sorts scores into a ranking, dropping tags of other kinds. Ties are
    /// broken by ascending tag name.
    pub fn from_scores(kind: TagKind, scores: impl IntoIterator<Item = (Tag, f64)>) -> Self {
        let mut ranked: Vec<(Tag, f64)> = scores
            .into_iter()
            .filter(|(t, _)| t.kind() == kind)
            .collect();
        ranked.sort_by(rank_order);
        TagRanking { kind, ranked }
    }

    /// Accepts an already ranked list, validating kind and order.
    pub fn new(kind: TagKind, ranked: Vec<(Tag, f64)>) -> Result<Self, ModelError> {
        if let Some((t, _)) = ranked.iter().find(|(t, _)| t.kind() != kind) {
            return Err(ModelError::RankingKind {
                kind,
                tag: t.clone(),
            });
        }
        if let Some(i) = ranked
            .windows(2)
            .position(|w| rank_order(&w[0], &w[1]) != Ordering::Less)
        {
            return Err(ModelError::RankingOrder(i + 1));
        }
        Ok(TagRanking { kind, ranked })
    }

    pub fn empty(kind: TagKind) -> Self {
        TagRanking {
            kind,
            ranked: Vec::new(),
        }
    }

    pub fn kind(&self) -> TagKind {
        self.kind
    }

    pub fn ranked(&self) -> &[(Tag, f64)] {
        &self.ranked
    }

    pub fn names(&self) -> Vec<&str> {
        self.ranked.iter().map(|(t, _)| t.name()).collect()
    }

    pub fn len(&self) -> usize {
        self.ranked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked.is_empty()
    }

    pub fn score(&self, tag: &Tag) -> Option<f64> {
        self.ranked.iter().find(|(t, _)| t == tag).map(|(_, s)| *s)
    }
}

/// One retrieved neighbour: `matches` of `n_trees` leaf indices agree.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryHit {
    pub row: usize,
    pub matches: u32,
    pub score: f64,
}

impl QueryHit {
    pub fn new(row: usize, matches: u32, n_trees: usize) -> Self {
        QueryHit {
            row,
            matches,
            score: f64::from(matches) / n_trees as f64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tag(s: &str) -> Tag {
        Tag::parse(s).unwrap()
    }

    #[test]
    fn parses_avclass_tokens() {
        assert_eq!(tag("FAM:swisyn"), Tag::new(TagKind::Fam, "swisyn").unwrap());
        let t = tag("FILE:os:windows");
        assert_eq!(t.kind(), TagKind::File);
        assert_eq!(t.name(), "os:windows");
        assert_eq!(tag("zbot"), Tag::new(TagKind::Unk, "zbot").unwrap());
    }

    #[test]
    fn lowercases_names() {
        assert_eq!(tag("FAM:ZBot").name(), "zbot");
        assert_eq!(tag("FAM:ZBot"), tag("FAM:zbot"));
    }

    #[test]
    fn rejects_malformed_tokens() {
        for bad in ["FAM:", "fam:zbot", "XYZ:foo", "", "FAM:a|b", "FAM:a b"] {
            let err = Tag::parse(bad).unwrap_err();
            assert_eq!(err.token, bad.trim());
        }
    }

    #[test]
    fn tag_order_matches_rendered_order() {
        let mut tags = [
            tag("FILE:packed"),
            tag("FAM:zbot"),
            tag("CLASS:worm"),
            tag("FAM:a"),
            tag("BEH:inject"),
            tag("UNK:x"),
        ];
        let mut rendered: Vec<String> = tags.iter().map(Tag::to_string).collect();
        tags.sort();
        rendered.sort();
        assert_eq!(
            tags.iter().map(Tag::to_string).collect::<Vec<_>>(),
            rendered
        );
    }

    #[test]
    fn scored_list_rejects_duplicates_and_zero() {
        let dup = ScoredTagList::new(vec![(tag("FAM:a"), 1), (tag("FAM:a"), 2)], None);
        assert!(matches!(dup, Err(ModelError::DuplicateTag(_))));
        let zero = ScoredTagList::new(vec![(tag("FAM:a"), 0)], None);
        assert!(matches!(zero, Err(ModelError::ZeroScore(_))));
        assert!(ScoredTagList::empty().is_empty());
    }

    #[test]
    fn meta_enforces_label_subset_rule() {
        let sha = Sha256::parse(&"a".repeat(64)).unwrap();
        assert!(SampleMeta::new(0, sha.clone(), Label::Unlabeled, Subset::Train, None).is_err());
        assert!(SampleMeta::new(0, sha.clone(), Label::Benign, Subset::Unlabeled, None).is_err());
        assert!(SampleMeta::new(0, sha, Label::Unlabeled, Subset::Unlabeled, None).is_ok());
    }

    #[test]
    fn sha_validation() {
        assert!(Sha256::parse("abc").is_err());
        assert!(Sha256::parse(&"g".repeat(64)).is_err());
        assert_eq!(
            Sha256::parse(&"AB".repeat(32)).unwrap().as_str(),
            "ab".repeat(32)
        );
    }

    #[test]
    fn year_month_parsing() {
        let ym: YearMonth = "2018-11".parse().unwrap();
        assert_eq!(ym.to_string(), "2018-11");
        assert!("2018-13".parse::<YearMonth>().is_err());
        assert!("18-01".parse::<YearMonth>().is_err());
    }

    #[test]
    fn matrix_width_is_auto_selected() {
        let m = LeafMatrix::new(1, 2, vec![1, 65535]).unwrap();
        assert_eq!(m.width(), LeafWidth::U16);
        let m = LeafMatrix::new(1, 2, vec![1, 70000]).unwrap();
        assert_eq!(m.width(), LeafWidth::U32);
        assert_eq!(m.get(0, 1), 70000);
    }

    #[test]
    fn matrix_rejects_empty_and_bad_shape() {
        assert!(matches!(
            LeafMatrix::new(0, 3, vec![]),
            Err(ModelError::EmptyMatrix { .. })
        ));
        assert!(matches!(
            LeafMatrix::new(2, 2, vec![1, 2, 3]),
            Err(ModelError::MatrixShape { .. })
        ));
        let ragged = [LeafVector(vec![1, 2]), LeafVector(vec![1])];
        assert!(matches!(
            LeafMatrix::from_vectors(&ragged),
            Err(ModelError::RaggedRows { row: 1, .. })
        ));
    }

    #[test]
    fn matrix_equality_ignores_storage_width() {
        let a = LeafMatrix::from_u16(1, 2, vec![3, 4]).unwrap();
        let b = LeafMatrix::from_u32(1, 2, vec![3, 4]).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.select_rows(&[0, 0]).unwrap().n_samples(), 2);
    }

    #[test]
    fn cooc_validates_bounds() {
        let freq = BTreeMap::from([(tag("FAM:a"), 3), (tag("FAM:b"), 2)]);
        let err = CoocTable::new(freq.clone(), [((tag("FAM:a"), tag("FAM:b")), 3)]).unwrap_err();
        assert!(matches!(err, ModelError::InconsistentPair { .. }));
        let t = CoocTable::new(freq, [((tag("FAM:b"), tag("FAM:a")), 2)]).unwrap();
        let stat = t.pair(&tag("FAM:b"), &tag("FAM:a")).unwrap();
        assert_eq!(
            stat,
            PairStat {
                count_a: 2,
                count_b: 3,
                count_ab: 2
            }
        );
        assert_eq!(
            t.pair(&tag("FAM:a"), &tag("FAM:b")).unwrap(),
            stat.flipped()
        );
        assert_eq!(t.partners(&tag("FAM:a")), &[(tag("FAM:b"), 2)]);
    }

    #[test]
    fn ranking_orders_ties_by_name() {
        let r = TagRanking::from_scores(
            TagKind::Fam,
            [
                (tag("FAM:b"), 0.5),
                (tag("FAM:a"), 0.5),
                (tag("FAM:c"), 0.9),
                (tag("CLASS:worm"), 1.0),
            ],
        );
        assert_eq!(r.names(), ["c", "a", "b"]);
        assert!(TagRanking::new(TagKind::Fam, r.ranked().to_vec()).is_ok());
        assert!(
            TagRanking::new(TagKind::Fam, vec![(tag("FAM:a"), 0.1), (tag("FAM:b"), 0.2)]).is_err()
        );
    }

    #[test]
    fn hit_score_is_multiple_of_inverse_tree_count() {
        let h = QueryHit::new(3, 3, 4);
        assert_eq!(h.score, 0.75);
    }
}
