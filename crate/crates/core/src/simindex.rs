//! Exact top-K search under leaf similarity.
//!
//! The similarity of two leaf vectors is the fraction of trees in which both
//! samples reach the same terminal node. Scores are kept as integer match
//! counts internally so that ranking and tie-breaking never depend on
//! floating point.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::Digest as _;
use thiserror::Error;

use crate::io::{self, IoError};
use crate::model::{LeafMatrix, LeafRow, LeafVector, LeafWidth, QueryHit, SampleMeta, Sha256};

/// Candidate rows scanned per parallel work unit.
const ROW_CHUNK: usize = 1024;
/// Queries scored together against each candidate row.
const QUERY_BLOCK: usize = 32;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("leaf vector length mismatch: expected {expected} trees, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("no indexable rows remain after filtering and exclusion")]
    EmptyIndex,
    #[error("row {row} is out of range for an index of {n_samples} rows")]
    RowOutOfRange { row: usize, n_samples: usize },
    #[error("metadata has {meta} rows but the leaf matrix has {rows}")]
    MetaCount { meta: usize, rows: usize },
    #[error("self-exclusion by sha256 requires metadata for both the index and the queries")]
    MissingShas,
    #[error("query batch carries {shas} sha256 values for {queries} queries")]
    QueryShaCount { shas: usize, queries: usize },
    #[error("stale index: expected digest {expected}, source has {actual}")]
    StaleDigest { expected: String, actual: String },
    #[error("query {index}: {source}")]
    Query {
        index: usize,
        #[source]
        source: Box<IndexError>,
    },
    #[error("invalid index manifest {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error(transparent)]
    Io(#[from] IoError),
}

pub type Result<T> = std::result::Result<T, IndexError>;

// ---------------------------------------------------------------------------
// Agreement kernels

#[inline(always)]
fn count_eq<T: Copy + PartialEq>(a: &[T], b: &[T]) -> u32 {
    // Inner chunks accumulate in u16 lanes, which vectorizes much better
    // than widening every comparison to u32.
    let mut total = 0u32;
    for (ca, cb) in a.chunks(4096).zip(b.chunks(4096)) {
        let n: u16 = ca
            .iter()
            .zip(cb)
            .fold(0u16, |acc, (x, y)| acc + u16::from(x == y));
        total += u32::from(n);
    }
    total
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn count_eq_u16_avx2(a: &[u16], b: &[u16]) -> u32 {
    count_eq(a, b)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn count_eq_u32_avx2(a: &[u32], b: &[u32]) -> u32 {
    count_eq(a, b)
}

fn count_eq_u16(a: &[u16], b: &[u16]) -> u32 {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the avx2 feature was detected at runtime.
        return unsafe { count_eq_u16_avx2(a, b) };
    }
    count_eq(a, b)
}

fn count_eq_u32(a: &[u32], b: &[u32]) -> u32 {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the avx2 feature was detected at runtime.
        return unsafe { count_eq_u32_avx2(a, b) };
    }
    count_eq(a, b)
}

/// Number of trees in which both rows share a leaf. Rows must have equal length.
fn row_matches(a: LeafRow<'_>, b: LeafRow<'_>) -> u32 {
    debug_assert_eq!(a.len(), b.len());
    match (a, b) {
        (LeafRow::U16(x), LeafRow::U16(y)) => count_eq_u16(x, y),
        (LeafRow::U32(x), LeafRow::U32(y)) => count_eq_u32(x, y),
        (LeafRow::U16(x), LeafRow::U32(y)) | (LeafRow::U32(y), LeafRow::U16(x)) => x
            .iter()
            .zip(y)
            .map(|(&p, &q)| u32::from(u32::from(p) == q))
            .sum(),
    }
}

fn check_dims(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(IndexError::Dimension { expected, actual });
    }
    Ok(())
}

/// Leaf similarity of two leaf vectors: matching positions divided by T.
pub fn leaf_similarity(x1: &LeafVector, x2: &LeafVector) -> Result<f64> {
    row_similarity(x1.as_row(), x2.as_row())
}

pub fn row_similarity(x1: LeafRow<'_>, x2: LeafRow<'_>) -> Result<f64> {
    check_dims(x1.len(), x2.len())?;
    if x1.is_empty() {
        return Err(IndexError::Dimension {
            expected: 1,
            actual: 0,
        });
    }
    Ok(f64::from(row_matches(x1, x2)) / x1.len() as f64)
}

// ---------------------------------------------------------------------------
// Bounded top-K selection

/// Best-first key: more matches first, then lower row.
type HitKey = (u32, Reverse<usize>);

#[derive(Debug, Clone)]
struct TopK {
    k: usize,
    heap: BinaryHeap<Reverse<HitKey>>,
}

impl TopK {
    fn new(k: usize) -> Self {
        TopK {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    fn push(&mut self, matches: u32, row: usize) {
        let key = (matches, Reverse(row));
        if self.heap.len() < self.k {
            self.heap.push(Reverse(key));
        } else if let Some(mut worst) = self.heap.peek_mut() {
            if key > worst.0 {
                *worst = Reverse(key);
            }
        }
    }

    /// Lowest match count that could still enter the selection.
    #[inline]
    fn floor(&self) -> Option<u32> {
        (self.heap.len() == self.k).then(|| self.heap.peek().map_or(0, |w| w.0 .0))
    }

    fn merge(mut self, other: TopK) -> TopK {
        for Reverse((m, Reverse(r))) in other.heap {
            self.push(m, r);
        }
        self
    }

    fn into_hits(self, n_trees: usize) -> Vec<QueryHit> {
        let mut keys: Vec<HitKey> = self.heap.into_iter().map(|r| r.0).collect();
        keys.sort_unstable_by(|a, b| b.cmp(a));
        keys.into_iter()
            .map(|(m, Reverse(row))| QueryHit::new(row, m, n_trees))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Index

/// Hex SHA-256 of the encoded leaf matrix an index was built from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Digest(pub String);

impl Digest {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        Digest(hex::encode(sha2::Sha256::digest(bytes)))
    }
}

impl std::fmt::Display for Digest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Query owned in the narrowest representation comparable with the index.
enum QueryBuf {
    U16(Vec<u16>),
    U32(Vec<u32>),
}

impl QueryBuf {
    fn prepare(query: LeafRow<'_>, index_width: LeafWidth) -> Self {
        match (query, index_width) {
            (LeafRow::U16(q), _) => QueryBuf::U16(q.to_vec()),
            (LeafRow::U32(q), LeafWidth::U16) if q.iter().all(|&v| v <= u32::from(u16::MAX)) => {
                QueryBuf::U16(q.iter().map(|&v| v as u16).collect())
            }
            (LeafRow::U32(q), _) => QueryBuf::U32(q.to_vec()),
        }
    }

    fn as_row(&self) -> LeafRow<'_> {
        match self {
            QueryBuf::U16(q) => LeafRow::U16(q),
            QueryBuf::U32(q) => LeafRow::U32(q),
        }
    }
}

/// In-memory exact similarity index over a leaf matrix.
///
/// `row_filter` restricts which rows may be returned (the knowledge base);
/// without it every row is indexable.
#[derive(Debug, Clone)]
pub struct SimIndex {
    matrix: LeafMatrix,
    digest: Digest,
    row_filter: Option<Vec<usize>>,
    shas: Option<Vec<Sha256>>,
    rows_by_sha: HashMap<Sha256, usize>,
}

impl SimIndex {
    /// Indexes an in-memory matrix; the digest covers its canonical encoding.
    pub fn new(matrix: LeafMatrix) -> Self {
        let digest = Digest::of_bytes(&io::encode_leaf_matrix(&matrix));
        Self::with_digest(matrix, digest)
    }

    fn with_digest(matrix: LeafMatrix, digest: Digest) -> Self {
        SimIndex {
            matrix,
            digest,
            row_filter: None,
            shas: None,
            rows_by_sha: HashMap::new(),
        }
    }

    /// Decodes `.lsim` bytes; the digest covers the bytes as given.
    pub fn from_lsim_bytes(bytes: &[u8]) -> Result<Self> {
        let matrix = io::decode_leaf_matrix(bytes)?;
        Ok(Self::with_digest(matrix, Digest::of_bytes(bytes)))
    }

    pub fn open(path: &Path) -> Result<Self> {
        Self::from_lsim_bytes(&io::read_bytes(path)?)
    }

    /// Attaches per-row sample identities. `metas` must be sorted by row and
    /// cover the matrix exactly.
    pub fn with_metadata(mut self, metas: &[SampleMeta]) -> Result<Self> {
        if metas.len() != self.matrix.n_samples() {
            return Err(IndexError::MetaCount {
                meta: metas.len(),
                rows: self.matrix.n_samples(),
            });
        }
        let shas: Vec<Sha256> = metas.iter().map(|m| m.sha256.clone()).collect();
        self.rows_by_sha = shas
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, s)| (s, i))
            .collect();
        self.shas = Some(shas);
        Ok(self)
    }

    /// Restricts results to `rows` (deduplicated and sorted).
    pub fn with_row_filter(mut self, mut rows: Vec<usize>) -> Result<Self> {
        let n = self.matrix.n_samples();
        if let Some(&row) = rows.iter().find(|&&r| r >= n) {
            return Err(IndexError::RowOutOfRange { row, n_samples: n });
        }
        rows.sort_unstable();
        rows.dedup();
        self.row_filter = Some(rows);
        Ok(self)
    }

    pub fn matrix(&self) -> &LeafMatrix {
        &self.matrix
    }

    pub fn n_trees(&self) -> usize {
        self.matrix.n_trees()
    }

    pub fn digest(&self) -> &Digest {
        &self.digest
    }

    /// Rejects use of this index against a source with a different digest.
    pub fn verify_digest(&self, expected: &Digest) -> Result<()> {
        if &self.digest != expected {
            return Err(IndexError::StaleDigest {
                expected: expected.0.clone(),
                actual: self.digest.0.clone(),
            });
        }
        Ok(())
    }

    pub fn sha(&self, row: usize) -> Option<&Sha256> {
        self.shas.as_ref().map(|s| &s[row])
    }

    pub fn row_of(&self, sha: &Sha256) -> Option<usize> {
        self.rows_by_sha.get(sha).copied()
    }

    pub fn n_indexable(&self) -> usize {
        self.row_filter
            .as_ref()
            .map_or(self.matrix.n_samples(), Vec::len)
    }

    fn candidate(&self, pos: usize) -> usize {
        match &self.row_filter {
            Some(rows) => rows[pos],
            None => pos,
        }
    }

    fn effective_len(&self, exclude: &[usize]) -> usize {
        let excluded = match &self.row_filter {
            Some(rows) => exclude
                .iter()
                .filter(|r| rows.binary_search(r).is_ok())
                .count(),
            None => exclude
                .iter()
                .filter(|&&r| r < self.matrix.n_samples())
                .count(),
        };
        self.n_indexable() - excluded
    }

    /// Exact top-`k` rows for one query, best first. Rows in `exclude` are
    /// never returned.
    pub fn top_k(&self, query: LeafRow<'_>, k: usize, exclude: &[usize]) -> Result<Vec<QueryHit>> {
        let mut exclude = exclude.to_vec();
        exclude.sort_unstable();
        exclude.dedup();
        let mut out = self.scan(&[query], &[exclude], k)?;
        Ok(out.pop().unwrap_or_default())
    }

    /// Top-`k` for every row of `queries`. With `exclude_self_by_sha`, an
    /// index row whose sha256 equals the query's is dropped before the
    /// truncation to `k`.
    pub fn top_k_batch(
        &self,
        queries: &LeafMatrix,
        query_shas: Option<&[Sha256]>,
        k: usize,
        exclude_self_by_sha: bool,
    ) -> Result<Vec<Vec<QueryHit>>> {
        if let Some(shas) = query_shas {
            if shas.len() != queries.n_samples() {
                return Err(IndexError::QueryShaCount {
                    shas: shas.len(),
                    queries: queries.n_samples(),
                });
            }
        }
        let excludes: Vec<Vec<usize>> = if exclude_self_by_sha {
            let shas = query_shas.ok_or(IndexError::MissingShas)?;
            if self.shas.is_none() {
                return Err(IndexError::MissingShas);
            }
            shas.iter()
                .map(|s| self.row_of(s).into_iter().collect())
                .collect()
        } else {
            vec![Vec::new(); queries.n_samples()]
        };
        let rows: Vec<LeafRow<'_>> = queries.rows().collect();
        self.scan(&rows, &excludes, k)
    }

    /// Queries with rows of the indexed matrix itself.
    pub fn top_k_rows(
        &self,
        query_rows: &[usize],
        k: usize,
        exclude_self_by_sha: bool,
    ) -> Result<Vec<Vec<QueryHit>>> {
        let n = self.matrix.n_samples();
        if let Some(&row) = query_rows.iter().find(|&&r| r >= n) {
            return Err(IndexError::RowOutOfRange { row, n_samples: n });
        }
        let excludes: Vec<Vec<usize>> = if exclude_self_by_sha {
            let shas = self.shas.as_ref().ok_or(IndexError::MissingShas)?;
            query_rows
                .iter()
                .map(|&r| vec![self.rows_by_sha[&shas[r]]])
                .collect()
        } else {
            vec![Vec::new(); query_rows.len()]
        };
        let rows: Vec<LeafRow<'_>> = query_rows.iter().map(|&r| self.matrix.row(r)).collect();
        self.scan(&rows, &excludes, k)
    }

    fn scan(
        &self,
        queries: &[LeafRow<'_>],
        excludes: &[Vec<usize>],
        k: usize,
    ) -> Result<Vec<Vec<QueryHit>>> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        let t = self.n_trees();
        for q in queries {
            check_dims(t, q.len())?;
        }
        for (index, ex) in excludes.iter().enumerate() {
            if self.effective_len(ex) == 0 {
                let err = IndexError::EmptyIndex;
                return Err(if queries.len() == 1 {
                    err
                } else {
                    IndexError::Query {
                        index,
                        source: Box::new(err),
                    }
                });
            }
        }

        let width = self.matrix.width();
        let mut results = Vec::with_capacity(queries.len());
        for (qblock, exblock) in queries
            .chunks(QUERY_BLOCK)
            .zip(excludes.chunks(QUERY_BLOCK))
        {
            let bufs: Vec<QueryBuf> = qblock
                .iter()
                .map(|q| QueryBuf::prepare(*q, width))
                .collect();
            let block = self.scan_block(&bufs, exblock, k);
            results.extend(block.into_iter().map(|top| top.into_hits(t)));
        }
        Ok(results)
    }

    fn scan_block(&self, queries: &[QueryBuf], excludes: &[Vec<usize>], k: usize) -> Vec<TopK> {
        let n = self.n_indexable();
        let n_chunks = n.div_ceil(ROW_CHUNK);
        let empty = || vec![TopK::new(k); queries.len()];

        (0..n_chunks)
            .into_par_iter()
            .map(|c| {
                let mut tops = empty();
                let end = ((c + 1) * ROW_CHUNK).min(n);
                for pos in c * ROW_CHUNK..end {
                    let row = self.candidate(pos);
                    let leaves = self.matrix.row(row);
                    for ((q, top), ex) in queries.iter().zip(&mut tops).zip(excludes) {
                        if !ex.is_empty() && ex.binary_search(&row).is_ok() {
                            continue;
                        }
                        let m = row_matches(q.as_row(), leaves);
                        if top.floor().is_some_and(|f| m < f) {
                            continue;
                        }
                        top.push(m, row);
                    }
                }
                tops
            })
            .reduce(empty, |a, b| {
                a.into_iter().zip(b).map(|(x, y)| x.merge(y)).collect()
            })
    }
}

/// Reference top-`k`: scores every row one position at a time, then sorts
/// the full candidate list by (score desc, row asc).
pub fn oracle_top_k(
    matrix: &LeafMatrix,
    query: &LeafVector,
    k: usize,
    exclude: &[usize],
) -> Result<Vec<QueryHit>> {
    if k == 0 {
        return Err(IndexError::ZeroK);
    }
    let t = matrix.n_trees();
    check_dims(t, query.len())?;
    let mut all: Vec<QueryHit> = Vec::new();
    for row in 0..matrix.n_samples() {
        if exclude.contains(&row) {
            continue;
        }
        let mut agree = 0u32;
        for tree in 0..t {
            if matrix.get(row, tree) == query.0[tree] {
                agree += 1;
            }
        }
        all.push(QueryHit::new(row, agree, t));
    }
    if all.is_empty() {
        return Err(IndexError::EmptyIndex);
    }
    all.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.row.cmp(&b.row)));
    all.truncate(k);
    Ok(all)
}

// ---------------------------------------------------------------------------
// Persisted index manifest

pub const MANIFEST_FORMAT: &str = "leafsim-index";

/// On-disk description of an index: source files plus the digests that bind
/// the index to them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub format: String,
    pub version: u32,
    pub leaves: PathBuf,
    pub meta: PathBuf,
    pub leaves_digest: Digest,
    pub meta_digest: Digest,
    pub n_samples: u64,
    pub n_trees: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub created_unix: Option<u64>,
}

impl IndexManifest {
    /// Validates both inputs and records their digests.
    pub fn build(leaves: &Path, meta: &Path) -> Result<(Self, SimIndex)> {
        let index = SimIndex::open(leaves)?;
        let meta_bytes = io::read_bytes(meta)?;
        let metas = io::parse_sample_meta(&String::from_utf8_lossy(&meta_bytes))?;
        let index = index.with_metadata(&metas)?;
        let manifest = IndexManifest {
            format: MANIFEST_FORMAT.to_string(),
            version: 1,
            leaves: leaves.to_path_buf(),
            meta: meta.to_path_buf(),
            leaves_digest: index.digest().clone(),
            meta_digest: Digest::of_bytes(&meta_bytes),
            n_samples: index.matrix().n_samples() as u64,
            n_trees: index.n_trees() as u32,
            created_unix: None,
        };
        Ok((manifest, index))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = io::read_text(path)?;
        let manifest: IndexManifest =
            serde_json::from_str(&text).map_err(|e| IndexError::Manifest {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })?;
        if manifest.format != MANIFEST_FORMAT || manifest.version != 1 {
            return Err(IndexError::Manifest {
                path: path.to_path_buf(),
                msg: format!(
                    "unsupported format {} v{}",
                    manifest.format, manifest.version
                ),
            });
        }
        Ok(manifest)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    /// Reopens the index, rejecting sources whose digests changed. Relative
    /// source paths resolve against `base`.
    pub fn open(&self, base: &Path) -> Result<(SimIndex, Vec<SampleMeta>)> {
        let resolve = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let index = SimIndex::open(&resolve(&self.leaves))?;
        index.verify_digest(&self.leaves_digest)?;
        let meta_bytes = io::read_bytes(&resolve(&self.meta))?;
        let meta_digest = Digest::of_bytes(&meta_bytes);
        if meta_digest != self.meta_digest {
            return Err(IndexError::StaleDigest {
                expected: self.meta_digest.0.clone(),
                actual: meta_digest.0,
            });
        }
        let metas = io::parse_sample_meta(&String::from_utf8_lossy(&meta_bytes))?;
        let index = index.with_metadata(&metas)?;
        Ok((index, metas))
    }
}
