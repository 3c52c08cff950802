//! Readers and writers for the on-disk formats.
//!
//! * `.lsim` leaf matrices (little-endian binary, fixed 24-byte header)
//! * `.meta.jsonl` sample metadata
//! * AVClass plain-text tag lines and the EMBER single-family sidecar
//! * `.cooc.csv` co-occurrence counts
//! * JSON-lines outputs for enrichment, rankings and query hits

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    CoocTable, EnrichedTags, Label, LeafMatrix, LeafWidth, ModelError, SampleMeta, ScoredTagList,
    Sha256, Subset, Tag, TagKind, TagParseError, TagRanking, YearMonth,
};

pub const LSIM_MAGIC: &[u8; 4] = b"LSIM";
pub const LSIM_VERSION: u32 = 1;
pub const LSIM_HEADER_LEN: usize = 24;

pub const COOC_HEADER: [&str; 5] = ["tag_a", "tag_b", "count_a", "count_b", "count_ab"];

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic {0:?}, expected \"LSIM\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("invalid leaf width {0} bytes, expected 2 or 4")]
    BadWidth(u8),
    #[error("reserved header bytes must be zero")]
    BadReserved,
    #[error("truncated leaf matrix: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("trailing bytes after leaf matrix payload: expected {expected} bytes, found {actual}")]
    TrailingBytes { expected: u64, actual: u64 },
    #[error("leaf index {value} at row {row}, tree {tree} does not fit in {width} bytes")]
    Overflow {
        row: usize,
        tree: usize,
        value: u32,
        width: usize,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: duplicate {what} {key}")]
    Duplicate {
        line: usize,
        what: &'static str,
        key: String,
    },
    #[error("line {line}: {source}")]
    Validation { line: usize, source: ModelError },
    #[error("line {line}: count_ab {count_ab} exceeds min(count_a, count_b) = {bound}")]
    Consistency {
        line: usize,
        count_ab: u64,
        bound: u64,
    },
    #[error("{0}")]
    Model(#[from] ModelError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("cannot encode {0}")]
    Encode(String),
}

pub type Result<T> = std::result::Result<T, IoError>;

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(file_err(path))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(file_err(path))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(file_err(path))?;
    f.write_all(bytes).map_err(file_err(path))
}

fn parse_err(line: usize, msg: impl Into<String>) -> IoError {
    IoError::Parse {
        line,
        msg: msg.into(),
    }
}

fn tag_err(line: usize) -> impl Fn(TagParseError) -> IoError {
    move |e| parse_err(line, e.to_string())
}

/// Non-blank lines with 1-based line numbers.
fn numbered_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

// ---------------------------------------------------------------------------
// Leaf matrices

/// Encodes at the narrowest width that holds every index.
pub fn encode_leaf_matrix(matrix: &LeafMatrix) -> Vec<u8> {
    let width = LeafWidth::for_max(matrix.max_leaf());
    encode_leaf_matrix_with_width(matrix, width).expect("auto-selected width always fits")
}

pub fn encode_leaf_matrix_with_width(matrix: &LeafMatrix, width: LeafWidth) -> Result<Vec<u8>> {
    let n = matrix.n_samples();
    let t = matrix.n_trees();
    let mut out = Vec::with_capacity(LSIM_HEADER_LEN + n * t * width.bytes());
    out.extend_from_slice(LSIM_MAGIC);
    out.extend_from_slice(&LSIM_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    let t32 = u32::try_from(t).map_err(|_| IoError::Encode(format!("{t} trees")))?;
    out.extend_from_slice(&t32.to_le_bytes());
    out.push(width.bytes() as u8);
    out.extend_from_slice(&[0u8; 3]);

    for (i, row) in matrix.rows().enumerate() {
        for (j, v) in row.iter().enumerate() {
            match width {
                LeafWidth::U16 => {
                    let v16 = u16::try_from(v).map_err(|_| IoError::Overflow {
                        row: i,
                        tree: j,
                        value: v,
                        width: 2,
                    })?;
                    out.extend_from_slice(&v16.to_le_bytes());
                }
                LeafWidth::U32 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    Ok(out)
}

pub fn decode_leaf_matrix(bytes: &[u8]) -> Result<LeafMatrix> {
    if bytes.len() < LSIM_HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != LSIM_MAGIC {
            return Err(IoError::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(IoError::Truncated {
            expected: LSIM_HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if &magic != LSIM_MAGIC {
        return Err(IoError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != LSIM_VERSION {
        return Err(IoError::BadVersion(version));
    }
    let n_samples = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let n_trees = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
    let width = match bytes[20] {
        2 => LeafWidth::U16,
        4 => LeafWidth::U32,
        other => return Err(IoError::BadWidth(other)),
    };
    if bytes[21..24] != [0, 0, 0] {
        return Err(IoError::BadReserved);
    }

    let payload = &bytes[LSIM_HEADER_LEN..];
    let expected = n_samples
        .checked_mul(u64::from(n_trees))
        .and_then(|c| c.checked_mul(width.bytes() as u64))
        .ok_or(IoError::Encode(format!(
            "header {n_samples}x{n_trees} overflows"
        )))?;
    let actual = payload.len() as u64;
    if actual < expected {
        return Err(IoError::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(IoError::TrailingBytes { expected, actual });
    }

    let (n, t) = (n_samples as usize, n_trees as usize);
    let matrix = match width {
        LeafWidth::U16 => LeafMatrix::from_u16(
            n,
            t,
            payload
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect(),
        )?,
        LeafWidth::U32 => LeafMatrix::from_u32(
            n,
            t,
            payload
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        )?,
    };
    Ok(matrix)
}

pub fn read_leaf_matrix(path: &Path) -> Result<LeafMatrix> {
    decode_leaf_matrix(&read_bytes(path)?)
}

pub fn write_leaf_matrix(matrix: &LeafMatrix, path: &Path) -> Result<()> {
    write_bytes(path, &encode_leaf_matrix(matrix))
}

// ---------------------------------------------------------------------------
// Sample metadata

#[derive(Debug, Serialize, Deserialize)]
struct MetaLine {
    row: usize,
    sha256: String,
    label: i64,
    subset: String,
    appeared: Option<String>,
}

pub fn parse_sample_meta(text: &str) -> Result<Vec<SampleMeta>> {
    let mut metas: Vec<SampleMeta> = Vec::new();
    let mut rows = HashSet::new();
    let mut shas = HashSet::new();
    for (line, l) in numbered_lines(text) {
        let rec: MetaLine = serde_json::from_str(l).map_err(|e| parse_err(line, e.to_string()))?;
        fn valid<T>(line: usize, r: std::result::Result<T, ModelError>) -> Result<T> {
            r.map_err(|source| IoError::Validation { line, source })
        }
        let sha = valid(line, Sha256::parse(&rec.sha256))?;
        let label = valid(line, Label::from_code(rec.label))?;
        let subset: Subset = valid(line, rec.subset.parse())?;
        let appeared = rec
            .appeared
            .as_deref()
            .map(str::parse::<YearMonth>)
            .transpose();
        let meta = valid(
            line,
            SampleMeta::new(rec.row, sha, label, subset, valid(line, appeared)?),
        )?;
        if !rows.insert(meta.row) {
            return Err(IoError::Duplicate {
                line,
                what: "row",
                key: meta.row.to_string(),
            });
        }
        if !shas.insert(meta.sha256.clone()) {
            return Err(IoError::Duplicate {
                line,
                what: "sha256",
                key: meta.sha256.to_string(),
            });
        }
        metas.push(meta);
    }
    metas.sort_by_key(|m| m.row);
    if let Some((i, m)) = metas.iter().enumerate().find(|(i, m)| m.row != *i) {
        return Err(parse_err(
            0,
            format!(
                "rows must cover 0..{} without gaps; row {i} is missing (next is {})",
                metas.len(),
                m.row
            ),
        ));
    }
    Ok(metas)
}

pub fn render_sample_meta(metas: &[SampleMeta]) -> String {
    let mut out = String::new();
    for m in metas {
        let line = MetaLine {
            row: m.row,
            sha256: m.sha256.to_string(),
            label: i64::from(m.label.code()),
            subset: m.subset.to_string(),
            appeared: m.appeared.map(|a| a.to_string()),
        };
        out.push_str(&serde_json::to_string(&line).expect("meta serializes"));
        out.push('\n');
    }
    out
}

pub fn read_sample_meta(path: &Path) -> Result<Vec<SampleMeta>> {
    parse_sample_meta(&read_text(path)?)
}

pub fn write_sample_meta(metas: &[SampleMeta], path: &Path) -> Result<()> {
    write_bytes(path, render_sample_meta(metas).as_bytes())
}

// ---------------------------------------------------------------------------
// AVClass output

/// Parses AVClass lines: `SHA256 DETECTIONS tag|score,...` or `SHA256 NULL`.
pub fn parse_avclass(text: &str) -> Result<BTreeMap<Sha256, ScoredTagList>> {
    let mut out = BTreeMap::new();
    for (line, l) in numbered_lines(text) {
        let mut fields = l.split_whitespace();
        let sha = fields.next().unwrap_or_default();
        let sha = Sha256::parse(sha).map_err(|source| IoError::Validation { line, source })?;
        let det = fields
            .next()
            .ok_or_else(|| parse_err(line, "missing detection count"))?;
        let tags_field = fields.next();
        if fields.next().is_some() {
            return Err(parse_err(line, "unexpected trailing fields"));
        }

        let list = if det == "NULL" {
            if tags_field.is_some() {
                return Err(parse_err(line, "NULL detections cannot carry tags"));
            }
            ScoredTagList::empty()
        } else {
            let detections: u32 = det
                .parse()
                .map_err(|_| parse_err(line, format!("invalid detection count {det:?}")))?;
            let mut tags = Vec::new();
            for token in tags_field
                .unwrap_or("")
                .split(',')
                .filter(|t| !t.is_empty())
            {
                let (tag, score) = token
                    .rsplit_once('|')
                    .ok_or_else(|| parse_err(line, format!("tag token {token:?} has no score")))?;
                let tag = Tag::parse(tag).map_err(tag_err(line))?;
                let score: u32 = score.parse().map_err(|_| {
                    parse_err(line, format!("invalid score {score:?} in token {token:?}"))
                })?;
                tags.push((tag, score));
            }
            ScoredTagList::new(tags, Some(detections))
                .map_err(|source| IoError::Validation { line, source })?
        };

        if out.insert(sha.clone(), list).is_some() {
            return Err(IoError::Duplicate {
                line,
                what: "sha256",
                key: sha.to_string(),
            });
        }
    }
    Ok(out)
}

pub fn render_avclass(tags: &BTreeMap<Sha256, ScoredTagList>) -> Result<String> {
    let mut out = String::new();
    for (sha, list) in tags {
        match list.detections() {
            None if list.is_empty() => out.push_str(&format!("{sha} NULL\n")),
            None => {
                return Err(IoError::Encode(format!(
                    "{sha}: tags without a detection count"
                )))
            }
            Some(d) => {
                let rendered: Vec<String> = list
                    .tags()
                    .iter()
                    .map(|(t, s)| format!("{t}|{s}"))
                    .collect();
                if rendered.is_empty() {
                    out.push_str(&format!("{sha} {d}\n"));
                } else {
                    out.push_str(&format!("{sha} {d} {}\n", rendered.join(",")));
                }
            }
        }
    }
    Ok(out)
}

pub fn read_avclass(path: &Path) -> Result<BTreeMap<Sha256, ScoredTagList>> {
    parse_avclass(&read_text(path)?)
}

/// Parses the EMBER-2018 single-family column: `SHA256 family` per line.
/// A missing or empty family leaves the sample out. Families are kind FAM.
pub fn parse_prev_families(text: &str) -> Result<BTreeMap<Sha256, Tag>> {
    let mut out = BTreeMap::new();
    for (line, l) in numbered_lines(text) {
        let mut fields = l.split_whitespace();
        let sha = Sha256::parse(fields.next().unwrap_or_default())
            .map_err(|source| IoError::Validation { line, source })?;
        let Some(family) = fields.next() else {
            continue;
        };
        if fields.next().is_some() {
            return Err(parse_err(line, "unexpected trailing fields"));
        }
        let family = family.strip_prefix("FAM:").unwrap_or(family);
        let tag = Tag::new(TagKind::Fam, family).map_err(tag_err(line))?;
        if out.insert(sha.clone(), tag).is_some() {
            return Err(IoError::Duplicate {
                line,
                what: "sha256",
                key: sha.to_string(),
            });
        }
    }
    Ok(out)
}

pub fn read_prev_families(path: &Path) -> Result<BTreeMap<Sha256, Tag>> {
    parse_prev_families(&read_text(path)?)
}

// ---------------------------------------------------------------------------
// Co-occurrence tables

/// Reads a co-occurrence CSV. Diagonal rows (`tag_a == tag_b`) carry the
/// frequency of tags that may not appear in any pair; pair rows in either
/// orientation are canonicalized.
pub fn parse_cooc_csv(text: &str) -> Result<CoocTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = rdr.headers()?.clone();
    if header.iter().map(str::trim).ne(COOC_HEADER) {
        return Err(parse_err(
            1,
            format!("expected header {}", COOC_HEADER.join(",")),
        ));
    }

    let mut freq: BTreeMap<Tag, u64> = BTreeMap::new();
    let mut joint: Vec<((Tag, Tag), u64)> = Vec::new();
    let mut seen_pairs = HashSet::new();

    let mut set_freq = |tag: &Tag, count: u64, line: usize| -> Result<()> {
        match freq.insert(tag.clone(), count) {
            Some(prev) if prev != count => Err(parse_err(
                line,
                format!("{tag} has frequency {count} but an earlier row says {prev}"),
            )),
            _ => Ok(()),
        }
    };

    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        if rec.len() != 5 {
            return Err(parse_err(
                line,
                format!("expected 5 columns, found {}", rec.len()),
            ));
        }
        let a = Tag::parse(&rec[0]).map_err(tag_err(line))?;
        let b = Tag::parse(&rec[1]).map_err(tag_err(line))?;
        let count = |j: usize| -> Result<u64> {
            rec[j]
                .trim()
                .parse::<u64>()
                .map_err(|_| parse_err(line, format!("invalid {} {:?}", COOC_HEADER[j], &rec[j])))
        };
        let (ca, cb, cab) = (count(2)?, count(3)?, count(4)?);
        if ca == 0 || cb == 0 || cab == 0 {
            return Err(parse_err(line, "counts must be >= 1"));
        }
        if cab > ca.min(cb) {
            return Err(IoError::Consistency {
                line,
                count_ab: cab,
                bound: ca.min(cb),
            });
        }
        if a == b {
            if ca != cb || cb != cab {
                return Err(parse_err(line, "diagonal row must repeat one count"));
            }
            set_freq(&a, ca, line)?;
            continue;
        }
        set_freq(&a, ca, line)?;
        set_freq(&b, cb, line)?;
        let key = if a < b { (a, b) } else { (b, a) };
        if !seen_pairs.insert(key.clone()) {
            return Err(IoError::Duplicate {
                line,
                what: "pair",
                key: format!("{},{}", key.0, key.1),
            });
        }
        joint.push((key, cab));
    }
    Ok(CoocTable::new(freq, joint)?)
}

/// Writes one diagonal row per tag followed by one row per canonical pair,
/// each group in ascending tag order.
pub fn render_cooc_csv(table: &CoocTable) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(COOC_HEADER)?;
    for (tag, &n) in table.tag_freq() {
        let (t, n) = (tag.to_string(), n.to_string());
        wtr.write_record([&t, &t, &n, &n, &n])?;
    }
    for (a, b, stat) in table.pair_stats() {
        wtr.write_record([
            a.to_string(),
            b.to_string(),
            stat.count_a.to_string(),
            stat.count_b.to_string(),
            stat.count_ab.to_string(),
        ])?;
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| IoError::Encode(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn read_cooc_table(path: &Path) -> Result<CoocTable> {
    parse_cooc_csv(&read_text(path)?)
}

pub fn write_cooc_table(table: &CoocTable, path: &Path) -> Result<()> {
    write_bytes(path, render_cooc_csv(table)?.as_bytes())
}

// ---------------------------------------------------------------------------
// JSON-lines outputs

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AddedTag {
    src: String,
    tag: String,
    freq: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EnrichmentLine {
    sha256: String,
    added: Vec<AddedTag>,
}

pub fn render_enrichment_line(sha: &Sha256, enriched: &EnrichedTags) -> String {
    let line = EnrichmentLine {
        sha256: sha.to_string(),
        added: enriched
            .iter()
            .map(|(s, t, f)| AddedTag {
                src: s.to_string(),
                tag: t.to_string(),
                freq: f,
            })
            .collect(),
    };
    serde_json::to_string(&line).expect("enrichment serializes")
}

pub fn parse_enrichments(text: &str) -> Result<BTreeMap<Sha256, EnrichedTags>> {
    let mut out = BTreeMap::new();
    for (line, l) in numbered_lines(text) {
        let rec: EnrichmentLine =
            serde_json::from_str(l).map_err(|e| parse_err(line, e.to_string()))?;
        let sha =
            Sha256::parse(&rec.sha256).map_err(|source| IoError::Validation { line, source })?;
        let mut enriched = EnrichedTags::new();
        for a in rec.added {
            if !(0.0..=1.0).contains(&a.freq) {
                return Err(parse_err(
                    line,
                    format!("frequency {} outside [0, 1]", a.freq),
                ));
            }
            enriched.insert_max(
                Tag::parse(&a.src).map_err(tag_err(line))?,
                Tag::parse(&a.tag).map_err(tag_err(line))?,
                a.freq,
            );
        }
        if out.insert(sha.clone(), enriched).is_some() {
            return Err(IoError::Duplicate {
                line,
                what: "sha256",
                key: sha.to_string(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RankedTag {
    tag: String,
    score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RankingLine {
    sha256: String,
    kind: String,
    ranking: Vec<RankedTag>,
}

pub fn render_ranking_line(sha: &Sha256, ranking: &TagRanking) -> String {
    let line = RankingLine {
        sha256: sha.to_string(),
        kind: ranking.kind().to_string(),
        ranking: ranking
            .ranked()
            .iter()
            .map(|(t, s)| RankedTag {
                tag: t.to_string(),
                score: *s,
            })
            .collect(),
    };
    serde_json::to_string(&line).expect("ranking serializes")
}

pub fn parse_rankings(text: &str) -> Result<BTreeMap<Sha256, TagRanking>> {
    let mut out = BTreeMap::new();
    for (line, l) in numbered_lines(text) {
        let rec: RankingLine =
            serde_json::from_str(l).map_err(|e| parse_err(line, e.to_string()))?;
        let sha =
            Sha256::parse(&rec.sha256).map_err(|source| IoError::Validation { line, source })?;
        let kind: TagKind = rec.kind.parse().map_err(tag_err(line))?;
        let ranked = rec
            .ranking
            .into_iter()
            .map(|r| Ok((Tag::parse(&r.tag).map_err(tag_err(line))?, r.score)))
            .collect::<Result<Vec<_>>>()?;
        let ranking =
            TagRanking::new(kind, ranked).map_err(|source| IoError::Validation { line, source })?;
        if out.insert(sha.clone(), ranking).is_some() {
            return Err(IoError::Duplicate {
                line,
                what: "sha256",
                key: sha.to_string(),
            });
        }
    }
    Ok(out)
}

/// One hit as written to query output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitRecord {
    pub sha: Option<String>,
    pub score: f64,
    pub label: Option<i8>,
}

/// One query's hits as written to query output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_sha: Option<String>,
    pub hits: Vec<HitRecord>,
}

pub fn render_query_line(rec: &QueryRecord) -> String {
    serde_json::to_string(rec).expect("query record serializes")
}

pub fn parse_query_records(text: &str) -> Result<Vec<QueryRecord>> {
    numbered_lines(text)
        .map(|(line, l)| serde_json::from_str(l).map_err(|e| parse_err(line, e.to_string())))
        .collect()
}
