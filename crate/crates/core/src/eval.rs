//! Retrieval evaluation: label homogeneity of top-K hits, relevance@K of tag
//! rankings under exact match, IoU and normalized edit similarity, mean
//! average precision, and the summary statistics reported for each.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Label, SampleMeta, Subset, TagRanking};

/// Percentiles reported for every group, in this order.
pub const PERCENTILES: [u32; 4] = [1, 10, 50, 95];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("nothing to aggregate")]
    Empty,
    #[error("{scores} scores but {labels} group labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error(
        "query {query}: relevance {value} is not binary; average precision needs 0/1 relevance"
    )]
    NonBinary { query: usize, value: f64 },
    #[error("scenario {scenario} has no {side} rows")]
    EmptyScenario {
        scenario: ScenarioKind,
        side: &'static str,
    },
    #[error("unknown {what} {value:?}")]
    UnknownName { what: &'static str, value: String },
}

pub type Result<T> = std::result::Result<T, EvalError>;

// ---------------------------------------------------------------------------
// Relevance functions

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelevanceFn {
    Em,
    Iou,
    Nes,
}

impl RelevanceFn {
    pub fn apply(self, a: &TagRanking, b: &TagRanking) -> f64 {
        match self {
            RelevanceFn::Em => relevance_em(a, b),
            RelevanceFn::Iou => relevance_iou(a, b),
            RelevanceFn::Nes => relevance_nes(a, b),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RelevanceFn::Em => "em",
            RelevanceFn::Iou => "iou",
            RelevanceFn::Nes => "nes",
        }
    }
}

impl fmt::Display for RelevanceFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RelevanceFn {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "em" => Ok(RelevanceFn::Em),
            "iou" => Ok(RelevanceFn::Iou),
            "nes" => Ok(RelevanceFn::Nes),
            _ => Err(EvalError::UnknownName {
                what: "relevance function",
                value: s.to_string(),
            }),
        }
    }
}

/// 1 when both rankings list the same tag names in the same order.
pub fn relevance_em(a: &TagRanking, b: &TagRanking) -> f64 {
    if a.names() == b.names() {
        1.0
    } else {
        0.0
    }
}

/// Jaccard index of the two tag-name sets; 1 when both are empty.
pub fn relevance_iou(a: &TagRanking, b: &TagRanking) -> f64 {
    let sa: HashSet<&str> = a.names().into_iter().collect();
    let sb: HashSet<&str> = b.names().into_iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// `1 - DL(a, b) / max(|a|, |b|)` over the tag-name sequences, with DL the
/// optimal-string-alignment Damerau-Levenshtein distance.
pub fn relevance_nes(a: &TagRanking, b: &TagRanking) -> f64 {
    let (na, nb) = (a.names(), b.names());
    let longest = na.len().max(nb.len());
    if longest == 0 {
        return 1.0;
    }
    1.0 - osa_distance(&na, &nb) as f64 / longest as f64
}

/// Optimal string alignment distance: unit-cost insertions, deletions,
/// substitutions and transpositions of adjacent elements, with no element
/// edited more than once.
pub fn osa_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (n, m) = (a.len(), b.len());
    if n == 0 {
        return m;
    }
    if m == 0 {
        return n;
    }
    // Three rolling rows: i-2, i-1, i.
    let mut prev2: Vec<usize> = vec![0; m + 1];
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur: Vec<usize> = vec![0; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            let mut d = (prev[j] + 1).min(cur[j - 1] + 1).min(prev[j - 1] + cost);
            if i > 1 && j > 1 && a[i - 1] == b[j - 2] && a[i - 2] == b[j - 1] {
                d = d.min(prev2[j - 2] + 1);
            }
            cur[j] = d;
        }
        std::mem::swap(&mut prev2, &mut prev);
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Relevance of each hit to the query. A missing tag list marks a sample as
/// benign: two missing lists are fully relevant, exactly one missing list is
/// irrelevant, otherwise `f` decides.
pub fn relevance_at_k(
    query: Option<&TagRanking>,
    hits: &[Option<&TagRanking>],
    f: RelevanceFn,
) -> Vec<f64> {
    hits.iter()
        .map(|hit| match (query, hit) {
            (None, None) => 1.0,
            (Some(_), None) | (None, Some(_)) => 0.0,
            (Some(q), Some(h)) => f.apply(q, h),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Average precision

/// AP over one ranked hit list with binary relevance. The denominator is the
/// number of relevant hits in the list; a list with none scores 0.
pub fn average_precision(rels: &[f64]) -> std::result::Result<f64, f64> {
    let mut relevant = 0u32;
    let mut sum = 0.0;
    for (i, &r) in rels.iter().enumerate() {
        if r == 1.0 {
            relevant += 1;
            sum += f64::from(relevant) / (i + 1) as f64;
        } else if r != 0.0 {
            return Err(r);
        }
    }
    Ok(if relevant == 0 {
        0.0
    } else {
        sum / f64::from(relevant)
    })
}

pub fn mean_average_precision(relevances_per_query: &[Vec<f64>]) -> Result<f64> {
    if relevances_per_query.is_empty() {
        return Err(EvalError::Empty);
    }
    let aps = average_precisions(relevances_per_query)?;
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

fn average_precisions(relevances_per_query: &[Vec<f64>]) -> Result<Vec<f64>> {
    relevances_per_query
        .iter()
        .enumerate()
        .map(|(query, rels)| {
            average_precision(rels).map_err(|value| EvalError::NonBinary { query, value })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Aggregation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Nearest-rank percentiles at [`PERCENTILES`].
    pub percentiles: Vec<f64>,
}

impl GroupStats {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(EvalError::Empty);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let percentiles = PERCENTILES
            .iter()
            .map(|&p| sorted[nearest_rank(p, sorted.len()) - 1])
            .collect();
        Ok(GroupStats {
            count: values.len(),
            mean,
            std: var.sqrt(),
            percentiles,
        })
    }
}

/// 1-based nearest rank `ceil(p / 100 * n)`, at least 1.
pub fn nearest_rank(percent: u32, n: usize) -> usize {
    let rank = (percent as usize * n).div_ceil(100);
    rank.clamp(1, n)
}

/// Summary statistics per query label plus an `all` group.
pub type GroupReport = BTreeMap<String, GroupStats>;

pub fn aggregate_report(per_query_scores: &[f64], group_labels: &[Label]) -> Result<GroupReport> {
    if per_query_scores.len() != group_labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: per_query_scores.len(),
            labels: group_labels.len(),
        });
    }
    if per_query_scores.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut groups: BTreeMap<Label, Vec<f64>> = BTreeMap::new();
    for (&s, &l) in per_query_scores.iter().zip(group_labels) {
        groups.entry(l).or_default().push(s);
    }
    let mut report = GroupReport::new();
    for (label, values) in groups {
        report.insert(label.as_str().to_string(), GroupStats::of(&values)?);
    }
    report.insert("all".to_string(), GroupStats::of(per_query_scores)?);
    Ok(report)
}

// ---------------------------------------------------------------------------
// Label homogeneity

/// Same-label hit counts per evaluated query.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Homogeneity {
    pub counts: Vec<f64>,
    pub labels: Vec<Label>,
    /// Indices (into the input) of queries with fewer than K hits.
    pub truncated: Vec<usize>,
    /// Indices of unlabeled queries, which are left out.
    pub excluded: Vec<usize>,
}

impl Homogeneity {
    pub fn report(&self) -> Result<GroupReport> {
        aggregate_report(&self.counts, &self.labels)
    }
}

/// Counts, for each query, how many of its first `k` hits share its label.
pub fn label_homogeneity(
    query_labels: &[Label],
    hit_labels: &[Vec<Label>],
    k: usize,
) -> Homogeneity {
    let mut out = Homogeneity::default();
    for (i, (&ql, hits)) in query_labels.iter().zip(hit_labels).enumerate() {
        if ql == Label::Unlabeled {
            out.excluded.push(i);
            continue;
        }
        if hits.len() < k {
            out.truncated.push(i);
        }
        let same = hits.iter().take(k).filter(|&&h| h == ql).count();
        out.counts.push(same as f64);
        out.labels.push(ql);
    }
    if !out.excluded.is_empty() {
        warn!(
            "{} unlabeled queries excluded from label homogeneity",
            out.excluded.len()
        );
    }
    if !out.truncated.is_empty() {
        warn!("{} queries have fewer than {k} hits", out.truncated.len());
    }
    out
}

// ---------------------------------------------------------------------------
// Relevance@K protocol

/// How per-hit relevance is reduced before aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    /// One value per query: its mean relevance over the K hits.
    #[default]
    PerQuery,
    /// Every (query, hit) relevance counts individually.
    Pooled,
}

/// Everything relevance@K needs to know about one query.
#[derive(Debug, Clone)]
pub struct QueryTags<'a> {
    pub label: Label,
    pub ranking: Option<&'a TagRanking>,
    pub hits: Vec<Option<&'a TagRanking>>,
}

/// Relevance@K grouped by query label.
pub fn relevance_report(
    queries: &[QueryTags<'_>],
    f: RelevanceFn,
    k: usize,
    pooling: Pooling,
) -> Result<GroupReport> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut short = 0usize;
    for q in queries {
        let hits = &q.hits[..q.hits.len().min(k)];
        if hits.len() < k {
            short += 1;
        }
        if hits.is_empty() {
            continue;
        }
        let rel = relevance_at_k(q.ranking, hits, f);
        match pooling {
            Pooling::PerQuery => {
                scores.push(rel.iter().sum::<f64>() / rel.len() as f64);
                labels.push(q.label);
            }
            Pooling::Pooled => {
                labels.extend(std::iter::repeat_n(q.label, rel.len()));
                scores.extend(rel);
            }
        }
    }
    if short > 0 {
        warn!("{short} queries have fewer than {k} hits");
    }
    aggregate_report(&scores, &labels)
}

/// Average precision per query under exact-match relevance, grouped by
/// query label; each group's mean is its mAP.
pub fn map_report(queries: &[QueryTags<'_>], k: usize) -> Result<GroupReport> {
    let rels: Vec<Vec<f64>> = queries
        .iter()
        .map(|q| relevance_at_k(q.ranking, &q.hits[..q.hits.len().min(k)], RelevanceFn::Em))
        .collect();
    let aps = average_precisions(&rels)?;
    let labels: Vec<Label> = queries.iter().map(|q| q.label).collect();
    aggregate_report(&aps, &labels)
}

// ---------------------------------------------------------------------------
// Scenarios

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    /// Queries are the test subset; the knowledge base is train and test.
    Counterfactual,
    /// Queries are the unlabeled subset; the knowledge base is train.
    Unsupervised,
}

impl ScenarioKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Counterfactual => "counterfactual",
            ScenarioKind::Unsupervised => "unsupervised",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "counterfactual" => Ok(ScenarioKind::Counterfactual),
            "unsupervised" => Ok(ScenarioKind::Unsupervised),
            _ => Err(EvalError::UnknownName {
                what: "scenario",
                value: s.to_string(),
            }),
        }
    }
}

/// Query rows and knowledge-base rows drawn from one databank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub query_rows: Vec<usize>,
    pub kb_rows: Vec<usize>,
}

impl Scenario {
    pub fn build(kind: ScenarioKind, metas: &[SampleMeta]) -> Result<Self> {
        let rows = |keep: &dyn Fn(Subset) -> bool| -> Vec<usize> {
            metas
                .iter()
                .filter(|m| keep(m.subset))
                .map(|m| m.row)
                .collect()
        };
        let (query_rows, kb_rows) = match kind {
            ScenarioKind::Counterfactual => (
                rows(&|s| s == Subset::Test),
                rows(&|s| matches!(s, Subset::Train | Subset::Test)),
            ),
            ScenarioKind::Unsupervised => (
                rows(&|s| s == Subset::Unlabeled),
                rows(&|s| s == Subset::Train),
            ),
        };
        if query_rows.is_empty() {
            return Err(EvalError::EmptyScenario {
                scenario: kind,
                side: "query",
            });
        }
        if kb_rows.is_empty() {
            return Err(EvalError::EmptyScenario {
                scenario: kind,
                side: "knowledge base",
            });
        }
        Ok(Scenario {
            kind,
            query_rows,
            kb_rows,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Sha256, Tag, TagKind};

    fn ranking(names: &[&str]) -> TagRanking {
        let n = names.len() as f64;
        TagRanking::new(
            TagKind::Fam,
            names
                .iter()
                .enumerate()
                .map(|(i, s)| (Tag::new(TagKind::Fam, s).unwrap(), n - i as f64))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn exact_match() {
        assert_eq!(
            relevance_em(&ranking(&["a", "b", "c"]), &ranking(&["a", "b", "c"])),
            1.0
        );
        assert_eq!(
            relevance_em(&ranking(&["a", "b"]), &ranking(&["b", "a"])),
            0.0
        );
        assert_eq!(relevance_em(&ranking(&[]), &ranking(&[])), 1.0);
    }

    #[test]
    fn jaccard() {
        assert_eq!(
            relevance_iou(&ranking(&["a", "b"]), &ranking(&["b", "c"])),
            1.0 / 3.0
        );
        assert_eq!(
            relevance_iou(&ranking(&["a", "b"]), &ranking(&["b", "a"])),
            1.0
        );
        assert_eq!(relevance_iou(&ranking(&["a"]), &ranking(&[])), 0.0);
        assert_eq!(relevance_iou(&ranking(&[]), &ranking(&[])), 1.0);
    }

    #[test]
    fn normalized_edit_similarity() {
        assert_eq!(
            relevance_nes(&ranking(&["x", "y"]), &ranking(&["y", "x"])),
            0.5
        );
        assert_eq!(
            relevance_nes(&ranking(&["x", "y"]), &ranking(&["x", "y"])),
            1.0
        );
        assert_eq!(relevance_nes(&ranking(&["x"]), &ranking(&[])), 0.0);
        assert_eq!(relevance_nes(&ranking(&[]), &ranking(&[])), 1.0);
    }

    #[test]
    fn osa_known_values() {
        let d = |a: &str, b: &str| {
            osa_distance(
                &a.chars().collect::<Vec<_>>(),
                &b.chars().collect::<Vec<_>>(),
            )
        };
        assert_eq!(d("ab", "ba"), 1);
        assert_eq!(d("kitten", "sitting"), 3);
        // OSA, unlike unrestricted Damerau-Levenshtein, cannot edit a transposed pair again.
        assert_eq!(d("ca", "abc"), 3);
        assert_eq!(d("", "abc"), 3);
        assert_eq!(d("abc", ""), 3);
        assert_eq!(d("abcdef", "abcdef"), 0);
    }

    #[test]
    fn missing_tag_rule() {
        let a = ranking(&["a"]);
        let b = ranking(&["b"]);
        assert_eq!(
            relevance_at_k(None, &[None, None], RelevanceFn::Em),
            [1.0, 1.0]
        );
        assert_eq!(relevance_at_k(None, &[Some(&a)], RelevanceFn::Iou), [0.0]);
        assert_eq!(relevance_at_k(Some(&a), &[None], RelevanceFn::Nes), [0.0]);
        assert_eq!(
            relevance_at_k(Some(&a), &[Some(&a), Some(&b)], RelevanceFn::Em),
            [1.0, 0.0]
        );
    }

    #[test]
    fn average_precision_values() {
        let ap = mean_average_precision(&[vec![1.0, 0.0, 1.0]]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(mean_average_precision(&[vec![1.0; 5]]).unwrap(), 1.0);
        assert_eq!(mean_average_precision(&[vec![0.0; 5]]).unwrap(), 0.0);
        assert_eq!(
            mean_average_precision(&[vec![1.0], vec![0.5]]),
            Err(EvalError::NonBinary {
                query: 1,
                value: 0.5
            })
        );
        assert_eq!(mean_average_precision(&[]), Err(EvalError::Empty));
    }

    #[test]
    fn aggregate_statistics() {
        let labels = [Label::Benign; 4];
        let r = aggregate_report(&[0.0, 0.0, 1.0, 1.0], &labels).unwrap();
        assert_eq!(r["all"].mean, 0.5);
        assert_eq!(r["all"].std, 0.5);
        assert_eq!(r["benign"], r["all"]);

        let c = aggregate_report(&[0.3; 7], &[Label::Malicious; 7]).unwrap();
        assert_eq!(c["all"].percentiles, [0.3; 4]);

        let scores: Vec<f64> = (1..=100).map(|i| f64::from(i) / 100.0).collect();
        let r = aggregate_report(&scores, &[Label::Benign; 100]).unwrap();
        assert_eq!(r["all"].percentiles, [0.01, 0.10, 0.50, 0.95]);

        assert_eq!(aggregate_report(&[], &[]), Err(EvalError::Empty));
        assert!(aggregate_report(&[1.0], &[]).is_err());
    }

    #[test]
    fn nearest_rank_bounds() {
        assert_eq!(nearest_rank(1, 1), 1);
        assert_eq!(nearest_rank(50, 3), 2);
        assert_eq!(nearest_rank(95, 20), 19);
        assert_eq!(nearest_rank(1, 1000), 10);
    }

    #[test]
    fn homogeneity_counts() {
        use Label::*;
        let h = label_homogeneity(
            &[Malicious, Malicious],
            &[vec![Malicious, Malicious], vec![Malicious, Benign]],
            2,
        );
        let r = h.report().unwrap();
        assert_eq!(r["malicious"].mean, 1.5);
        assert_eq!(r["malicious"].std, 0.5);

        let perfect = label_homogeneity(
            &[Benign, Malicious],
            &[vec![Benign; 3], vec![Malicious; 3]],
            3,
        );
        let r = perfect.report().unwrap();
        assert_eq!((r["all"].mean, r["all"].std), (3.0, 0.0));

        let miss = label_homogeneity(&[Benign], &[vec![Malicious]], 1);
        assert_eq!(miss.counts, [0.0]);

        let mixed = label_homogeneity(&[Unlabeled, Benign], &[vec![Benign], vec![Benign]], 2);
        assert_eq!(mixed.excluded, [0]);
        assert_eq!(mixed.truncated, [1]);
        assert_eq!(mixed.counts, [1.0]);
    }

    #[test]
    fn relevance_and_map_reports() {
        let a = ranking(&["a"]);
        let b = ranking(&["b"]);
        let queries = vec![
            QueryTags {
                label: Label::Malicious,
                ranking: Some(&a),
                hits: vec![Some(&a), Some(&b), Some(&a)],
            },
            QueryTags {
                label: Label::Benign,
                ranking: None,
                hits: vec![None, None, None],
            },
        ];
        let r = relevance_report(&queries, RelevanceFn::Em, 3, Pooling::PerQuery).unwrap();
        assert!((r["malicious"].mean - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r["benign"].mean, 1.0);
        let pooled = relevance_report(&queries, RelevanceFn::Em, 3, Pooling::Pooled).unwrap();
        assert_eq!(pooled["all"].count, 6);

        let m = map_report(&queries, 3).unwrap();
        assert!((m["malicious"].mean - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(m["benign"].mean, 1.0);
    }

    #[test]
    fn scenarios_split_by_subset() {
        let meta = |row: usize, label: Label, subset: Subset| {
            SampleMeta::new(
                row,
                Sha256::parse(&format!("{row:064x}")).unwrap(),
                label,
                subset,
                None,
            )
            .unwrap()
        };
        let metas = vec![
            meta(0, Label::Benign, Subset::Train),
            meta(1, Label::Malicious, Subset::Test),
            meta(2, Label::Unlabeled, Subset::Unlabeled),
            meta(3, Label::Malicious, Subset::Train),
        ];
        let cf = Scenario::build(ScenarioKind::Counterfactual, &metas).unwrap();
        assert_eq!(cf.query_rows, [1]);
        assert_eq!(cf.kb_rows, [0, 1, 3]);
        let un = Scenario::build(ScenarioKind::Unsupervised, &metas).unwrap();
        assert_eq!(un.query_rows, [2]);
        assert_eq!(un.kb_rows, [0, 3]);
        assert!(Scenario::build(ScenarioKind::Unsupervised, &metas[..2]).is_err());
    }
}
