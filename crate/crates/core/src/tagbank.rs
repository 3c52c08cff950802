//! Tag co-occurrence statistics, co-occurrence enrichment and per-kind tag
//! ranking.
//!
//! Conditional frequencies follow `freq(x | y) = freq(x, y) / freq(y)`,
//! where frequencies count distinct samples. Rank scores extend the
//! kind-conditional AVClass score distribution with co-occurrence mass
//! contributed by family tags:
//!
//! ```text
//! RankScore(y) = P(y | K) + sum over enriched x -> y of P(x) * freq(y | x)
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};

use log::warn;
use thiserror::Error;

use crate::model::{CoocTable, EnrichedTags, ScoredTagList, Sha256, Tag, TagKind, TagRanking};

/// Co-occurrence threshold used for enrichment unless configured otherwise.
pub const DEFAULT_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TagError {
    #[error("threshold {0} is outside [0, 1]")]
    Threshold(f64),
    #[error("tag {0} does not occur in the co-occurrence table")]
    UnknownTag(Tag),
    #[error("tags of kind {0} cannot be ranked (expected FAM, CLASS or BEH)")]
    UnrankableKind(TagKind),
}

pub type Result<T> = std::result::Result<T, TagError>;

/// Tag metadata of one sample.
///
/// `prev` is the single family label from the older AVClass run shipped with
/// EMBER; `curr` is the full AVClass 2 tag list. Either may be missing.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTagRecord {
    pub sha256: Sha256,
    pub prev: Option<Tag>,
    pub curr: Option<ScoredTagList>,
}

impl SampleTagRecord {
    pub fn new(sha256: Sha256, prev: Option<Tag>, curr: Option<ScoredTagList>) -> Self {
        SampleTagRecord { sha256, prev, curr }
    }

    /// Current tags, treating a missing list and an empty list alike.
    pub fn curr_tags(&self) -> Option<&ScoredTagList> {
        self.curr.as_ref().filter(|c| !c.is_empty())
    }

    /// True when the sample has neither a previous family nor current tags.
    pub fn is_untagged(&self) -> bool {
        self.prev.is_none() && self.curr_tags().is_none()
    }
}

/// Joins AVClass output and previous families on sha256, in sha order.
pub fn join_records(
    curr: BTreeMap<Sha256, ScoredTagList>,
    mut prev: BTreeMap<Sha256, Tag>,
) -> Vec<SampleTagRecord> {
    let mut out: Vec<SampleTagRecord> = curr
        .into_iter()
        .map(|(sha, list)| {
            let p = prev.remove(&sha);
            SampleTagRecord::new(sha, p, Some(list))
        })
        .collect();
    out.extend(
        prev.into_iter()
            .map(|(sha, p)| SampleTagRecord::new(sha, Some(p), None)),
    );
    out.sort_by(|a, b| a.sha256.cmp(&b.sha256));
    out
}

/// Counts, over the current tag lists, how many distinct samples carry each
/// tag and each unordered tag pair.
pub fn build_cooc<'a>(records: impl IntoIterator<Item = &'a SampleTagRecord>) -> CoocTable {
    let mut freq: BTreeMap<Tag, u64> = BTreeMap::new();
    let mut joint: HashMap<(Tag, Tag), u64> = HashMap::new();
    for rec in records {
        let Some(list) = rec.curr_tags() else {
            continue;
        };
        // ScoredTagList guarantees distinct tags, so each sample adds at most 1.
        let mut tags: Vec<&Tag> = list.tags().iter().map(|(t, _)| t).collect();
        tags.sort();
        for (i, a) in tags.iter().enumerate() {
            *freq.entry((*a).clone()).or_default() += 1;
            for b in &tags[i + 1..] {
                *joint.entry(((*a).clone(), (*b).clone())).or_default() += 1;
            }
        }
    }
    CoocTable::new(freq, joint).expect("counts built from samples are consistent")
}

/// `freq(x | y)`: the share of samples tagged `y` that are also tagged `x`.
pub fn rel_freq(table: &CoocTable, x: &Tag, y: &Tag) -> Result<f64> {
    let fy = table
        .freq(y)
        .ok_or_else(|| TagError::UnknownTag(y.clone()))?;
    if x == y {
        return Ok(1.0);
    }
    Ok(table.joint(x, y) as f64 / fy as f64)
}

/// Partners `x` of `source` with `freq(x | source) >= threshold`.
fn frequent_partners<'t>(
    table: &'t CoocTable,
    source: &'t Tag,
    threshold: f64,
) -> impl Iterator<Item = (&'t Tag, f64)> + 't {
    let denom = table.freq(source).unwrap_or(0) as f64;
    table
        .partners(source)
        .iter()
        .map(move |(x, n)| (x, *n as f64 / denom))
        .filter(move |&(_, f)| f >= threshold)
}

/// Adds tags that frequently co-occur with the sample's existing tags.
///
/// * no previous family and no current tags: nothing (likely benign)
/// * previous family only: its frequent partners, keyed by the family
/// * current tags only: frequent partners of every FAM or CLASS tag
/// * both: the union of the two, keeping the larger frequency on a clash
pub fn enrich_tags(
    record: &SampleTagRecord,
    table: &CoocTable,
    threshold: f64,
) -> Result<EnrichedTags> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(TagError::Threshold(threshold));
    }
    let mut res = EnrichedTags::new();
    if let Some(prev) = &record.prev {
        for (x, f) in frequent_partners(table, prev, threshold) {
            res.insert_max(prev.clone(), x.clone(), f);
        }
    }
    if let Some(curr) = record.curr_tags() {
        let seeds = curr
            .tags()
            .iter()
            .map(|(t, _)| t)
            .filter(|t| matches!(t.kind(), TagKind::Fam | TagKind::Class));
        for x in seeds {
            for (y, f) in frequent_partners(table, x, threshold) {
                res.insert_max(x.clone(), y.clone(), f);
            }
        }
    }
    Ok(res)
}

/// `P(x | kind = K)`: AVClass scores of the kind-`K` tags, normalized.
pub fn tag_distribution(tags: &ScoredTagList, kind: TagKind) -> BTreeMap<Tag, f64> {
    let total: u64 = tags.of_kind(kind).map(|(_, s)| u64::from(*s)).sum();
    tags.of_kind(kind)
        .map(|(t, s)| (t.clone(), f64::from(*s) / total as f64))
        .collect()
}

/// Which distribution weighs a family source `x` in the rank score sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SourceDistribution {
    /// `P(x | kind = FAM)` of the sample, the natural reading for FAM sources.
    #[default]
    Family,
    /// `P(x | kind = K)`; only differs from `Family` when `K` is not FAM,
    /// in which case family sources carry no mass.
    TargetKind,
}

/// Names that occur under more than one kind (UNK aside) across a corpus.
#[derive(Debug, Clone, Default)]
pub struct KindRegistry {
    kinds: HashMap<String, BTreeSet<TagKind>>,
}

impl KindRegistry {
    pub fn from_table(table: &CoocTable) -> Self {
        let mut reg = KindRegistry::default();
        for tag in table.tag_freq().keys() {
            reg.observe(tag);
        }
        reg
    }

    pub fn observe(&mut self, tag: &Tag) {
        if tag.kind() != TagKind::Unk {
            self.kinds
                .entry(tag.name().to_string())
                .or_default()
                .insert(tag.kind());
        }
    }

    pub fn is_ambiguous(&self, name: &str) -> bool {
        self.kinds.get(name).is_some_and(|k| k.len() > 1)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RankOptions<'a> {
    pub source: SourceDistribution,
    /// When set, co-occurrence tags whose name is ambiguous across kinds are
    /// left out of the ranking.
    pub registry: Option<&'a KindRegistry>,
}

fn source_weights(
    record: &SampleTagRecord,
    kind: TagKind,
    mode: SourceDistribution,
) -> BTreeMap<Tag, f64> {
    let empty = ScoredTagList::empty();
    let curr = record.curr_tags().unwrap_or(&empty);
    let mut dist = match mode {
        SourceDistribution::Family => tag_distribution(curr, TagKind::Fam),
        SourceDistribution::TargetKind => tag_distribution(curr, kind),
    };
    // A sample known only by its previous family gives that family full weight.
    if dist.is_empty() && (mode == SourceDistribution::Family || kind == TagKind::Fam) {
        if let Some(prev) = &record.prev {
            dist.insert(prev.clone(), 1.0);
        }
    }
    dist
}

/// Ranks the sample's kind-`K` tags with the default options.
pub fn rank_tags(
    record: &SampleTagRecord,
    enriched: &EnrichedTags,
    kind: TagKind,
) -> Result<TagRanking> {
    rank_tags_with(record, enriched, kind, RankOptions::default())
}

pub fn rank_tags_with(
    record: &SampleTagRecord,
    enriched: &EnrichedTags,
    kind: TagKind,
    opts: RankOptions<'_>,
) -> Result<TagRanking> {
    if !matches!(kind, TagKind::Fam | TagKind::Class | TagKind::Beh) {
        return Err(TagError::UnrankableKind(kind));
    }
    let empty = ScoredTagList::empty();
    let curr = record.curr_tags().unwrap_or(&empty);
    let mut scores = tag_distribution(curr, kind);
    let weights = source_weights(record, kind, opts.source);

    for (x, y, freq) in enriched.iter() {
        if x.kind() != TagKind::Fam || y.kind() != kind {
            continue;
        }
        let p = weights.get(x).copied().unwrap_or(0.0);
        if p == 0.0 {
            continue;
        }
        if !curr.contains(y) && opts.registry.is_some_and(|r| r.is_ambiguous(y.name())) {
            warn!(
                "{}: skipping {y}, its name occurs under several kinds",
                record.sha256
            );
            continue;
        }
        *scores.entry(y.clone()).or_default() += p * freq;
    }
    Ok(TagRanking::from_scores(kind, scores))
}

/// Whether some co-occurrence tag outranks an original kind-`K` tag in
/// `ranking`. Not an invariant of the scoring; tracked as a statistic.
pub fn added_outranks_original(record: &SampleTagRecord, ranking: &TagRanking) -> bool {
    let Some(curr) = record.curr_tags() else {
        return false;
    };
    let mut seen_added = false;
    for (t, _) in ranking.ranked() {
        if curr.contains(t) {
            if seen_added {
                return true;
            }
        } else {
            seen_added = true;
        }
    }
    false
}
