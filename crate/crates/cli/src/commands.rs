use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use leafsim_core::eval::{
    label_homogeneity, map_report, relevance_report, GroupReport, Pooling, QueryTags, RelevanceFn,
    Scenario, ScenarioKind, PERCENTILES,
};
use leafsim_core::io::{self, HitRecord, QueryRecord};
use leafsim_core::simindex::IndexManifest;
use leafsim_core::synth::{self, SynthConfig};
use leafsim_core::tagbank::{
    build_cooc, enrich_tags, join_records, rank_tags_with, KindRegistry, RankOptions,
    SampleTagRecord,
};
use leafsim_core::{EnrichedTags, Label, QueryHit, SampleMeta, Sha256, TagKind, TagRanking};
use log::{info, warn};
use serde_json::json;

use crate::{
    BuildIndexArgs, CoocArgs, EnrichArgs, EvalArgs, ProtocolArg, QueryArgs, RankArgs, SynthArgs,
    UsageError,
};

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&l);
        text.push('\n');
    }
    io::write_bytes(path, text.as_bytes())?;
    Ok(())
}

/// Stores `path` relative to the manifest's directory when it lies below
/// it, absolute otherwise.
fn manifest_path(path: &Path, out: &Path) -> Result<PathBuf> {
    let abs = path
        .canonicalize()
        .with_context(|| format!("cannot resolve {}", path.display()))?;
    let dir = match out.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(p) => p.canonicalize(),
        None => std::env::current_dir(),
    }
    .with_context(|| format!("cannot resolve the directory of {}", out.display()))?;
    Ok(abs.strip_prefix(&dir).map(Path::to_path_buf).unwrap_or(abs))
}

fn manifest_base(index: &Path) -> &Path {
    index.parent().unwrap_or(Path::new("."))
}

pub fn build_index(a: &BuildIndexArgs, deterministic: bool) -> Result<()> {
    let (mut manifest, index) = IndexManifest::build(&a.leaves, &a.meta)?;
    manifest.leaves = manifest_path(&a.leaves, &a.out)?;
    manifest.meta = manifest_path(&a.meta, &a.out)?;
    if !deterministic {
        manifest.created_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .ok()
            .map(|d| d.as_secs());
    }
    io::write_bytes(&a.out, manifest.to_json().as_bytes())?;
    info!(
        "indexed {} samples x {} trees ({:?} leaves)",
        index.matrix().n_samples(),
        index.n_trees(),
        index.matrix().width()
    );
    Ok(())
}

fn hit_record(h: &QueryHit, metas: &[SampleMeta]) -> HitRecord {
    let m = &metas[h.row];
    HitRecord {
        sha: Some(m.sha256.to_string()),
        score: h.score,
        label: Some(m.label.code()),
    }
}

pub fn query(a: &QueryArgs) -> Result<()> {
    let manifest = IndexManifest::read(&a.index)?;
    let (index, metas) = manifest.open(manifest_base(&a.index))?;
    let k = a.top_k as usize;

    let (query_shas, hits): (Vec<Option<Sha256>>, Vec<Vec<QueryHit>>) =
        match (&a.queries, a.scenario) {
            (Some(path), _) => {
                let queries = io::read_leaf_matrix(path)?;
                let qmeta = a
                    .query_meta
                    .as_deref()
                    .map(io::read_sample_meta)
                    .transpose()?;
                if let Some(m) = &qmeta {
                    if m.len() != queries.n_samples() {
                        bail!(
                            "query metadata has {} rows but the query matrix has {}",
                            m.len(),
                            queries.n_samples()
                        );
                    }
                }
                if a.exclude_self && qmeta.is_none() {
                    return Err(UsageError(
                        "--exclude-self with --queries needs --query-meta".into(),
                    )
                    .into());
                }
                let shas: Option<Vec<Sha256>> =
                    qmeta.map(|m| m.into_iter().map(|m| m.sha256).collect());
                if index.n_indexable() < k {
                    warn!(
                        "top-k {k} exceeds the {} indexed rows; returning all",
                        index.n_indexable()
                    );
                }
                let hits = index.top_k_batch(&queries, shas.as_deref(), k, a.exclude_self)?;
                let shas = match shas {
                    Some(s) => s.into_iter().map(Some).collect(),
                    None => vec![None; queries.n_samples()],
                };
                (shas, hits)
            }
            (None, Some(kind)) => {
                let scenario = Scenario::build(kind.into(), &metas)?;
                let index = index.with_row_filter(scenario.kb_rows.clone())?;
                if index.n_indexable() < k {
                    warn!(
                        "top-k {k} exceeds the {} knowledge-base rows; returning all",
                        index.n_indexable()
                    );
                }
                let hits = index.top_k_rows(&scenario.query_rows, k, a.exclude_self)?;
                let shas = scenario
                    .query_rows
                    .iter()
                    .map(|&r| Some(metas[r].sha256.clone()))
                    .collect();
                (shas, hits)
            }
            (None, None) => unreachable!("clap requires --queries or --scenario"),
        };

    write_lines(
        &a.out,
        query_shas.iter().zip(&hits).map(|(sha, hits)| {
            io::render_query_line(&QueryRecord {
                query_sha: sha.as_ref().map(ToString::to_string),
                hits: hits.iter().map(|h| hit_record(h, &metas)).collect(),
            })
        }),
    )
}

pub fn cooc(a: &CoocArgs) -> Result<()> {
    let records = join_records(io::read_avclass(&a.tags)?, BTreeMap::new());
    let table = build_cooc(&records);
    info!(
        "{} tags, {} co-occurring pairs",
        table.tag_freq().len(),
        table.n_pairs()
    );
    io::write_cooc_table(&table, &a.out)?;
    Ok(())
}

fn read_records(tags: &Path, prev: Option<&Path>) -> Result<Vec<SampleTagRecord>> {
    let curr = io::read_avclass(tags)?;
    let prev = prev
        .map(io::read_prev_families)
        .transpose()?
        .unwrap_or_default();
    Ok(join_records(curr, prev))
}

pub fn enrich(a: &EnrichArgs) -> Result<()> {
    let records = read_records(&a.tags, a.prev.as_deref())?;
    let table = io::read_cooc_table(&a.cooc)?;
    let lines = records
        .iter()
        .map(|r| {
            Ok(io::render_enrichment_line(
                &r.sha256,
                &enrich_tags(r, &table, a.threshold)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    write_lines(&a.out, lines)
}

pub fn rank(a: &RankArgs) -> Result<()> {
    let records = read_records(&a.tags, a.prev.as_deref())?;
    let enriched = io::parse_enrichments(&io::read_text(&a.enriched)?)?;
    let mut registry = KindRegistry::default();
    for r in &records {
        r.prev.iter().for_each(|t| registry.observe(t));
        r.curr_tags()
            .into_iter()
            .flat_map(|c| c.tags())
            .for_each(|(t, _)| registry.observe(t));
    }
    let opts = RankOptions {
        source: a.source_dist.into(),
        registry: Some(&registry),
    };
    let kind: TagKind = a.kind.into();
    let none = EnrichedTags::new();
    let mut lines = Vec::new();
    let mut untagged = 0usize;
    for r in &records {
        // Untagged samples get no line: their tag list is missing.
        if r.is_untagged() {
            untagged += 1;
            continue;
        }
        let e = enriched.get(&r.sha256).unwrap_or(&none);
        lines.push(io::render_ranking_line(
            &r.sha256,
            &rank_tags_with(r, e, kind, opts)?,
        ));
    }
    info!("ranked {} samples, {untagged} untagged", lines.len());
    write_lines(&a.out, lines)
}

fn label_of(
    metas: &BTreeMap<&Sha256, &SampleMeta>,
    sha: Option<&str>,
    what: &str,
) -> Result<Label> {
    let sha = sha.with_context(|| format!("{what} has no sha"))?;
    let sha = Sha256::parse(sha)?;
    metas
        .get(&sha)
        .map(|m| m.label)
        .with_context(|| format!("{what} {sha} is not in the metadata"))
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let records = io::parse_query_records(&io::read_text(&a.hits)?)?;
    let metas = io::read_sample_meta(&a.meta)?;
    let by_sha: BTreeMap<&Sha256, &SampleMeta> = metas.iter().map(|m| (&m.sha256, m)).collect();
    let scenario: ScenarioKind = a.scenario.into();
    let k = a.top_k as usize;

    let query_subset_ok = |m: &SampleMeta| match scenario {
        ScenarioKind::Counterfactual => m.subset == leafsim_core::Subset::Test,
        ScenarioKind::Unsupervised => m.subset == leafsim_core::Subset::Unlabeled,
    };
    let mut query_labels = Vec::with_capacity(records.len());
    let mut outside = 0usize;
    for (i, rec) in records.iter().enumerate() {
        let label = label_of(&by_sha, rec.query_sha.as_deref(), &format!("query {i}"))?;
        let sha = Sha256::parse(rec.query_sha.as_deref().unwrap_or_default())?;
        if !query_subset_ok(by_sha[&sha]) {
            outside += 1;
        }
        query_labels.push(label);
    }
    if outside > 0 {
        warn!("{outside} queries are outside the {scenario} query subset");
    }

    let (fn_name, report): (Option<&str>, GroupReport) = match a.protocol {
        ProtocolArg::LabelHom => {
            let hit_labels = records
                .iter()
                .enumerate()
                .map(|(i, rec)| {
                    rec.hits
                        .iter()
                        .map(|h| match h.label {
                            Some(code) => Ok(Label::from_code(i64::from(code))?),
                            None => {
                                label_of(&by_sha, h.sha.as_deref(), &format!("hit of query {i}"))
                            }
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            (
                None,
                label_homogeneity(&query_labels, &hit_labels, k).report()?,
            )
        }
        ProtocolArg::Relevance | ProtocolArg::Map => {
            let path = a
                .rankings
                .as_deref()
                .ok_or_else(|| UsageError("--protocol relevance and map need --rankings".into()))?;
            let rankings = io::parse_rankings(&io::read_text(path)?)?;
            let lookup = |sha: Option<&str>| -> Result<Option<&TagRanking>> {
                Ok(match sha {
                    Some(s) => rankings.get(&Sha256::parse(s)?),
                    None => None,
                })
            };
            let queries = records
                .iter()
                .zip(&query_labels)
                .map(|(rec, &label)| {
                    Ok(QueryTags {
                        label,
                        ranking: lookup(rec.query_sha.as_deref())?,
                        hits: rec
                            .hits
                            .iter()
                            .map(|h| lookup(h.sha.as_deref()))
                            .collect::<Result<_>>()?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if a.protocol == ProtocolArg::Map {
                (Some(RelevanceFn::Em.as_str()), map_report(&queries, k)?)
            } else {
                let f: RelevanceFn = a.relevance.into();
                let pooling = if a.pooled {
                    Pooling::Pooled
                } else {
                    Pooling::PerQuery
                };
                (Some(f.as_str()), relevance_report(&queries, f, k, pooling)?)
            }
        }
    };

    let protocol = match a.protocol {
        ProtocolArg::LabelHom => "label-hom",
        ProtocolArg::Relevance => "relevance",
        ProtocolArg::Map => "map",
    };
    let doc = json!({
        "scenario": scenario,
        "protocol": protocol,
        "fn": fn_name,
        "k": k,
        "pooling": if a.pooled && a.protocol == ProtocolArg::Relevance { "pooled" } else { "per-query" },
        "percentile_levels": PERCENTILES,
        "groups": report,
    });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    io::write_bytes(&a.out, text.as_bytes())?;
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    if a.n_samples == 0 || a.n_trees == 0 {
        return Err(UsageError("--n-samples and --n-trees must be positive".into()).into());
    }
    let bank = synth::generate(&SynthConfig {
        n_samples: a.n_samples,
        n_trees: a.n_trees,
        seed: a.seed,
        ..SynthConfig::default()
    });
    std::fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("cannot create {}", a.out_dir.display()))?;
    io::write_leaf_matrix(&bank.leaves, &a.out_dir.join("leaves.lsim"))?;
    io::write_sample_meta(&bank.metas, &a.out_dir.join("meta.jsonl"))?;
    io::write_bytes(
        &a.out_dir.join("tags.avclass"),
        io::render_avclass(&bank.tags)?.as_bytes(),
    )?;
    info!(
        "wrote {} samples x {} trees to {}",
        a.n_samples,
        a.n_trees,
        a.out_dir.display()
    );
    Ok(())
}
