use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use leafsim_core::io;
use leafsim_core::{Label, LeafMatrix, SampleMeta, Sha256, Subset};
use serde_json::Value;
use tempfile::TempDir;

fn leafsim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_leafsim"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(out: Output) -> Output {
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    out
}

fn sha(c: char) -> String {
    c.to_string().repeat(64)
}

fn meta_line(row: usize, c: char, label: i8, subset: &str) -> String {
    format!(
        r#"{{"row":{row},"sha256":"{}","label":{label},"subset":"{subset}","appeared":null}}"#,
        sha(c)
    )
}

/// Three rows [[1,1],[1,2],[3,3]] with train/test metadata.
fn small_bank(dir: &Path) {
    let m = LeafMatrix::new(3, 2, vec![1, 1, 1, 2, 3, 3]).unwrap();
    io::write_leaf_matrix(&m, &dir.join("leaves.lsim")).unwrap();
    let meta = [
        meta_line(0, 'a', 1, "train"),
        meta_line(1, 'b', 0, "test"),
        meta_line(2, 'c', 1, "train"),
    ];
    fs::write(dir.join("meta.jsonl"), meta.join("\n") + "\n").unwrap();
}

fn build_index(dir: &Path) {
    ok(leafsim(
        dir,
        &[
            "--deterministic",
            "build-index",
            "--leaves",
            "leaves.lsim",
            "--meta",
            "meta.jsonl",
            "--out",
            "index.json",
        ],
    ));
}

fn hits(dir: &Path, file: &str) -> Vec<Value> {
    fs::read_to_string(dir.join(file))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn report(dir: &Path, file: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join(file)).unwrap()).unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&leafsim(tmp.path(), &["--help"])), 0);
    assert_eq!(code(&leafsim(tmp.path(), &["--version"])), 0);
}

#[test]
fn missing_file_is_a_data_error_naming_the_path() {
    let tmp = TempDir::new().unwrap();
    let out = leafsim(
        tmp.path(),
        &[
            "build-index",
            "--leaves",
            "nowhere.lsim",
            "--meta",
            "meta.jsonl",
            "--out",
            "i.json",
        ],
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nowhere.lsim"), "{}", stderr(&out));
}

#[test]
fn meta_count_mismatch_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    small_bank(tmp.path());
    fs::write(
        tmp.path().join("short.jsonl"),
        meta_line(0, 'a', 1, "train") + "\n",
    )
    .unwrap();
    let out = leafsim(
        tmp.path(),
        &[
            "build-index",
            "--leaves",
            "leaves.lsim",
            "--meta",
            "short.jsonl",
            "--out",
            "i.json",
        ],
    );
    assert_eq!(code(&out), 2);
    assert!(
        stderr(&out).contains('1') && stderr(&out).contains('3'),
        "{}",
        stderr(&out)
    );
    assert!(!tmp.path().join("i.json").exists());
}

#[test]
fn usage_errors_exit_64() {
    let tmp = TempDir::new().unwrap();
    let cases: [&[&str]; 5] = [
        &[
            "eval",
            "--protocol",
            "bogus",
            "--scenario",
            "counterfactual",
            "--hits",
            "h",
            "--meta",
            "m",
            "--out",
            "o",
        ],
        &[
            "eval",
            "--protocol",
            "map",
            "--fn",
            "cosine",
            "--scenario",
            "counterfactual",
            "--hits",
            "h",
            "--meta",
            "m",
            "--out",
            "o",
        ],
        &[
            "rank",
            "--tags",
            "t",
            "--enriched",
            "e",
            "--kind",
            "FILE",
            "--out",
            "o",
        ],
        &[
            "enrich",
            "--tags",
            "t",
            "--cooc",
            "c",
            "--threshold",
            "1.5",
            "--out",
            "o",
        ],
        &["no-such-command"],
    ];
    for args in cases {
        assert_eq!(code(&leafsim(tmp.path(), args)), 64, "{args:?}");
    }
    let out = Command::new(env!("CARGO_BIN_EXE_leafsim"))
        .current_dir(tmp.path())
        .env("LEAFSIM_THREADS", "zero")
        .args(["cooc", "--tags", "t", "--out", "o"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 64);
}

#[test]
fn identity_query_returns_self_unless_excluded() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    small_bank(d);
    build_index(d);
    let base = [
        "query",
        "--index",
        "index.json",
        "--queries",
        "leaves.lsim",
        "--query-meta",
        "meta.jsonl",
        "--top-k",
        "2",
    ];
    ok(leafsim(d, &[&base[..], &["--out", "self.jsonl"]].concat()));
    ok(leafsim(
        d,
        &[&base[..], &["--exclude-self", "--out", "noself.jsonl"]].concat(),
    ));

    let with_self = hits(d, "self.jsonl");
    assert_eq!(with_self.len(), 3);
    for (q, rec) in with_self.iter().enumerate() {
        let top = &rec["hits"][0];
        assert_eq!(rec["query_sha"], sha(['a', 'b', 'c'][q]));
        assert_eq!(top["sha"], rec["query_sha"]);
        assert_eq!(top["score"], 1.0);
    }
    // query [1,2]: self first, then row 0 at 0.5
    assert_eq!(with_self[1]["hits"][1]["sha"], sha('a'));
    assert_eq!(with_self[1]["hits"][1]["score"], 0.5);
    assert_eq!(with_self[1]["hits"][1]["label"], 1);

    for rec in hits(d, "noself.jsonl") {
        assert!(rec["hits"]
            .as_array()
            .unwrap()
            .iter()
            .all(|h| h["sha"] != rec["query_sha"]));
    }
    let out = leafsim(
        d,
        &[
            "query",
            "--index",
            "index.json",
            "--queries",
            "leaves.lsim",
            "--exclude-self",
            "--out",
            "x",
        ],
    );
    assert_eq!(code(&out), 64);
}

#[test]
fn k_larger_than_index_is_truncated() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    small_bank(d);
    build_index(d);
    ok(leafsim(
        d,
        &[
            "query",
            "--index",
            "index.json",
            "--queries",
            "leaves.lsim",
            "--top-k",
            "10",
            "--out",
            "h.jsonl",
        ],
    ));
    for rec in hits(d, "h.jsonl") {
        assert_eq!(rec["hits"].as_array().unwrap().len(), 3);
        assert!(rec["query_sha"].is_null());
    }
}

#[test]
fn scenario_query_uses_the_knowledge_base() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    small_bank(d);
    build_index(d);
    ok(leafsim(
        d,
        &[
            "query",
            "--index",
            "index.json",
            "--scenario",
            "counterfactual",
            "--exclude-self",
            "--out",
            "h.jsonl",
        ],
    ));
    let recs = hits(d, "h.jsonl");
    // the only test row is b = [1,2]; a shares one leaf, c none
    assert_eq!(recs.len(), 1);
    let shas: Vec<&Value> = recs[0]["hits"]
        .as_array()
        .unwrap()
        .iter()
        .map(|h| &h["sha"])
        .collect();
    assert_eq!(shas, [&Value::from(sha('a')), &Value::from(sha('c'))]);
}

#[test]
fn outputs_are_idempotent_and_stale_sources_rejected() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    small_bank(d);
    build_index(d);
    let first = fs::read(d.join("index.json")).unwrap();
    build_index(d);
    assert_eq!(fs::read(d.join("index.json")).unwrap(), first);
    assert!(!String::from_utf8_lossy(&first).contains("created_unix"));

    let q = [
        "query",
        "--index",
        "index.json",
        "--queries",
        "leaves.lsim",
        "--out",
    ];
    ok(leafsim(d, &[&q[..], &["a.jsonl"]].concat()));
    ok(leafsim(d, &[&q[..], &["b.jsonl"]].concat()));
    assert_eq!(
        fs::read(d.join("a.jsonl")).unwrap(),
        fs::read(d.join("b.jsonl")).unwrap()
    );

    let meta = fs::read_to_string(d.join("meta.jsonl")).unwrap();
    fs::write(d.join("meta.jsonl"), meta.replace("\"test\"", "\"train\"")).unwrap();
    let out = leafsim(d, &[&q[..], &["c.jsonl"]].concat());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("digest"), "{}", stderr(&out));
}

#[test]
fn enrich_at_default_threshold() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    // a occurs in 3 samples, b in 2, c in 1: freq(a|b) = freq(a|c) = 1, freq(b|a) = 2/3
    let tags = format!(
        "{} 20 FAM:a|5,FAM:b|2,FILE:packed|3\n{} 10 FAM:a|3,FAM:b|1\n{} 12 FAM:a|4,FAM:c|1\n{} NULL\n",
        sha('1'),
        sha('2'),
        sha('3'),
        sha('4')
    );
    fs::write(d.join("tags.avclass"), tags).unwrap();
    fs::write(d.join("prev.txt"), format!("{} c\n", sha('4'))).unwrap();
    ok(leafsim(
        d,
        &["cooc", "--tags", "tags.avclass", "--out", "cooc.csv"],
    ));
    let table = io::read_cooc_table(&d.join("cooc.csv")).unwrap();
    assert_eq!(table.freq(&"FAM:a".parse().unwrap()), Some(3));

    ok(leafsim(
        d,
        &[
            "enrich",
            "--tags",
            "tags.avclass",
            "--prev",
            "prev.txt",
            "--cooc",
            "cooc.csv",
            "--out",
            "enriched.jsonl",
        ],
    ));
    let got = fs::read_to_string(d.join("enriched.jsonl")).unwrap();
    let line = |c: char, added: &str| format!(r#"{{"sha256":"{}","added":[{added}]}}"#, sha(c));
    let expected = [
        line('1', r#"{"src":"FAM:b","tag":"FAM:a","freq":1.0}"#),
        line('2', r#"{"src":"FAM:b","tag":"FAM:a","freq":1.0}"#),
        line('3', r#"{"src":"FAM:c","tag":"FAM:a","freq":1.0}"#),
        line('4', r#"{"src":"FAM:c","tag":"FAM:a","freq":1.0}"#),
    ];
    assert_eq!(got, expected.join("\n") + "\n");

    ok(leafsim(
        d,
        &[
            "rank",
            "--tags",
            "tags.avclass",
            "--prev",
            "prev.txt",
            "--enriched",
            "enriched.jsonl",
            "--kind",
            "FAM",
            "--out",
            "rank.jsonl",
        ],
    ));
    let ranks = hits(d, "rank.jsonl");
    let names = |r: &Value| -> Vec<String> {
        r["ranking"]
            .as_array()
            .unwrap()
            .iter()
            .map(|t| t["tag"].as_str().unwrap().to_string())
            .collect()
    };
    // sample 1: a scores 5/7 plus 2/7 * freq(a|b) from b
    assert_eq!(names(&ranks[0]), ["FAM:a", "FAM:b"]);
    assert_eq!(ranks[0]["ranking"][0]["score"], 1.0);
    // sample 4 is known only by its previous family
    assert_eq!(names(&ranks[3]), ["FAM:a"]);
}

/// Hits, rankings and metadata written by hand for the eval protocols.
fn eval_fixture(d: &Path, query_tags: &[&str], hit_tags: &[&str]) {
    let metas = vec![
        SampleMeta::new(
            0,
            Sha256::parse(&sha('a')).unwrap(),
            Label::Malicious,
            Subset::Test,
            None,
        )
        .unwrap(),
        SampleMeta::new(
            1,
            Sha256::parse(&sha('b')).unwrap(),
            Label::Malicious,
            Subset::Train,
            None,
        )
        .unwrap(),
        SampleMeta::new(
            2,
            Sha256::parse(&sha('c')).unwrap(),
            Label::Malicious,
            Subset::Train,
            None,
        )
        .unwrap(),
    ];
    io::write_sample_meta(&metas, &d.join("meta.jsonl")).unwrap();
    let hit = |c: char| format!(r#"{{"sha":"{}","score":1.0,"label":1}}"#, sha(c));
    fs::write(
        d.join("hits.jsonl"),
        format!(
            r#"{{"query_sha":"{}","hits":[{},{}]}}"#,
            sha('a'),
            hit('b'),
            hit('c')
        ) + "\n",
    )
    .unwrap();
    let ranking = |c: char, tags: &[&str]| {
        let items: Vec<String> = tags
            .iter()
            .enumerate()
            .map(|(i, t)| format!(r#"{{"tag":"FAM:{t}","score":{}}}"#, 1.0 - 0.25 * i as f64))
            .collect();
        format!(
            r#"{{"sha256":"{}","kind":"FAM","ranking":[{}]}}"#,
            sha(c),
            items.join(",")
        )
    };
    let lines = [
        ranking('a', query_tags),
        ranking('b', hit_tags),
        ranking('c', hit_tags),
    ];
    fs::write(d.join("rank.jsonl"), lines.join("\n") + "\n").unwrap();
}

fn run_eval(d: &Path, extra: &[&str]) -> Value {
    let base = [
        "eval",
        "--scenario",
        "counterfactual",
        "--hits",
        "hits.jsonl",
        "--meta",
        "meta.jsonl",
        "--rankings",
        "rank.jsonl",
        "--out",
        "report.json",
    ];
    ok(leafsim(d, &[&base[..], extra].concat()));
    report(d, "report.json")
}

#[test]
fn map_on_all_relevant_hits_is_one() {
    let tmp = TempDir::new().unwrap();
    eval_fixture(tmp.path(), &["x", "y"], &["x", "y"]);
    let r = run_eval(tmp.path(), &["--protocol", "map", "--top-k", "2"]);
    assert_eq!(r["groups"]["all"]["mean"], 1.0);
    assert_eq!(r["groups"]["malicious"]["mean"], 1.0);
    assert_eq!(r["fn"], "em");
    assert_eq!(r["percentile_levels"], serde_json::json!([1, 10, 50, 95]));
}

#[test]
fn nes_on_swapped_pair_is_half() {
    let tmp = TempDir::new().unwrap();
    eval_fixture(tmp.path(), &["x", "y"], &["y", "x"]);
    let r = run_eval(
        tmp.path(),
        &["--protocol", "relevance", "--fn", "nes", "--top-k", "2"],
    );
    assert_eq!(r["groups"]["all"]["mean"], 0.5);
    let r = run_eval(
        tmp.path(),
        &[
            "--protocol",
            "relevance",
            "--fn",
            "iou",
            "--top-k",
            "2",
            "--pooled",
        ],
    );
    assert_eq!(r["groups"]["all"]["mean"], 1.0);
    assert_eq!(r["groups"]["all"]["count"], 2);
    let r = run_eval(tmp.path(), &["--protocol", "relevance", "--fn", "em"]);
    assert_eq!(r["groups"]["all"]["mean"], 0.0);
}

#[test]
fn relevance_without_rankings_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    eval_fixture(tmp.path(), &["x"], &["x"]);
    let out = leafsim(
        tmp.path(),
        &[
            "eval",
            "--protocol",
            "relevance",
            "--scenario",
            "counterfactual",
            "--hits",
            "hits.jsonl",
            "--meta",
            "meta.jsonl",
            "--out",
            "r.json",
        ],
    );
    assert_eq!(code(&out), 64);
}

#[test]
fn synthetic_pipeline_end_to_end() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let data: PathBuf = d.join("bank");
    ok(leafsim(
        d,
        &[
            "synth",
            "--seed",
            "11",
            "--n-samples",
            "400",
            "--n-trees",
            "32",
            "--out-dir",
            "bank",
        ],
    ));
    assert!(data.join("tags.avclass").exists());
    let steps: [&[&str]; 6] = [
        &[
            "--deterministic",
            "build-index",
            "--leaves",
            "bank/leaves.lsim",
            "--meta",
            "bank/meta.jsonl",
            "--out",
            "bank/index.json",
        ],
        &[
            "query",
            "--index",
            "bank/index.json",
            "--scenario",
            "counterfactual",
            "--exclude-self",
            "--top-k",
            "10",
            "--out",
            "hits.jsonl",
        ],
        &["cooc", "--tags", "bank/tags.avclass", "--out", "cooc.csv"],
        &[
            "enrich",
            "--tags",
            "bank/tags.avclass",
            "--cooc",
            "cooc.csv",
            "--out",
            "enriched.jsonl",
        ],
        &[
            "rank",
            "--tags",
            "bank/tags.avclass",
            "--enriched",
            "enriched.jsonl",
            "--out",
            "rank.jsonl",
        ],
        &[
            "eval",
            "--protocol",
            "label-hom",
            "--scenario",
            "counterfactual",
            "--hits",
            "hits.jsonl",
            "--meta",
            "bank/meta.jsonl",
            "--out",
            "hom.json",
        ],
    ];
    for args in steps {
        ok(leafsim(d, args));
    }
    let manifest = fs::read_to_string(data.join("index.json")).unwrap();
    assert!(manifest.contains("\"leaves.lsim\""), "{manifest}");

    let hom = report(d, "hom.json");
    assert!(
        hom["groups"]["all"]["mean"].as_f64().unwrap() >= 9.0,
        "{hom}"
    );
    assert!(hom["fn"].is_null());

    ok(leafsim(
        d,
        &[
            "eval",
            "--protocol",
            "relevance",
            "--fn",
            "em",
            "--scenario",
            "counterfactual",
            "--hits",
            "hits.jsonl",
            "--meta",
            "bank/meta.jsonl",
            "--rankings",
            "rank.jsonl",
            "--out",
            "rel.json",
        ],
    ));
    let rel = report(d, "rel.json");
    let mean = rel["groups"]["all"]["mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mean));
}
