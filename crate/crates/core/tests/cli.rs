use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use matkv_core::cli::{BenchCsvRow, BenchSuite, CostReport, IngestSummary, QueryReport};
use matkv_core::pipeline::Mode;

const BIN: &str = env!("CARGO_BIN_EXE_matkv");

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn config(&self, extra: &str) -> PathBuf {
        let store = self.path("store");
        let body = format!(
            r#"{{"model": {{"n_layers": 2, "n_heads": 2, "head_dim": 8, "vocab_size": 256, "ffn_dim": 64, "seed": 0, "max_position": 4096}},
                "store_dir": {:?}, "chunk_size": 128, "top_k": 1, "max_new_tokens": 6{extra}}}"#,
            store.display().to_string()
        );
        self.write("config.json", &body)
    }

    fn workload(&self, n_docs: usize, n_queries: usize, top_k: usize) -> PathBuf {
        let spec = self.write(
            "spec.json",
            &format!(r#"{{"n_docs": {n_docs}, "doc_len_tokens": 128, "n_queries": {n_queries}, "top_k": {top_k}, "zipf_s": 1.0, "seed": 3}}"#),
        );
        let out = self.path("wl");
        let o = run(&[&s(&spec), &s(&out)], "workload", &[]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    }
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn run(args: &[&str], sub: &str, globals: &[&str]) -> Output {
    Command::new(BIN).args(globals).arg(sub).args(args).env_remove("MATKV_STORE_DIR").output().unwrap()
}

fn ok_json<T: serde::de::DeserializeOwned>(o: &Output) -> T {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn ingest(cfg: &Path, corpus: &Path) -> IngestSummary {
    ok_json(&run(&[&s(corpus)], "ingest", &["--config", &s(cfg)]))
}

#[test]
fn ingest_eager_materializes_every_chunk() {
    let sb = Sandbox::new();
    let wl = sb.workload(100, 5, 1);
    let cfg = sb.config("");
    let summary = ingest(&cfg, &wl.join("corpus.jsonl"));
    assert_eq!(summary.schema_version, 1);
    assert_eq!((summary.docs, summary.chunks, summary.materialized), (100, 100, 100));
    // header + 2 layers * (K, V) * 128 tokens * 16 floats * 4 bytes
    assert_eq!(summary.bytes, 100 * (41 + 2 * 2 * 128 * 16 * 4));
    assert!(sb.path("store").join("index.jsonl").exists());
}

#[test]
fn ingest_lazy_materializes_nothing() {
    let sb = Sandbox::new();
    let wl = sb.workload(20, 5, 1);
    let cfg = sb.config(r#", "admission": {"kind": "lazy_on_first_access"}"#);
    let summary = ingest(&cfg, &wl.join("corpus.jsonl"));
    assert_eq!((summary.chunks, summary.materialized, summary.bytes), (20, 0, 0));
}

#[test]
fn malformed_corpus_line_is_cited() {
    let sb = Sandbox::new();
    let mut text = String::new();
    for i in 0..6 {
        text.push_str(&format!("{{\"id\": \"d{i}\", \"tokens\": [1, 2, 3]}}\n"));
    }
    text.push_str("{\"id\": \"d6\", \"tokens\": [1, 2,\n");
    let corpus = sb.write("corpus.jsonl", &text);
    let o = run(&[&s(&corpus)], "ingest", &["--config", &s(&sb.config(""))]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains(":7:"), "{err}");
}

#[test]
fn query_modes_agree_with_one_document() {
    let sb = Sandbox::new();
    let wl = sb.workload(30, 5, 1);
    let cfg = sb.config("");
    ingest(&cfg, &wl.join("corpus.jsonl"));
    let q = |mode: &str| -> QueryReport {
        ok_json(&run(&["--tokens", "5,17,99,3", "--mode", mode], "query", &["--config", &s(&cfg)]))
    };
    let vanilla = q("vanilla");
    assert_eq!(vanilla.breakdown.load_s, 0.0);
    assert_eq!(vanilla.retrieved_ids.len(), 1);
    for mode in ["matkv", "matkv-overlap"] {
        let r = q(mode);
        assert_eq!(r.generated, vanilla.generated, "{mode}");
        assert_eq!(r.retrieved_ids, vanilla.retrieved_ids);
        assert!(r.breakdown.load_s > 0.0);
    }
    assert_eq!(vanilla.generated.len(), 6);
}

#[test]
fn usage_errors_exit_one() {
    let sb = Sandbox::new();
    let cfg = sb.config("");
    assert_eq!(run(&["--tokens", "1", "--mode", "turbo"], "query", &["--config", &s(&cfg)]).status.code(), Some(1));
    assert_eq!(run(&[], "frobnicate", &[]).status.code(), Some(1));
    assert_eq!(run(&["--params", &s(&sb.path("missing.json"))], "costmodel", &[]).status.code(), Some(1));
    assert_eq!(run(&[], "costmodel", &["--out", "xml"]).status.code(), Some(1));
    let spec = sb.write("bad.json", r#"{"n_docs": 5, "top_k": 6}"#);
    assert_eq!(run(&[&s(&spec), &s(&sb.path("out"))], "workload", &[]).status.code(), Some(1));
    assert_eq!(run(&["--help"], "query", &[]).status.code(), Some(0));
}

#[test]
fn query_before_ingest_is_a_runtime_error() {
    let sb = Sandbox::new();
    let o = run(&["--tokens", "1,2"], "query", &["--config", &s(&sb.config(""))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn costmodel_reports() {
    let r: CostReport = ok_json(&run(&[], "costmodel", &[]));
    assert!((r.break_even.t_days - 11.574).abs() < 1e-3);
    assert!((r.energy.ratio - 1214.29).abs() < 0.01);
    let sb = Sandbox::new();
    let p = sb.write("p.json", r#"{"prefill_energy_j": 175, "load_energy_j": 0.05}"#);
    let r: CostReport = ok_json(&run(&["--params", &s(&p), "--sec-per-mb", "as-written"], "costmodel", &[]));
    assert!((r.energy.ratio - 3500.0).abs() < 1e-9);
    assert!((r.break_even.t_seconds - 80.0).abs() < 1e-9);
}

#[test]
fn workload_is_byte_identical_per_seed() {
    let sb = Sandbox::new();
    let spec = sb.write("spec.json", r#"{"n_docs": 50, "n_queries": 40, "top_k": 5, "zipf_s": 1.0, "seed": 1}"#);
    let gen = |out: &str, seed: &str| {
        let o = run(&[&s(&spec), &s(&sb.path(out))], "workload", &["--seed", seed]);
        assert!(o.status.success());
        (fs::read(sb.path(out).join("corpus.jsonl")).unwrap(), fs::read(sb.path(out).join("trace.jsonl")).unwrap())
    };
    assert_eq!(gen("a", "9"), gen("b", "9"));
    assert_ne!(gen("a", "9").1, gen("c", "10").1);
    let skew: Value = serde_json::from_slice(&fs::read(sb.path("a").join("skew.json")).unwrap()).unwrap();
    assert_eq!(skew["total_accesses"], 200);
}

#[test]
fn bench_simulated_makespans_and_equal_outputs() {
    let sb = Sandbox::new();
    let wl = sb.workload(40, 3, 1);
    let cfg = sb.config("");
    ingest(&cfg, &wl.join("corpus.jsonl"));
    let sim = sb.write("sim.json", r#"{"load_s": [2, 2, 2], "compute_s": [3, 3, 3]}"#);
    let suite: BenchSuite = ok_json(&run(
        &[&s(&wl.join("trace.jsonl")), "--batch-size", "1", "--simulate", &s(&sim)],
        "bench",
        &["--config", &s(&cfg)],
    ));
    assert_eq!(suite.schema_version, 1);
    let get = |m: Mode| suite.report(m).unwrap();
    assert_eq!(get(Mode::Vanilla).makespan_s, 15.0);
    assert_eq!(get(Mode::MatKv).makespan_s, 15.0);
    assert_eq!(get(Mode::MatKvOverlap).makespan_s, 11.0);
    assert_eq!(get(Mode::MatKvOverlap).speedup_vs_vanilla, Some(15.0 / 11.0));
    assert_eq!(get(Mode::Vanilla).generated, get(Mode::MatKv).generated);
    assert_eq!(get(Mode::MatKv).generated, get(Mode::MatKvOverlap).generated);
    assert_eq!(get(Mode::MatKv).store_files, 40);
}

#[test]
fn single_request_overlap_matches_serialized() {
    let sb = Sandbox::new();
    let wl = sb.workload(10, 1, 1);
    let cfg = sb.config("");
    ingest(&cfg, &wl.join("corpus.jsonl"));
    let sim = sb.write("sim.json", r#"{"load_s": [0.05], "compute_s": [0.05], "clock": "sleep"}"#);
    let suite: BenchSuite = ok_json(&run(
        &[&s(&wl.join("trace.jsonl")), "--mode", "matkv,matkv-overlap", "--simulate", &s(&sim)],
        "bench",
        &["--config", &s(&cfg)],
    ));
    let ser = suite.report(Mode::MatKv).unwrap().makespan_s;
    let ovl = suite.report(Mode::MatKvOverlap).unwrap().makespan_s;
    assert!((ovl - ser).abs() <= 0.05 * ser, "serialized {ser} vs overlap {ovl}");
    assert!(suite.report(Mode::Vanilla).is_none());
    assert_eq!(suite.report(Mode::MatKv).unwrap().speedup_vs_vanilla, None);
}

#[test]
fn bench_json_and_csv_round_trip() {
    let sb = Sandbox::new();
    let wl = sb.workload(20, 7, 2);
    let cfg = sb.config("");
    ingest(&cfg, &wl.join("corpus.jsonl"));
    // trace lines without ids fall back to search; without tokens they are synthesized
    let trace = sb.write("t.jsonl", "{\"query_tokens\": [1, 2, 3]}\n{\"query_index\": 4}\n");
    let bench = |trace: &Path, out: &str| {
        run(&[&s(trace), "--batch-size", "3"], "bench", &["--config", &s(&cfg), "--out", out, "--seed", "0"])
    };
    let o = bench(&wl.join("trace.jsonl"), "json");
    let suite: BenchSuite = ok_json(&o);
    let text = String::from_utf8(o.stdout.clone()).unwrap();
    let reparsed: BenchSuite = serde_json::from_str(&text).unwrap();
    assert_eq!(reparsed, suite);
    assert_eq!(serde_json::to_string_pretty(&reparsed).unwrap() + "\n", text);
    assert_eq!(suite.report(Mode::Vanilla).unwrap().batches.len(), 3);

    let o = bench(&wl.join("trace.jsonl"), "csv");
    assert!(o.status.success());
    let mut rd = csv::Reader::from_reader(o.stdout.as_slice());
    let rows: Vec<BenchCsvRow> = rd.deserialize().collect::<Result<_, _>>().unwrap();
    assert_eq!(rows.len(), 9);
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).unwrap();
    }
    assert_eq!(w.into_inner().unwrap(), o.stdout);

    let a: BenchSuite = ok_json(&bench(&trace, "json"));
    let b: BenchSuite = ok_json(&bench(&trace, "json"));
    for m in Mode::ALL {
        assert_eq!(a.report(m).unwrap().generated, b.report(m).unwrap().generated);
    }
}

#[test]
fn store_dir_env_overrides_config() {
    let sb = Sandbox::new();
    let wl = sb.workload(5, 1, 1);
    let cfg = sb.config("");
    let alt = sb.path("elsewhere");
    let o = Command::new(BIN)
        .args(["--config", &s(&cfg), "ingest", &s(&wl.join("corpus.jsonl"))])
        .env("MATKV_STORE_DIR", &alt)
        .output()
        .unwrap();
    let summary: IngestSummary = ok_json(&o);
    assert_eq!(summary.materialized, 5);
    assert!(alt.join("index.jsonl").exists());
    assert!(!sb.path("store").exists());
}

#[test]
fn query_csv_has_one_row() {
    let sb = Sandbox::new();
    let wl = sb.workload(5, 1, 1);
    let cfg = sb.config("");
    ingest(&cfg, &wl.join("corpus.jsonl"));
    let o = run(&["--tokens", "7 8 9"], "query", &["--config", &s(&cfg), "--out", "csv"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.starts_with("schema_version,mode,"));
}
