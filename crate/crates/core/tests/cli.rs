use std::path::Path;
use std::process::{Command, Output};

fn brl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brl")).args(args).output().expect("brl runs")
}

fn corpus(name: &str) -> String {
    format!("{}/corpus/{name}.brl.s", env!("CARGO_MANIFEST_DIR"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

#[test]
fn assemble_is_canonical() {
    let dir = tempfile::tempdir().unwrap();
    let once = dir.path().join("once.brl.s");
    let o = brl(&["assemble", &corpus("vtable"), "-o", s(&once)]);
    assert!(o.status.success());
    let again = brl(&["assemble", s(&once)]);
    assert_eq!(again.stdout, std::fs::read(&once).unwrap());
    let sites = stdout_json(&brl(&["assemble", &corpus("vtable"), "--sites"]));
    assert!(sites.is_object());
}

#[test]
fn instrument_then_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cb.brl.s");
    let meta = dir.path().join("cb.meta");
    let o = brl(&["instrument", &corpus("callback"), "--policy", "func", "-o", s(&out), "--meta", s(&meta)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let size = stdout_json(&o);
    assert_eq!(size["base_text_instrs"], 24);
    assert_eq!(&std::fs::read(&meta).unwrap()[..4], b"BRLF");

    let report = dir.path().join("r.json");
    let o = brl(&["run", s(&out), "--trace", "--report", s(&report)]);
    assert!(o.status.success());
    let trace = String::from_utf8(o.stderr).unwrap();
    assert!(trace.lines().any(|l| l.ends_with("brl brl:PASS")));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["schema"], "report-v1");
    assert_eq!(r["brl_outcomes"]["fail"], 0);
    assert_eq!(r["output"], serde_json::json!([590]));
}

#[test]
fn run_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.brl.s");
    std::fs::write(&p, ".func main() -> void\na:\n    ld t0, 3(zero)\n").unwrap();
    let o = brl(&["run", s(&p)]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stdout_json(&o)["fault"]["kind"], "misaligned_access");

    std::fs::write(&p, ".func main() -> void\na:\n    frobnicate t0\n").unwrap();
    assert_eq!(brl(&["run", s(&p)]).status.code(), Some(2));
    assert_eq!(brl(&["run", s(&dir.path().join("missing"))]).status.code(), Some(2));
    assert_eq!(brl(&["run"]).status.code(), Some(2));

    std::fs::write(&p, ".func main() -> void\na:\n    jal zero, a\n").unwrap();
    assert_eq!(brl(&["run", s(&p), "--max-steps", "50"]).status.code(), Some(1));
}

#[test]
fn attacks_are_defended() {
    for sc in ["fn_ptr_overwrite", "jop_dispatcher_chain", "bld_bypass", "brstate_replay", "metadata_tamper"] {
        let o = brl(&["attack", "--scenario", sc]);
        assert!(o.status.success(), "{sc}: {}", String::from_utf8_lossy(&o.stdout));
    }
    let o =
        brl(&["attack", "--scenario", "jop_dispatcher_chain", "--program", &corpus("dispatcher"), "--policy", "func"]);
    assert!(String::from_utf8(o.stdout).unwrap().contains("blocked: cfp_unauthorized at gadget"));
    assert_eq!(
        brl(&["attack", "--scenario", "jop_dispatcher_chain", "--program", &corpus("dijkstra")]).status.code(),
        Some(2)
    );
    assert_eq!(brl(&["attack", "--scenario", "rowhammer"]).status.code(), Some(2));
}

#[test]
fn eval_writes_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("report.json");
    let csv = dir.path().join("report.csv");
    let o = brl(&["eval", "--models", "brl3,brl10", "--out", s(&json), "--csv", s(&csv)]);
    assert!(o.status.success());
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(r["programs"].as_array().unwrap().len(), 12);
    assert_eq!(r["models"].as_array().unwrap().len(), 2);
    let table = std::fs::read_to_string(&csv).unwrap();
    assert!(table.starts_with("program,config,overhead_pct_brl3,overhead_pct_brl10,"));
    assert_eq!(table.lines().count(), 1 + 24 + 6);
    assert!(table.lines().any(|l| l.starts_with("median,brl_cfg,")));
    assert_eq!(brl(&["eval", "--models", "fast"]).status.code(), Some(2));
}

#[test]
fn eval_reads_corpus_dir() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(corpus("qsort"), dir.path().join("qsort.brl.s")).unwrap();
    let o = brl(&["eval", "--corpus", s(dir.path()), "--sequential"]);
    assert!(o.status.success());
    assert_eq!(stdout_json(&o)["programs"][0]["name"], "qsort");
}

#[test]
fn ec_reports_reduction_and_dumps_policy() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("policy.json");
    let o = brl(&["ec", &corpus("rbtree"), "--policy", "cfg", "--baseline", "func", "--dump-policy", s(&dump)]);
    assert!(o.status.success());
    let ec = stdout_json(&o);
    assert_eq!(ec["avg_ec"], 1.0);
    assert_eq!(ec["reduction_pct"], 50.0);
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(&dump).unwrap()).unwrap();
    assert_eq!(doc["schema"], "policy-v1");
    assert_eq!(doc["granularity"], "function");
}
