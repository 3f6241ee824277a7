use std::path::Path;
use std::process::{Command, Output};

fn hotspot(catalog: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hotspot"))
        .arg("--catalog")
        .arg(catalog)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success(), "stdout: {stdout}\nstderr: {}", String::from_utf8_lossy(&out.stderr));
    stdout
}

#[test]
fn synth_ingest_index_query_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let catalog = tmp.path().join("catalog");
    let data_s = data.to_str().unwrap();

    let out = ok(hotspot(&catalog, &["synth", "--out", data_s, "--labels", "3", "--per-label", "2", "--width", "256", "--height", "192", "--seed", "4"]));
    assert!(out.contains("wrote 6 images"));

    // Querying before any index exists fails cleanly.
    let img = data.join("label_001/img_0.png");
    ok(hotspot(&catalog, &["ingest", data_s]));
    let failed = hotspot(&catalog, &["query", img.to_str().unwrap()]);
    assert!(!failed.status.success());

    let out = ok(hotspot(&catalog, &["index", "--num-trees", "2", "--max-checks", "exact"]));
    assert!(out.contains("generation 1: 6 images"), "{out}");

    let out = ok(hotspot(&catalog, &["query", img.to_str().unwrap(), "--roi", "0,0,256,192", "--top", "1"]));
    let first = out.lines().nth(1).unwrap();
    assert!(first.contains("label_001"), "{out}");

    let json = ok(hotspot(&catalog, &["query", img.to_str().unwrap(), "--json", "--k", "2", "--k-sr", "all"]));
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["config"]["k"], 2);
    assert_eq!(v["config"]["k_sr"], serde_json::Value::Null);
    assert_eq!(v["labels"].as_array().unwrap().len(), 3);

    let report = tmp.path().join("report.json");
    let out = ok(hotspot(&catalog, &["eval", "--out", report.to_str().unwrap()]));
    assert!(out.contains("Rank>1 label"), "{out}");
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 6);
    assert_eq!(v["eligible_queries"], 6);
}

#[test]
fn eval_with_build_and_pq_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let catalog = tmp.path().join("catalog");
    ok(hotspot(&catalog, &["synth", "--out", data.to_str().unwrap(), "--labels", "2", "--per-label", "2", "--width", "256", "--height", "192"]));
    ok(hotspot(&catalog, &["ingest", data.to_str().unwrap()]));
    let out = ok(hotspot(&catalog, &["eval", "--build", "--backend", "pq", "--k", "5", "--delta", "LNBNN", "--max-queries", "2"]));
    assert!(out.contains("1vM+PQ"), "{out}");
    assert!(out.contains("queries: 2 of 4 eligible"), "{out}");
    assert!(out.contains("pq codes:"), "{out}");
}

#[test]
fn bad_flags_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        vec!["eval", "--k-sr", "some"],
        vec!["eval", "--algorithm", "2v2"],
        vec!["eval", "--delta", "nope"],
        vec!["query", "x.png", "--roi", "1,2"],
    ] {
        assert!(!hotspot(tmp.path(), &args).status.success(), "{args:?}");
    }
}
