use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use phyloembed::phylo::parse_newick;
use serde_json::{json, Value};

fn run(sub: &str, dir: &Path, config: Value) -> Output {
    let cfg = dir.join(format!("{sub}.json"));
    fs::write(&cfg, config.to_string()).unwrap();
    Command::new(env!("CARGO_BIN_EXE_phyloembed"))
        .arg(sub)
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap()
}

fn error_record(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error record");
    serde_json::from_str(line).unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn nj_recovers_three_taxon_star() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("d.csv"),
        ",A,B,C\nA,0,0.3,0.4\nB,0.3,0,0.5\nC,0.4,0.5,0\n",
    )
    .unwrap();
    let out = tmp.path().join("out");
    let o = run(
        "nj",
        tmp.path(),
        json!({"seed": 0, "input": tmp.path().join("d.csv"), "output_dir": out}),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let tree = parse_newick(&fs::read_to_string(out.join("tree.nwk")).unwrap()).unwrap();
    let mut pendant: Vec<(String, f64)> = tree
        .edges()
        .iter()
        .filter_map(|e| {
            [e.a, e.b]
                .into_iter()
                .find_map(|n| tree.label(n).map(|l| (l.to_string(), e.length)))
        })
        .collect();
    pendant.sort_by(|a, b| a.0.cmp(&b.0));
    for ((l, got), (want_l, want)) in pendant.iter().zip([("A", 0.1), ("B", 0.2), ("C", 0.3)]) {
        assert_eq!(l, want_l);
        assert!((got - want).abs() < 1e-12, "{l}: {got}");
    }
    assert_eq!(manifest(&out)["status"], "ok");
}

#[test]
fn trim_keeps_conserved_alignment() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = "ACGTTGCAAC".repeat(6);
    let fasta: String = ["s1", "s2", "s3", "s4"]
        .iter()
        .map(|l| format!(">{l}\n{seq}\n"))
        .collect();
    fs::write(tmp.path().join("a.fasta"), &fasta).unwrap();
    let out = tmp.path().join("out");
    let o = run(
        "trim",
        tmp.path(),
        json!({"seed": 0, "input": tmp.path().join("a.fasta"), "output_dir": out}),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trimmed =
        phyloembed::seqio::parse_fasta(&fs::read_to_string(out.join("trimmed.fasta")).unwrap())
            .unwrap();
    let original = phyloembed::seqio::parse_fasta(&fasta).unwrap();
    assert_eq!(trimmed, original);
    assert_eq!(manifest(&out)["summary"]["kept_fraction"], 1.0);
}

#[test]
fn missing_seed_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = run("synth", tmp.path(), json!({"output_dir": out}));
    assert_eq!(o.status.code(), Some(1));
    let rec = error_record(&o);
    assert_eq!(rec["kind"], "validation");
    assert_eq!(rec["command"], "synth");
    assert!(!out.exists());
}

#[test]
fn bad_configs_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let unknown = run(
        "synth",
        tmp.path(),
        json!({"seed": 1, "output_dir": out, "bogus": 3}),
    );
    assert_eq!(unknown.status.code(), Some(1));
    let missing = run(
        "dist",
        tmp.path(),
        json!({"seed": 1, "output_dir": out, "input": tmp.path().join("nope.fasta")}),
    );
    assert_eq!(missing.status.code(), Some(1));
    assert!(error_record(&missing)["message"]
        .as_str()
        .unwrap()
        .contains("nope.fasta"));
    let usage = Command::new(env!("CARGO_BIN_EXE_phyloembed"))
        .arg("frobnicate")
        .output()
        .unwrap();
    assert_eq!(usage.status.code(), Some(1));
    assert_eq!(error_record(&usage)["kind"], "validation");
}

#[test]
fn runtime_failure_is_quarantined() {
    let tmp = tempfile::tempdir().unwrap();
    // asymmetric matrix
    fs::write(
        tmp.path().join("d.csv"),
        ",A,B,C\nA,0,0.3,0.4\nB,0.9,0,0.5\nC,0.4,0.5,0\n",
    )
    .unwrap();
    let out = tmp.path().join("out");
    let o = run(
        "nj",
        tmp.path(),
        json!({"seed": 0, "input": tmp.path().join("d.csv"), "output_dir": out}),
    );
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_record(&o)["kind"], "runtime");
    let q = out.join("quarantine/nj");
    let err: Value =
        serde_json::from_str(&fs::read_to_string(q.join("error.json")).unwrap()).unwrap();
    assert_eq!(err["exit_code"], 2);
    assert_eq!(manifest(&q)["status"], "failed");
    assert!(!out.join("tree.nwk").exists());
    assert!(!out.join("manifest.json").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let world = tmp.path().join("w");
    assert!(
        run("synth", tmp.path(), json!({"seed": 5, "output_dir": world}))
            .status
            .success()
    );
    let fasta = world.join("world/sequences.fasta");
    for (sub, cfg, files) in [
        (
            "bootstrap",
            json!({"seed": 3, "input": fasta, "replicates": 10}),
            vec!["distances.csv", "stderr.csv", "ci_low.csv"],
        ),
        (
            "train",
            json!({"seed": 2}),
            vec!["model.ckpt", "split.json", "eval.json"],
        ),
    ] {
        let mut dirs = Vec::new();
        for k in 0..2 {
            let mut c = cfg.clone();
            let d = tmp.path().join(format!("{sub}{k}"));
            c["output_dir"] = json!(d);
            let o = run(sub, tmp.path(), c);
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
            dirs.push(d);
        }
        for f in files {
            assert_eq!(
                fs::read(dirs[0].join(f)).unwrap(),
                fs::read(dirs[1].join(f)).unwrap(),
                "{sub}/{f}"
            );
        }
    }
}

#[test]
fn out_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("s.json");
    fs::write(
        &cfg,
        json!({"seed": 1, "output_dir": tmp.path().join("ignored")}).to_string(),
    )
    .unwrap();
    let out = tmp.path().join("chosen");
    let o = Command::new(env!("CARGO_BIN_EXE_phyloembed"))
        .args(["synth", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success());
    let m = manifest(&out);
    assert_eq!(m["seed"], 1);
    assert!(m["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .any(|a| a["path"] == "world/sequences.fasta"));
    assert!(!tmp.path().join("ignored").exists());
}
