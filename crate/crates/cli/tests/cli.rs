use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_proxytta");

/// Shrinks any configuration to a few seconds of work.
const TINY: [&str; 14] = [
    "data.source_count=16",
    "data.held_count=8",
    "data.target_count=16",
    "data.scene.height=16",
    "data.scene.width=16",
    "model.height=16",
    "model.width=16",
    "stage.pretrain.epochs=1",
    "stage.init.epochs=1",
    "stage.prepare.epochs=1",
    "stage.prepare.batch_size=8",
    "stage.adapt.batch_size=8",
    "proxy.embed_dim=16",
    "proxy.hidden_dim=16",
];

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn proxytta(runs: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.env("PROXYTTA_RUNS_DIR", runs).env("RUST_LOG", "warn").args(args);
    cmd.output().expect("binary runs")
}

fn tiny(runs: &Path, args: &[&str]) -> Output {
    let mut all: Vec<&str> = args.to_vec();
    for s in TINY {
        all.extend(["--set", s]);
    }
    proxytta(runs, &all)
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn dry_run_with_an_unknown_key_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[stage.adapt]\nlearning_rat = 0.1\n").unwrap();
    let out = proxytta(dir.path(), &["adapt", "--config", cfg.to_str().unwrap(), "--dry-run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
    assert!(std::fs::read_dir(dir.path()).unwrap().count() == 1, "dry run touched disk");
}

#[test]
fn dry_run_prints_the_layered_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let preset = workspace().join("presets/scannet-nlspn-analog.toml");
    let out = proxytta(
        dir.path(),
        &["adapt", "--config", preset.to_str().unwrap(), "--set", "stage.adapt.inner_iter=5", "--seed", "9", "--dry-run"],
    );
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("seed = 9"));
    assert!(text.contains("inner_iter = 5"));
    assert!(text.contains("batch_size = 36"));
}

#[test]
fn shipped_presets_match_the_built_in_tables() {
    let dir = tempfile::tempdir().unwrap();
    ok(&proxytta(dir.path(), &["presets", "--write", dir.path().join("p").to_str().unwrap()]));
    let shipped = workspace().join("presets");
    let mut n = 0;
    for entry in std::fs::read_dir(dir.path().join("p")).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap();
        let want = std::fs::read_to_string(&path).unwrap();
        let have = std::fs::read_to_string(shipped.join(name)).unwrap_or_default();
        assert_eq!(have, want, "presets/{} is stale", name.to_string_lossy());
        n += 1;
    }
    assert_eq!(n, std::fs::read_dir(&shipped).unwrap().count());
}

#[test]
fn adapt_from_a_preset_writes_run_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let preset = workspace().join("presets/nyuv2-nlspn-analog.toml");
    let out = tiny(
        dir.path(),
        &["adapt", "--config", preset.to_str().unwrap(), "--method", "proxytta_fast", "--seed", "0", "--run-name", "a"],
    );
    ok(&out);
    let run = dir.path().join("a");
    for f in ["config.json", "checkpoint.bin", "losses.csv", "metrics.csv", "events.log"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.lines().nth(1).unwrap().starts_with("nyuv2-nlspn,proxytta_fast,0,both,"));
}

#[test]
fn staged_runs_refuse_missing_heads_and_reproduce_from_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path();
    ok(&tiny(runs, &["pretrain", "--run-name", "pre"]));
    let pre = runs.join("pre");

    let refused = tiny(runs, &["adapt", "--from", pre.to_str().unwrap(), "--method", "proxytta_fast", "--run-name", "x"]);
    assert_eq!(refused.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("adaptation layer"));

    ok(&tiny(runs, &["init-adapt-layer", "--from", pre.to_str().unwrap(), "--run-name", "init"]));
    let init = runs.join("init");
    let refused = tiny(runs, &["adapt", "--from", init.to_str().unwrap(), "--run-name", "x"]);
    assert_eq!(refused.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("prepared proxy heads"));

    ok(&tiny(runs, &["prepare", "--from", init.to_str().unwrap(), "--run-name", "prep"]));
    let prep = runs.join("prep");
    ok(&tiny(runs, &["adapt", "--from", prep.to_str().unwrap(), "--method", "proxytta", "--run-name", "ad"]));
    ok(&tiny(runs, &["baseline", "--from", init.to_str().unwrap(), "--method", "cotta", "--run-name", "co"]));

    // The snapshot alone reproduces the run.
    let snap = runs.join("ad/config.json");
    ok(&proxytta(runs, &["adapt", "--from", prep.to_str().unwrap(), "--config", snap.to_str().unwrap(), "--run-name", "ad2"]));
    let a = std::fs::read(runs.join("ad/metrics.csv")).unwrap();
    let b = std::fs::read(runs.join("ad2/metrics.csv")).unwrap();
    assert_eq!(a, b);

    let report = runs.join("report");
    ok(&proxytta(
        runs,
        &["report", runs.join("ad").to_str().unwrap(), runs.join("co").to_str().unwrap(), "--out", report.to_str().unwrap(), "--jobs", "2"],
    ));
    let md = std::fs::read_to_string(report.join("summary.md")).unwrap();
    assert!(md.contains("proxytta") && md.contains("cotta"));
    assert!(report.join("plots/ad.png").is_file());

    let missing = proxytta(runs, &["report", runs.join("nope").to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope"));
}

#[test]
fn sensitivity_workers_match_the_in_process_result() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path();
    ok(&tiny(runs, &["pretrain", "--run-name", "pre"]));
    let from = runs.join("pre");
    ok(&tiny(runs, &["sensitivity", "--from", from.to_str().unwrap(), "--run-name", "s1"]));
    ok(&tiny(runs, &["sensitivity", "--from", from.to_str().unwrap(), "--run-name", "s3", "--jobs", "3"]));
    let a = std::fs::read_to_string(runs.join("s1/metrics.csv")).unwrap();
    let b = std::fs::read_to_string(runs.join("s3/metrics.csv")).unwrap();
    assert_eq!(a, b);
    // Two splits, three densities, three input modes, plus the header.
    assert_eq!(a.lines().count(), 1 + 2 * 3 * 3);
}

#[test]
fn gen_data_and_centroid_run_without_upstream_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path();
    ok(&tiny(runs, &["gen-data", "--run-name", "data"]));
    for split in ["source", "held", "target"] {
        assert!(runs.join("data/data").join(split).join("manifest.json").is_file());
    }
    let out = tiny(runs, &["centroid", "--run-name", "c"]);
    ok(&out);
    assert!(runs.join("c/centroid.json").is_file());
    assert!(String::from_utf8_lossy(&out.stdout).contains("proxy closer"));
}
