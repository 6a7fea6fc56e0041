use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lowrank_core::config::ExperimentConfig;
use lowrank_core::datagen::Dataset;
use lowrank_core::model::Params;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lowrank-lab")).args(args).output().expect("binary runs")
}

fn smoke_into(sub: &str, out: &Path) -> Output {
    let cfg = configs_dir().join("smoke.cfg");
    lab(&[sub, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

#[test]
fn shipped_configs_parse() {
    let paper = ExperimentConfig::load(&configs_dir().join("paper.cfg")).unwrap();
    assert_eq!((paper.data.d, paper.data.num_patterns, paper.model.m), (20, 20, 200));
    assert_eq!((paper.model.m_a, paper.model.m_b), (20, 20));
    assert_eq!((paper.data.sigma, paper.model.delta, paper.model.xi), (0.1, 0.1, 0.1));
    ExperimentConfig::load(&configs_dir().join("smoke.cfg")).unwrap();
}

#[test]
fn train_writes_metrics_and_loadable_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let out = smoke_into("train", dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("iter,train_hinge,test_hinge,zero_one,attn_relevant\n0,"));
    assert!(!dir.path().join("rank_sweep.csv").exists());

    let snaps: Vec<PathBuf> = fs::read_dir(dir.path().join("snapshots")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(snaps.len(), 1);
    let name = snaps[0].file_name().unwrap().to_string_lossy().into_owned();
    assert!(name.ends_with("-0") && name.len() == 14, "{name}");
    let (iter, params) = Params::load(&snaps[0].join("iter_000040.lrws")).unwrap();
    assert_eq!(iter, 40);
    assert_eq!(params.w_o.shape(), (24, 8));
    let train = Dataset::load(&snaps[0].join("train.lrds")).unwrap();
    assert_eq!(train.len(), 60);

    // The snapshot of resolved values reproduces the run's config.
    let resolved = ExperimentConfig::load(&dir.path().join("config.resolved.cfg")).unwrap();
    assert_eq!(resolved.output_dir, dir.path());
    assert_eq!(resolved.train.iters, 40);
}

#[test]
fn each_subcommand_writes_its_own_files() {
    let cases: [(&str, &[&str]); 4] = [
        ("rank-sweep", &["rank_sweep.csv", "plotdata/fig1a.csv", "plotdata/fig1b.csv"]),
        ("spectra", &["spectra.csv", "projections.csv", "theorem_report.json", "plotdata/fig2.csv"]),
        ("prune-sweep", &["prune_sweep.csv", "plotdata/fig3a.csv", "plotdata/fig3b.csv"]),
        ("grad-check", &["grad_report.json"]),
    ];
    for (sub, files) in cases {
        let dir = tempfile::tempdir().unwrap();
        let out = smoke_into(sub, dir.path());
        assert!(out.status.success(), "{sub}: {}", String::from_utf8_lossy(&out.stderr));
        for f in files {
            assert!(dir.path().join(f).is_file(), "{sub} did not write {f}");
        }
    }
}

#[test]
fn grad_check_report_is_within_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    assert!(smoke_into("grad-check", dir.path()).status.success());
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("grad_report.json")).unwrap()).unwrap();
    assert!(report["max_rel_error"].as_f64().unwrap() <= 1e-5);
    assert_eq!(report["per_matrix"].as_object().unwrap().len(), 4);
}

#[test]
fn csv_headers_match_the_documented_schemas() {
    let dir = tempfile::tempdir().unwrap();
    assert!(smoke_into("all", dir.path()).status.success());
    let header = |f: &str| fs::read_to_string(dir.path().join(f)).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header("spectra.csv"), "iter,matrix,index,sigma");
    assert_eq!(header("projections.csv"), "matrix,i,j,value");
    assert_eq!(header("rank_sweep.csv"), "rank,hinge,zero_one,attn_relevant");
    assert_eq!(header("prune_sweep.csv"), "order,rate,hinge,zero_one");
    assert_eq!(header("plotdata/fig1a.csv"), "rank,test_hinge");
    assert_eq!(header("plotdata/fig1b.csv"), "rank,attn_relevant");
    assert_eq!(header("plotdata/fig2.csv"), "iter,index,sigma");
    assert_eq!(header("plotdata/fig3a.csv"), "position,neuron,norm,group");
    assert_eq!(header("plotdata/fig3b.csv"), "order,rate,hinge,zero_one");
}

#[test]
fn seed_flag_changes_the_run() {
    let cfg = configs_dir().join("smoke.cfg");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for (d, seed) in dirs.iter().zip(["1", "2"]) {
        let out = lab(&["train", "--config", cfg.to_str().unwrap(), "--out", d.path().to_str().unwrap(), "--seed", seed]);
        assert!(out.status.success());
    }
    let a = fs::read(dirs[0].path().join("metrics.csv")).unwrap();
    let b = fs::read(dirs[1].path().join("metrics.csv")).unwrap();
    assert_ne!(a, b);
    let resolved = fs::read_to_string(dirs[1].path().join("config.resolved.cfg")).unwrap();
    for key in ["data.seed = 2", "model.seed = 2", "train.seed = 2", "grad_check.seed = 2"] {
        assert!(resolved.contains(key), "{key}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.cfg");
    let out = lab(&["train", "--config", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(String::from_utf8_lossy(&out.stderr).lines().count(), 1);

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "data.M = 30\ndata.d = 20\n").unwrap();
    let out = lab(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.M"));

    fs::write(&bad, "train.learning_rate = 0.1\n").unwrap();
    let out = lab(&["all", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.learning_rate"));

    assert_eq!(lab(&["fit", "--config", bad.to_str().unwrap()]).status.code(), Some(1));

    // Output path occupied by a regular file: a runtime failure, not a config problem.
    let blocker = dir.path().join("blocker");
    fs::write(&blocker, "").unwrap();
    let out = smoke_into("grad-check", &blocker.join("sub"));
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
