use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "diffusion.steps=4",
    "diffusion.hidden=16",
    "diffusion.embed_dim=8",
    "data.train_size=400",
    "pretrain.max_steps=40",
    "pretrain.min_steps=20",
    "pretrain.eval_every=20",
    "pretrain.accuracy_threshold=0",
    "pretrain.eval_samples_per_class=4",
    "classifier.epochs=1",
    "classifier.hidden=16",
    "critic.hidden=8",
    "critic.embed_dim=8",
    "critic.n_traj=16",
    "critic.epochs=2",
    "policy.iterations=2",
    "policy.traj_per_iteration=4",
    "policy.batch_size=4",
    "eval.forget_samples=8",
    "eval.retain_samples=4",
    "eval.every=1",
    "diag.variance_batches=3",
    "diag.variance_batch_size=4",
    "diag.bootstrap_resamples=4",
    "diag.unbiased_sizes=[4, 8]",
    "diag.toy_samples=500",
    "diag.ablation_seeds=2",
    "diag.ablation_n_traj=8",
    "diag.ablation_epochs=1",
    "diag.probe_states=3",
    "diag.mc_rollouts=5",
];

fn cgru(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgru"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny(cmd: &[&str], out: &Path) -> Output {
    let mut args: Vec<&str> = cmd.to_vec();
    args.extend(["--out", out.to_str().unwrap()]);
    for s in TINY {
        args.extend(["--set", s]);
    }
    cgru(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn help_lists_flags_for_every_subcommand() {
    for sub in ["pretrain", "classifier", "critic", "unlearn", "eval", "diag", "full", "report"] {
        let o = cgru(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        let text = stdout(&o);
        for flag in ["--config", "--set", "--out"] {
            assert!(text.contains(flag), "{sub} help lacks {flag}");
        }
    }
    assert!(stdout(&cgru(&["unlearn", "--help"])).contains("--method"));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = cgru(&["eval", "--out", out, "--set", "policy.iterations=banana"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("policy.iterations"));

    let o = cgru(&["eval", "--out", out, "--set", "policy.bogus=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("policy.bogus"));

    let o = cgru(&["eval", "--out", out, "--config", "/definitely/not/here.toml"]);
    assert_eq!(o.status.code(), Some(2));

    assert_eq!(cgru(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(cgru(&["unlearn", "--method", "sgd"]).status.code(), Some(2));
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_cgru"))
        .args(["report", "--out", "/tmp/unused"])
        .env("CGRU_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("CGRU_THREADS"));
}

#[test]
fn unlearn_without_critic_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "seed = 3\n").unwrap();
    let o = cgru(&[
        "unlearn",
        "--method",
        "cgru",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("critic.ckpt"), "{}", stderr(&o));
}

#[test]
fn config_file_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[policy]\nitrations = 3\n").unwrap();
    let o = cgru(&["report", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("itrations"), "{}", stderr(&o));
}

#[test]
fn report_on_empty_dir_names_missing_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = cgru(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("metrics_cgru.csv"));
}

#[test]
fn locked_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(".lock"), "1").unwrap();
    let o = tiny(&["classifier"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("locked"));
}

#[test]
fn full_run_then_report_and_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny(&["full"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    let artifacts = manifest["artifacts"].as_object().unwrap();
    for name in ["base.ckpt", "critic.ckpt", "classifier.ckpt", "unlearned_cgru.ckpt", "metrics_ddpo.csv"] {
        assert!(artifacts.contains_key(name), "{name}");
    }
    for a in artifacts.values() {
        assert!(dir.path().join(a["path"].as_str().unwrap()).exists());
    }
    assert!(!dir.path().join(".lock").exists());

    let o = tiny(&["report"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("cgru") && text.contains("ddpo"), "{text}");
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);

    for exp in ["variance", "unbiasedness", "ablation", "baseline-optimum", "fidelity"] {
        let o = tiny(&["diag", exp], dir.path());
        assert_eq!(o.status.code(), Some(0), "{exp}: {}", stderr(&o));
    }
    let sweep = fs::read_to_string(dir.path().join("unbiasedness.csv")).unwrap();
    let mut lines = sweep.lines();
    assert_eq!(lines.next(), Some("n,b_norm,grad_norm,ratio"));
    let ns: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ns, ["4", "8"]);
    let ablation = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert!(ablation.starts_with("model_kind,held_out_mse,seed\n"));
    assert_eq!(ablation.lines().count(), 5);
}

#[test]
fn rerun_overwrites_with_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tiny(&["classifier"], dir.path()).status.code(), Some(0));
    assert_eq!(tiny(&["pretrain"], dir.path()).status.code(), Some(0));
    let first = fs::read(dir.path().join("base.ckpt")).unwrap();
    assert_eq!(tiny(&["pretrain"], dir.path()).status.code(), Some(0));
    assert_eq!(fs::read(dir.path().join("base.ckpt")).unwrap(), first);
}
