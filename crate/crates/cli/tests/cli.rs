//! End-to-end behavior of the `astc` binary on small synthetic runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use astc_core::testkit::{tiger, tiger_oracle, TigerSpec};
use astc_core::textfmt::Provenance;

const SMALL: &str = r#"
seed = 3
[synth]
n_train = 150
n_test = 40
[gmm]
k = 5
n_init = 2
[agent]
epochs = 2
max_expansions = 10
[eval]
bootstrap = 50
"#;

fn astc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_astc"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = astc(dir, args);
    assert!(
        out.status.success(),
        "astc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

fn prepare(dir: &Path) {
    for cmd in ["synth-gen", "fit-gmm", "fit-model"] {
        ok(dir, &[cmd, "--config", "run.toml"]);
    }
}

fn pipeline(dir: &Path) {
    prepare(dir);
    ok(dir, &["train", "--config", "run.toml"]);
    ok(dir, &["evaluate", "--config", "run.toml"]);
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn missing_dataset_is_a_usage_error() {
    let dir = setup(SMALL);
    let out = astc(dir.path(), &["fit-gmm", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.episodes"));
}

#[test]
fn missing_config_and_unknown_keys_are_usage_errors() {
    let dir = setup("seed = 1\n[agent]\nbogus = 3\n");
    assert_eq!(astc(dir.path(), &["synth-gen", "--config", "absent.toml"]).status.code(), Some(2));
    assert_eq!(astc(dir.path(), &["synth-gen", "--config", "run.toml"]).status.code(), Some(2));
    assert_eq!(astc(dir.path(), &["no-such-command"]).status.code(), Some(2));
}

#[test]
fn identical_runs_produce_identical_files() {
    let a = setup(SMALL);
    let b = setup(SMALL);
    pipeline(a.path());
    pipeline(b.path());
    let fa = files(&a.path().join("out"));
    assert_eq!(fa, files(&b.path().join("out")));
    for f in ["metrics.csv", "agent.txt", "report/summary.json", "report/actions.csv", "report/bootstrap.csv"] {
        assert!(fa.contains(&PathBuf::from(f)), "missing {f}");
    }
    for f in &fa {
        let x = fs::read(a.path().join("out").join(f)).unwrap();
        let y = fs::read(b.path().join("out").join(f)).unwrap();
        assert!(x == y, "{} differs between identical runs", f.display());
    }
}

#[test]
fn zero_epochs_leaves_the_initialization() {
    let dir = setup(SMALL);
    prepare(dir.path());
    ok(dir.path(), &["train", "--config", "run.toml", "--epochs", "0"]);
    let out = dir.path().join("out");
    assert_eq!(
        fs::read_to_string(out.join("agent.txt")).unwrap(),
        fs::read_to_string(out.join("checkpoints/epoch_000.txt")).unwrap()
    );
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().filter(|l| !l.starts_with('#')).count(), 1, "header only");
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let full = setup(SMALL);
    prepare(full.path());
    ok(full.path(), &["train", "--config", "run.toml"]);

    let split = setup(SMALL);
    prepare(split.path());
    ok(split.path(), &["train", "--config", "run.toml", "--epochs", "1"]);
    ok(split.path(), &["train", "--config", "run.toml", "--resume", "out/checkpoints/epoch_001.txt"]);

    for f in ["metrics.csv", "agent.txt", "checkpoints/epoch_002.txt"] {
        assert_eq!(
            fs::read_to_string(full.path().join("out").join(f)).unwrap(),
            fs::read_to_string(split.path().join("out").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn evaluate_refuses_a_checkpoint_from_another_model() {
    let dir = setup(SMALL);
    pipeline(dir.path());
    // Refit the model under a different configuration.
    fs::write(dir.path().join("other.toml"), format!("{SMALL}\n[model]\nkappa = 3.0\n")).unwrap();
    ok(dir.path(), &["fit-model", "--config", "other.toml"]);
    let out = astc(dir.path(), &["evaluate", "--config", "other.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("different model"));
}

#[test]
fn report_partitions_episodes_into_terciles() {
    let dir = setup(SMALL);
    pipeline(dir.path());
    let text = fs::read_to_string(dir.path().join("out/report/episodes.csv")).unwrap();
    let mut rows: Vec<(f64, usize)> = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("episode"))
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[4].parse().unwrap(), f[5].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 40);
    let sizes: Vec<usize> = (0..3).map(|g| rows.iter().filter(|r| r.1 == g).count()).collect();
    assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1, "{sizes:?}");
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    assert!(rows.windows(2).all(|w| w[0].1 <= w[1].1), "groups follow deviation order");
}

fn write_tiger(dir: &Path) -> TigerSpec {
    let spec = TigerSpec::default();
    fs::write(dir.join("tiger.txt"), tiger(&spec).to_text(&Provenance::new("fixture", 0))).unwrap();
    spec
}

fn field(out: &str, key: &str) -> String {
    out.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} ")))
        .unwrap_or_else(|| panic!("no {key} in {out}"))
        .to_string()
}

#[test]
fn plan_picks_the_optimal_tiger_action() {
    let dir = setup("");
    let spec = write_tiger(dir.path());
    for p in [0.5, 0.97, 0.03] {
        let belief = format!("{p},{}", 1.0 - p);
        let out = ok(
            dir.path(),
            &["plan", "--model", "tiger.txt", "--belief", &belief, "--budget", "300", "--dump", "tree.txt"],
        );
        let action: usize = field(&out, "best_action_bin").parse().unwrap();
        assert_eq!(action, tiger_oracle(&spec, p).0, "belief {belief}");
        let lower: f64 = field(&out, "root_lower").parse().unwrap();
        let upper: f64 = field(&out, "root_upper").parse().unwrap();
        assert!(lower <= upper);
        assert!(fs::read_to_string(dir.path().join("tree.txt")).unwrap().lines().count() > 2);
    }
}

#[test]
fn plan_with_zero_budget_expands_nothing() {
    let dir = setup("");
    write_tiger(dir.path());
    let out = ok(dir.path(), &["plan", "--model", "tiger.txt", "--belief", "0.5,0.5", "--budget", "0"]);
    assert_eq!(field(&out, "expansions_used"), "0");
}

#[test]
fn plan_rejects_malformed_beliefs() {
    let dir = setup("");
    write_tiger(dir.path());
    for bad in ["0.5,0.6", "1.0", "0.5,abc", "-0.5,1.5"] {
        let out = astc(dir.path(), &["plan", "--model", "tiger.txt", "--belief", bad]);
        assert_eq!(out.status.code(), Some(2), "belief {bad}");
    }
    let out = astc(dir.path(), &["plan", "--model", "tiger.txt"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn one_epoch_on_tiny_data_is_quick() {
    let dir = setup("seed = 5\n[synth]\nn_train = 10\nn_test = 5\n[gmm]\nk = 3\n");
    prepare(dir.path());
    let started = std::time::Instant::now();
    ok(dir.path(), &["train", "--config", "run.toml", "--epochs", "1"]);
    assert!(started.elapsed().as_secs() < 60);
    let config = fs::read_to_string(dir.path().join("out/configs/train.toml")).unwrap();
    assert!(config.starts_with("# config_hash="));
    assert!(config.contains("epochs = 1"));
}
