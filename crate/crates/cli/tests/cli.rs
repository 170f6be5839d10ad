use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
[experiment]
rounds = 2
budget = 5
mode = "mme"
seeds = [0, 1]

[strategy]
name = "clue"

[model]
hidden = [8]

[optimizer.source]
epochs = 3
[optimizer.unsupervised]
epochs = 1
[optimizer.round]
epochs = 2

[data]
kind = "synthetic"
num_classes = 3
source_count = 120
target_count = 150
rotation_deg = 30.0
seed = 11
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ada-clue"));
    c.env_remove("CLUE_ADA_THREADS").env_remove("SOURCE_DATE_EPOCH");
    c
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn data_rows(csv: &str) -> Vec<&str> {
    csv.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .collect()
}

#[test]
fn run_writes_one_row_per_round_and_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let out = dir.path().join("res/tiny.csv");
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let csv = std::fs::read_to_string(&out).unwrap();
    let header: Vec<&str> = csv.lines().take(5).collect();
    assert!(header[0].starts_with("# config_hash="));
    assert_eq!(header[1], "# seeds=0;1");
    assert_eq!(header[2], "# strategy=clue");
    assert!(header[3].starts_with("# timestamp="));
    assert_eq!(header[4], "seed,round,labels_used,accuracy,mean_entropy,wall_ms");

    let rows = data_rows(&csv);
    assert_eq!(rows.len(), 2 * 3);
    for (i, row) in rows.iter().enumerate() {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f.len(), 6);
        assert_eq!(f[0], (i / 3).to_string());
        assert_eq!(f[1], (i % 3).to_string());
        assert_eq!(f[2], (5 * (i % 3)).to_string());
        let acc: f64 = f[3].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.with_extension("json")).unwrap()).unwrap();
    assert_eq!(summary["rounds"].as_array().unwrap().len(), 3);
    assert_eq!(summary["strategy"], "clue");
}

#[test]
fn missing_dataset_file_exits_2() {
    let dir = TempDir::new().unwrap();
    let text = TINY.replace(
        "kind = \"synthetic\"",
        "kind = \"csv\"\nsource_csv = \"nope/source.csv\"\ntarget_csv = \"nope/target.csv\"",
    );
    let cfg = write_config(dir.path(), "missing.toml", &text);
    let out = dir.path().join("r.csv");
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("source.csv"));
    assert_eq!(stderr(&o).trim().lines().count(), 1);
    assert!(!out.exists());
}

#[test]
fn unknown_key_exits_1_and_names_it() {
    let dir = TempDir::new().unwrap();
    let text = TINY.replace("name = \"clue\"", "name = \"clue\"\ntemprature = 0.5");
    let cfg = write_config(dir.path(), "typo.toml", &text);
    let o = run(&["validate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("temprature"), "{}", stderr(&o));
    assert_eq!(stderr(&o).trim().lines().count(), 1);
}

#[test]
fn budget_larger_than_pool_exits_1() {
    let dir = TempDir::new().unwrap();
    let text = TINY.replace("budget = 5", "budget = 500");
    let cfg = write_config(dir.path(), "big.toml", &text);
    let o = run(&["validate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn unknown_strategy_exits_1_and_lists_valid_names() {
    let dir = TempDir::new().unwrap();
    let text = TINY.replace("name = \"clue\"", "name = \"oracle\"");
    let cfg = write_config(dir.path(), "strat.toml", &text);
    let o = run(&["validate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    for name in ["uniform", "entropy", "margin", "coreset", "badge", "aada", "clue"] {
        assert!(err.contains(name), "{name} missing from: {err}");
    }
}

#[test]
fn missing_config_and_bad_flags_exit_1() {
    let o = run(&["validate", "--config", "/definitely/not/here.toml"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["run", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn sweep_writes_a_file_per_point_and_a_combined_table() {
    let dir = TempDir::new().unwrap();
    let text = TINY.replace("seeds = [0, 1]", "seeds = [0, 1, 2]");
    let cfg = write_config(dir.path(), "sweep.toml", &text);
    let out = dir.path().join("sweep");
    let temps = ["0.1", "0.5", "1.0", "2.0"];
    let grid = format!("strategy.temperature={}", temps.join(","));
    let o = run(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--grid",
        &grid,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for t in temps {
        let csv = std::fs::read_to_string(out.join(format!("strategy.temperature={t}.csv"))).unwrap();
        assert_eq!(data_rows(&csv).len(), 3 * 3);
        assert!(out.join(format!("strategy.temperature={t}.json")).exists());
    }
    let combined = std::fs::read_to_string(out.join("combined.csv")).unwrap();
    let mut lines = combined.lines();
    assert_eq!(lines.next(), Some("grid_param,value,seed,round,accuracy"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4 * 3 * 3);
    assert!(rows.iter().all(|r| r.starts_with("strategy.temperature,")));

    // different temperatures give different configs
    let hashes: std::collections::HashSet<String> = temps
        .iter()
        .map(|t| {
            let csv = std::fs::read_to_string(out.join(format!("strategy.temperature={t}.csv"))).unwrap();
            csv.lines().next().unwrap().to_string()
        })
        .collect();
    assert_eq!(hashes.len(), 4);
}

#[test]
fn sweep_over_weight_kinds() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "wk.toml", TINY);
    let out = dir.path().join("wk");
    let o = run(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--grid",
        "strategy.clue_weight_kind=entropy,uniform",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("strategy.clue_weight_kind=entropy.csv").exists());
    assert!(out.join("strategy.clue_weight_kind=uniform.csv").exists());
}

#[test]
fn empty_or_invalid_grid_exits_1() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "g.toml", TINY);
    let out = dir.path().join("g");
    for grid in ["strategy.temperature=", "strategy.temperature", "strategy.name=clue,bogus"] {
        let o = run(&["sweep", "--config", cfg.to_str().unwrap(), "--grid", grid, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(1), "{grid}: {}", stderr(&o));
    }
    assert!(!out.exists(), "nothing is written when a grid point is invalid");
}

#[test]
fn reproducible_runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let outputs: Vec<(Vec<u8>, Vec<u8>)> = ["a.csv", "b.csv"]
        .iter()
        .zip(["1", "2"])
        .map(|(name, threads)| {
            let out = dir.path().join(name);
            let o = run(&[
                "--reproducible",
                "--threads",
                threads,
                "run",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ]);
            assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
            (
                std::fs::read(&out).unwrap(),
                std::fs::read(out.with_extension("json")).unwrap(),
            )
        })
        .collect();
    assert_eq!(outputs[0], outputs[1]);
    let csv = String::from_utf8(outputs[0].0.clone()).unwrap();
    assert!(csv.contains("# timestamp=0\n"));
    assert!(data_rows(&csv).iter().all(|r| r.ends_with(",0")));
}

#[test]
fn seed_override_replaces_the_seed_list() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let out = dir.path().join("s.csv");
    let o = run(&[
        "run",
        "--seed-override",
        "7,9,8",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.contains("# seeds=7;9;8\n"));
    let seeds: Vec<&str> = data_rows(&csv).iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(seeds, ["7", "7", "7", "8", "8", "8", "9", "9", "9"]);
}

fn validate_hash(dir: &Path, name: &str, text: &str) -> String {
    let cfg = write_config(dir, name, text);
    let o = run(&["validate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string()
}

#[test]
fn config_hash_tracks_content_not_layout() {
    let dir = TempDir::new().unwrap();
    let base = validate_hash(dir.path(), "a.toml", TINY);

    // sections and keys reordered
    let (head, data) = TINY.split_at(TINY.find("[data]").unwrap());
    let reordered = format!(
        "{}\n{}",
        data.replace("num_classes = 3\nsource_count = 120", "source_count = 120\nnum_classes = 3"),
        head
    );
    assert_eq!(validate_hash(dir.path(), "b.toml", &reordered), base);

    // a default spelled out
    let spelled = TINY.replace(
        "[optimizer.round]\nepochs = 2",
        "[optimizer.round]\nepochs = 2\nbatch_size = 32",
    );
    assert_ne!(spelled, TINY);
    assert_eq!(validate_hash(dir.path(), "c.toml", &spelled), base);

    let changed = TINY.replace("rotation_deg = 30.0", "rotation_deg = 31.0");
    assert_ne!(validate_hash(dir.path(), "d.toml", &changed), base);
}

#[test]
fn validate_output_round_trips() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "a.toml", TINY);
    let o = run(&["validate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    let hash = text.lines().next().unwrap().to_string();
    let again = write_config(dir.path(), "normalized.toml", &text);
    let o = run(&["validate", "--config", again.to_str().unwrap()]);
    let text2 = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text2.lines().next().unwrap(), hash);
    assert_eq!(text, text2);
}
