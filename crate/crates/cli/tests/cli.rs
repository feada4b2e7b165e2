use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use teachsim::agents::{Channel, Split};
use teachsim::experiments::{AggregateRow, AggregateTable};
use tempfile::TempDir;

const TINY: &str = "[train]
n = 3
updates = 3
batch_size = 4
eval_every = 3
eval_states = 4
eval_contexts = 5
";

fn teachsim(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_teachsim"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("TEACHSIM_OUT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &TempDir, extra: &str) -> PathBuf {
    let path = dir.path().join("tiny.toml");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path
}

/// The run directory is the last line printed by `train`.
fn train(out: &Path, config: &Path, args: &[&str]) -> PathBuf {
    let mut all = vec!["train", "--config", config.to_str().unwrap()];
    all.extend_from_slice(args);
    let o = teachsim(out, &all);
    assert!(o.status.success(), "{}", stderr(&o));
    PathBuf::from(stdout(&o).lines().last().unwrap())
}

#[test]
fn missing_config_file_fails_without_output() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let o = teachsim(&out, &["train", "--config", "does-not-exist.toml"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("does-not-exist.toml"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn unknown_key_is_named_in_the_error() {
    let tmp = TempDir::new().unwrap();
    let config = tiny_config(&tmp, "vocabulary = 3\n");
    let out = tmp.path().join("out");
    let o = teachsim(&out, &["train", "--config", config.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("vocabulary"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn training_is_reproducible_and_guarded() {
    let tmp = TempDir::new().unwrap();
    let config = tiny_config(&tmp, "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let run_a = train(&a, &config, &["--seed", "7"]);
    let run_b = train(&b, &config, &["--seed", "7"]);
    assert!(run_a.ends_with(run_b.file_name().unwrap()));
    assert!(run_a.file_name().unwrap().to_str().unwrap().ends_with("-s7"));
    let metrics = fs::read(run_a.join("metrics.csv")).unwrap();
    assert_eq!(metrics, fs::read(run_b.join("metrics.csv")).unwrap());
    for file in ["utterances.jsonl", "checkpoint.json", "manifest.json"] {
        assert!(run_a.join(file).exists(), "{file}");
    }

    let args = ["train", "--config", config.to_str().unwrap(), "--seed", "7"];
    let again = teachsim(&a, &args);
    assert!(!again.status.success());
    assert!(stderr(&again).contains("--force"), "{}", stderr(&again));

    let forced = teachsim(&a, &[&args[..], &["--force"]].concat());
    assert!(forced.status.success(), "{}", stderr(&forced));
    assert_eq!(fs::read(run_a.join("metrics.csv")).unwrap(), metrics);
}

#[test]
fn set_overrides_change_the_run() {
    let tmp = TempDir::new().unwrap();
    let config = tiny_config(&tmp, "");
    let out = tmp.path().join("out");
    let plain = train(&out, &config, &[]);
    let demo = train(&out, &config, &["--set", "channel=demo_pedagogical", "--set", "k=1"]);
    assert_ne!(plain, demo);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(demo.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["channel"], "demo_pedagogical");
    assert_eq!(manifest["config"]["capacity"], 1);
}

fn sweep(out: &Path, config: &Path, parallel: &str) -> Output {
    teachsim(
        out,
        &["sweep", "--experiment", "2", "--config", config.to_str().unwrap(), "--parallel", parallel],
    )
}

#[test]
fn sweeps_are_parallel_invariant_and_resume() {
    let tmp = TempDir::new().unwrap();
    let config = tiny_config(&tmp, "[sweep]\nseeds = [0, 1]\nn_values = [3]\n");
    let (one, two) = (tmp.path().join("one"), tmp.path().join("two"));

    let o = sweep(&one, &config, "1");
    assert!(o.status.success(), "{}", stderr(&o));
    let table = PathBuf::from(stdout(&o).trim());
    assert!(stderr(&o).matches("trained").count() == 4, "{}", stderr(&o));
    let o2 = sweep(&two, &config, "2");
    assert!(o2.status.success(), "{}", stderr(&o2));
    let table2 = PathBuf::from(stdout(&o2).trim());
    assert_eq!(fs::read(&table).unwrap(), fs::read(&table2).unwrap());

    let csv = fs::read_to_string(&table).unwrap();
    assert!(csv.starts_with("condition,n,split,mean,sem,n_seeds,missing,seed_0,seed_1\n"), "{csv}");
    assert_eq!(csv.lines().count(), 1 + 2 * 2);

    let again = sweep(&one, &config, "1");
    assert!(again.status.success());
    assert_eq!(stderr(&again).matches("reused").count(), 4, "{}", stderr(&again));
    assert_eq!(fs::read_to_string(&table).unwrap(), csv);
}

#[test]
fn sweep_rejects_overrides_for_another_axis() {
    let tmp = TempDir::new().unwrap();
    let config = tiny_config(&tmp, "[sweep]\ntrain_fractions = [0.5]\n");
    let out = tmp.path().join("out");
    let o = sweep(&out, &config, "1");
    assert!(!o.status.success());
    assert!(stderr(&o).contains("train_fractions"), "{}", stderr(&o));
}

#[test]
fn analyses_write_parseable_tables() {
    let tmp = TempDir::new().unwrap();
    let config = tiny_config(&tmp, "");
    let out = tmp.path().join("out");
    let run = train(&out, &config, &[]);

    let o = teachsim(&out, &["analyze", run.to_str().unwrap(), "--kind", "unique"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let unique = fs::read_to_string(run.join("unique_utterances.csv")).unwrap();
    assert_eq!(unique, stdout(&o));
    teachsim::experiments::UniqueCounts::from_csv(&unique).unwrap();

    let o = teachsim(&out, &["analyze", run.to_str().unwrap(), "--kind", "semantics"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let semantics = fs::read_to_string(run.join("message_semantics.csv")).unwrap();
    let header = semantics.lines().next().unwrap();
    assert!(header.starts_with("message,n_states,color_0,color_1,color_2,shape_0"), "{header}");
    assert!(semantics.lines().any(|l| l.starts_with("all,")));

    let demo = train(&out, &config, &["--set", "channel=demo_random", "--set", "k=1"]);
    let o = teachsim(&out, &["analyze", demo.to_str().unwrap(), "--kind", "semantics"]);
    assert!(!o.status.success());
    assert!(!demo.join("message_semantics.csv").exists());
    let o = teachsim(&out, &["analyze", demo.to_str().unwrap(), "--kind", "unique"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn plots_are_deterministic_and_need_data() {
    let tmp = TempDir::new().unwrap();
    let table = tmp.path().join("aggregate.csv");
    let row = |condition, axis_value, values: Vec<Option<f64>>| AggregateRow {
        condition,
        axis_value,
        split: Split::Val,
        values,
    };
    let aggregate = AggregateTable {
        axis: "capacity".into(),
        seeds: vec![0, 1],
        rows: vec![
            row(Channel::Language, 1.0, vec![Some(0.4), Some(0.6)]),
            row(Channel::Language, 2.0, vec![Some(0.6), None]),
            row(Channel::DemoPedagogical, 1.0, vec![Some(0.6), Some(0.8)]),
            row(Channel::DemoRandom, 1.0, vec![Some(0.2), Some(0.4)]),
        ],
    };
    fs::write(&table, aggregate.to_csv()).unwrap();
    let out = tmp.path().join("out");
    let o = teachsim(&out, &["plot", table.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let svg_path = table.with_extension("svg");
    let svg = fs::read_to_string(&svg_path).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 3);
    let second = tmp.path().join("second.svg");
    let o = teachsim(&out, &["plot", table.to_str().unwrap(), "--output", second.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(&second).unwrap(), svg);

    let empty = tmp.path().join("empty.csv");
    fs::write(&empty, "condition,capacity,split,mean,sem,n_seeds,missing,seed_0\n").unwrap();
    let o = teachsim(&out, &["plot", empty.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(!empty.with_extension("svg").exists());
}
