use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hookscope::{io, Tensor, TensorMap};
use hookscope_cli::bench::run_bench;
use hookscope_cli::config::{BenchConfig, BenchTask, ModelSize};

const EXE: &str = env!("CARGO_BIN_EXE_hookscope");

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn hookscope(args: &[&str]) -> Output {
    Command::new(EXE).args(args).env_remove(hookscope_cli::OUT_ENV).output().unwrap()
}

fn run_config(command: &str, config: &Path, out: &Path) -> Output {
    hookscope(&[command, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

/// A copy of a fixture directory whose config can be edited freely.
fn scratch(name: &str, edit: impl FnOnce(String) -> String) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    for entry in fs::read_dir(fixture(name)).unwrap() {
        let p = entry.unwrap().path();
        if p.is_file() {
            fs::copy(&p, dir.path().join(p.file_name().unwrap())).unwrap();
        }
    }
    let config = dir.path().join("config.toml");
    fs::write(&config, edit(fs::read_to_string(&config).unwrap())).unwrap();
    (dir, config)
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    text.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

fn files_in(dir: &Path) -> Vec<String> {
    if !dir.exists() {
        return Vec::new();
    }
    let mut v: Vec<String> =
        fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    v.sort();
    v
}

#[test]
fn invalid_method_exits_2_without_writing() {
    let (dir, config) = scratch("saliency_mlp", |s| s.replace("\"saliency\"", "\"telepathy\""));
    let out = dir.path().join("out");
    let o = run_config("attribute", &config, &out);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!o.stderr.is_empty());
    assert!(files_in(&out).is_empty());
}

#[test]
fn unknown_key_and_wrong_command_exit_2() {
    let (dir, config) = scratch("saliency_mlp", |s| s.replace("seed = 0", "seed = 0\nsede = 1"));
    assert_eq!(run_config("attribute", &config, &dir.path().join("out")).status.code(), Some(2));
    let o = run_config("probe", &fixture("saliency_mlp").join("config.toml"), &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_targets_file_exits_2() {
    let (dir, config) = scratch("probe", |s| s);
    fs::remove_file(dir.path().join("targets.tmap")).unwrap();
    let o = run_config("probe", &config, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn method_failure_exits_3() {
    let (dir, config) = scratch("saliency_mlp", |s| s.replace("index = 2", "index = 9"));
    let o = run_config("attribute", &config, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn two_head_targets_write_one_file_per_output() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_config("attribute", &fixture("two_head").join("config.toml"), dir.path());
    assert!(o.status.success());
    assert_eq!(files_in(dir.path()), ["attribution_policy_1.csv", "attribution_value_0.csv"]);
}

#[test]
fn output_directory_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture("saliency_mlp").join("config.toml");
    let (flag, env) = (dir.path().join("flag"), dir.path().join("env"));
    let o = Command::new(EXE)
        .args(["attribute", "--config", config.to_str().unwrap(), "--out", flag.to_str().unwrap()])
        .env(hookscope_cli::OUT_ENV, &env)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(flag.join("attribution_y_2.csv").exists() && !env.exists());
    let o = Command::new(EXE)
        .args(["attribute", "--config", config.to_str().unwrap()])
        .env(hookscope_cli::OUT_ENV, &env)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(env.join("attribution_y_2.csv").exists());
}

#[test]
fn probe_rows_cover_pre_and_post_activation_sites() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_config("probe", &fixture("probe").join("config.toml"), dir.path()).status.success());
    let rows = csv_rows(&dir.path().join("probe.csv"));
    let layer: Vec<&str> = rows.iter().filter(|r| r[1] == "layer").map(|r| r[0].as_str()).collect();
    assert_eq!(layer, ["fc0", "act0", "fc1"]);
    let r2 = |site: &str| rows.iter().find(|r| r[0] == site).unwrap()[7].parse::<f64>().unwrap();
    assert!(r2("act0") >= 0.99);
    let baseline: Vec<_> = rows.iter().filter(|r| r[1] == "baseline").collect();
    assert_eq!(baseline.len(), 1);
    assert!(baseline[0][7].parse::<f64>().unwrap() < r2("act0"));
}

#[test]
fn linear_patching_columns_agree() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_config("patch", &fixture("patch_linear").join("config.toml"), dir.path()).status.success());
    for r in csv_rows(&dir.path().join("patch_units.csv")) {
        let (a, g): (f64, f64) = (r[2].parse().unwrap(), r[3].parse().unwrap());
        assert!((a - g).abs() <= 1e-12 * (1.0 + a.abs()), "{r:?}");
    }
    let summary = csv_rows(&dir.path().join("patch_summary.csv"));
    let r: f64 = summary.iter().find(|r| r[0] == "r_activation_gradient").unwrap()[1].parse().unwrap();
    assert!((r - 1.0).abs() < 1e-12);
}

#[test]
fn identical_patch_inputs_flag_undefined_correlation() {
    let (dir, config) = scratch("patch_mlp", |s| s.replace("corrupt = \"corrupt.tmap\"", "corrupt = \"clean.tmap\""));
    let out = dir.path().join("out");
    assert!(run_config("patch", &config, &out).status.success());
    for r in csv_rows(&out.join("patch_units.csv")) {
        assert_eq!(r[2].parse::<f64>().unwrap(), 0.0);
    }
    let summary = csv_rows(&out.join("patch_summary.csv"));
    let row = summary.iter().find(|r| r[0] == "r_activation_gradient").unwrap();
    assert_eq!((row[1].as_str(), row[2].as_str()), ("NaN", "undefined"));
}

#[test]
fn seeded_mlp_patching_correlates() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_config("patch", &fixture("patch_mlp").join("config.toml"), dir.path()).status.success());
    let summary = csv_rows(&dir.path().join("patch_summary.csv"));
    let r: f64 = summary.iter().find(|r| r[0] == "r_activation_gradient").unwrap()[1].parse().unwrap();
    assert!(r > 0.9);
}

#[test]
fn linear_unit_maximisation_reaches_the_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture("maximise_linear");
    assert!(run_config("maximise", &fx.join("config.toml"), dir.path()).status.success());
    // Maximising w.x + b - l2 |x|^2 gives x = w / (2 l2), here with l2 = 0.5.
    let model = io::read_model(fx.join("model.hsm")).unwrap();
    let w = model.module("fc0").unwrap().weight().unwrap().row(1).to_vec();
    let x = io::read_tensormap(dir.path().join("preimage.tmap")).unwrap();
    for (a, b) in x.get_tensor("x").unwrap().data().iter().zip(&w) {
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    }
    assert_eq!(csv_rows(&dir.path().join("trajectory.csv")).len(), 301);
}

#[test]
fn zero_iterations_return_the_initial_input() {
    let (dir, config) = scratch("maximise_linear", |s| s.replace("iters = 300", "iters = 0\ninit = \"init.tmap\""));
    let init = TensorMap::with_batch(vec![1])
        .with("x", Tensor::new(vec![1, 4], vec![0.1, -0.2, 0.3, 1e-17]).unwrap())
        .unwrap();
    io::write_tensormap(dir.path().join("init.tmap"), &init).unwrap();
    let out = dir.path().join("out");
    assert!(run_config("maximise", &config, &out).status.success());
    let got = io::read_tensormap(out.join("preimage.tmap")).unwrap();
    assert!(got.bitwise_eq(&init));
    assert_eq!(csv_rows(&out.join("trajectory.csv")).len(), 1);
}

#[test]
fn seed_flag_overrides_the_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture("maximise_linear").join("config.toml");
    let c = config.to_str().unwrap();
    let run = |seed: &str, out: &str| {
        let o = dir.path().join(out);
        assert!(hookscope(&["maximise", "--config", c, "--seed", seed, "--out", o.to_str().unwrap()]).status.success());
        fs::read(o.join("trajectory.csv")).unwrap()
    };
    assert_eq!(run("5", "a"), fs::read(fixture("maximise_linear").join("golden/trajectory.csv")).unwrap());
    assert_ne!(run("6", "b"), run("5", "c"));
}

#[test]
fn prune_reports_accounting_and_loss() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_config("prune", &fixture("prune_mlp").join("config.toml"), dir.path()).status.success());
    let rows = csv_rows(&dir.path().join("prune.csv"));
    let size: usize = rows.iter().map(|r| r[1].parse::<usize>().unwrap()).sum();
    let zeros: usize = rows.iter().map(|r| r[2].parse::<usize>().unwrap()).sum();
    assert_eq!(zeros, size / 2);
    let pruned = io::read_model(dir.path().join("pruned.hsm")).unwrap();
    let nonzero_weights: usize = pruned
        .parameters()
        .flatten_keys()
        .iter()
        .filter(|(k, _)| k.ends_with(".weight"))
        .map(|(_, t)| t.data().iter().filter(|v| **v != 0.0).count())
        .sum();
    assert_eq!(nonzero_weights, size - zeros);
}

fn small_bench(tasks: Vec<BenchTask>, steps: Vec<usize>) -> BenchConfig {
    BenchConfig {
        tasks,
        models: vec![ModelSize { width: 16, depth: 2 }],
        batches: vec![4],
        steps,
        seeds: vec![0],
        targets: 4,
        repeats: 3,
        warmup: 1,
        csv: "bench.csv".into(),
    }
}

#[test]
fn bench_reports_both_phases_for_every_task_and_appends() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_bench(vec![BenchTask::Ig, BenchTask::Lrp, BenchTask::Caching, BenchTask::Intervention], vec![8]);
    let csv = dir.path().join("bench.csv");
    let records = run_bench(Path::new(EXE), &cfg, &csv, |_| {}).unwrap();
    assert_eq!(records.len(), 8);
    for r in &records {
        assert!(r.ok(), "{:?}", r.error);
        assert!(r.mean_ms > 0.0 && r.std_ms >= 0.0 && r.peak_memory_bytes > 0, "{r:?}");
        assert_eq!(r.repeats, 3);
    }
    run_bench(Path::new(EXE), &small_bench(vec![BenchTask::Ig], vec![8]), &csv, |_| {}).unwrap();
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.matches("task,width").count(), 1);
    assert_eq!(text.lines().count(), 1 + 8 + 2);
    let rows = csv_rows(&csv);
    assert!(rows.iter().filter(|r| r[7] == "spawn").all(|r| r[8].parse::<f64>().unwrap() > 0.0));
}

#[test]
fn bench_records_failed_children_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_bench(vec![BenchTask::Ig, BenchTask::Lrp], vec![8]);
    let csv = dir.path().join("bench.csv");
    let records = run_bench(Path::new("/nonexistent/hookscope"), &cfg, &csv, |_| {}).unwrap();
    assert_eq!(records.len(), 4);
    assert!(records.iter().all(|r| !r.ok()));
    assert!(csv_rows(&csv).iter().all(|r| r[12] == "failed"));
}

#[test]
fn ig_time_grows_with_steps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_bench(vec![BenchTask::Ig], vec![16, 1024]);
    let records = run_bench(Path::new(EXE), &cfg, &dir.path().join("b.csv"), |_| {}).unwrap();
    let run = |steps: usize| {
        records
            .iter()
            .find(|r| r.variant.steps == steps && r.phase == hookscope_cli::bench::Phase::Run)
            .unwrap()
            .mean_ms
    };
    assert!(run(1024) > run(16));
}

#[test]
fn bench_config_runs_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bench.toml");
    fs::write(
        &config,
        "command = \"bench\"\n[bench]\ntasks = [\"caching\"]\nmodels = [{ width = 8, depth = 1 }]\nbatches = [2]\nrepeats = 3\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = run_config("bench", &config, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv_rows(&out.join("bench.csv")).len(), 2);
    fs::write(&config, "command = \"bench\"\n[bench]\ntasks = [\"caching\"]\nmodels = []\nbatches = [2]\n").unwrap();
    assert_eq!(run_config("bench", &config, &out).status.code(), Some(2));
}
