//! Benchmark harness.
//!
//! Every repeat of every variant runs in a fresh child process (the same
//! binary, hidden `bench-worker` subcommand). The child builds its model and
//! inputs, prints `ready`, runs the task once and prints a JSON line with
//! the run time, allocator peaks and its own resident-set readings. The
//! parent times spawn-to-ready as the spawn phase, samples the child's
//! resident set every 5 ms, and reports the largest of the sampled RSS, the
//! child's readings and the allocator high-water mark as peak memory.
//! Children run one at a time.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use hookscope::attribution::{self, AttributionConfig, LrpRules, MultiTarget, RuleKind, Target, DEFAULT_EPSILON};
use hookscope::latent::cache_activations;
use hookscope::zoo::{self, Activation};
use hookscope::{HookedModel, ModelGraph, Slot, Tensor, TensorMap};
use serde::{Deserialize, Serialize};

use crate::config::{BenchConfig, BenchTask};
use crate::report::{csv_bytes, float};
use crate::{alloc, Failure};

pub const HEADER: [&str; 15] = [
    "task",
    "width",
    "depth",
    "batch",
    "steps",
    "targets",
    "seed",
    "phase",
    "wall_time_ms_mean",
    "wall_time_ms_std",
    "peak_memory_bytes",
    "repeats",
    "status",
    "gpu_time_ms",
    "gpu_memory_bytes",
];

const SAMPLE_PERIOD: Duration = Duration::from_millis(5);

/// One task on one model variant, as passed to a worker process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::Args)]
pub struct Variant {
    #[arg(long)]
    pub task: BenchTask,
    #[arg(long)]
    pub width: usize,
    #[arg(long)]
    pub depth: usize,
    #[arg(long)]
    pub batch: usize,
    /// Interpolation steps; only read by the integrated-gradients tasks.
    #[arg(long, default_value_t = 32)]
    pub steps: usize,
    /// Output width of the model and target count of the multi-target tasks.
    #[arg(long, default_value_t = 8)]
    pub targets: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl Variant {
    fn uses_steps(&self) -> bool {
        matches!(self.task, BenchTask::Ig | BenchTask::IgMulti | BenchTask::IgLoop)
    }

    fn target_count(&self) -> usize {
        match self.task {
            BenchTask::IgMulti | BenchTask::IgLoop => self.targets,
            _ => 1,
        }
    }

    fn args(&self) -> Vec<String> {
        vec![
            "bench-worker".into(),
            format!("--task={}", self.task.name()),
            format!("--width={}", self.width),
            format!("--depth={}", self.depth),
            format!("--batch={}", self.batch),
            format!("--steps={}", self.steps),
            format!("--targets={}", self.targets),
            format!("--seed={}", self.seed),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Spawn,
    Run,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Spawn => "spawn",
            Phase::Run => "run",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub variant: Variant,
    pub phase: Phase,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub peak_memory_bytes: u64,
    pub repeats: usize,
    /// `None` when a child failed; the timing fields are then meaningless.
    pub error: Option<String>,
}

impl BenchRecord {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }

    fn row(&self) -> Vec<String> {
        let v = &self.variant;
        let (mean, std, mem) = if self.ok() {
            (float(self.mean_ms), float(self.std_ms), self.peak_memory_bytes.to_string())
        } else {
            (String::new(), String::new(), String::new())
        };
        vec![
            v.task.name().into(),
            v.width.to_string(),
            v.depth.to_string(),
            v.batch.to_string(),
            if v.uses_steps() { v.steps.to_string() } else { String::new() },
            v.target_count().to_string(),
            v.seed.to_string(),
            self.phase.name().into(),
            mean,
            std,
            mem,
            self.repeats.to_string(),
            if self.ok() { "ok".into() } else { "failed".into() },
            String::new(),
            String::new(),
        ]
    }
}

/// What a worker reports after its run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkerReport {
    pub run_ms: f64,
    pub setup_alloc_peak: u64,
    pub run_alloc_peak: u64,
    /// Kernel resident high-water mark when setup finished.
    pub ready_hwm: u64,
    /// Resident set after the run.
    pub end_rss: u64,
}

struct Setup {
    model: HookedModel,
    inputs: TensorMap,
    sites: Vec<String>,
}

fn setup(v: &Variant) -> hookscope::Result<Setup> {
    let mut widths = vec![v.width; v.depth + 1];
    widths.push(v.targets.max(1));
    let graph: ModelGraph = zoo::mlp(&widths, Activation::Relu, true, v.seed)?;
    let sites = graph.execution_order().iter().map(|&i| graph.modules()[i].name().to_string()).collect();
    let inputs = zoo::uniform_batch("x", v.batch, &[v.width], 1.0, v.seed.wrapping_add(1))?;
    Ok(Setup { model: HookedModel::new(graph), inputs, sites })
}

fn execute(v: &Variant, s: &mut Setup) -> hookscope::Result<()> {
    let cfg = AttributionConfig::new(Target::index("y", 0)).with_steps(v.steps);
    let targets: Vec<Target> = (0..v.targets).map(|k| Target::index("y", k)).collect();
    match v.task {
        BenchTask::Ig => {
            attribution::integrated_gradients(&mut s.model, &s.inputs, &cfg)?;
        }
        BenchTask::IgMulti | BenchTask::IgLoop => {
            let strategy = if v.task == BenchTask::IgMulti { MultiTarget::Vectorized } else { MultiTarget::PerTarget };
            attribution::integrated_gradients_multi(&mut s.model, &s.inputs, &cfg, &targets, strategy)?;
        }
        BenchTask::Lrp => {
            let rules = LrpRules::uniform(RuleKind::Epsilon(DEFAULT_EPSILON));
            attribution::lrp(&mut s.model, &s.inputs, &cfg, &rules, None)?;
        }
        BenchTask::Caching => {
            let sites: Vec<&str> = s.sites.iter().map(String::as_str).collect();
            cache_activations(&mut s.model, std::slice::from_ref(&s.inputs), &sites, 1)?;
        }
        BenchTask::Intervention => {
            let site = s.sites[s.sites.len() / 2].clone();
            let width = s.model.graph().row_width(&site).unwrap_or(v.width);
            let mut ctx = s.model.context()?;
            ctx.set(&site, Slot::Output, Tensor::zeros(vec![v.batch, width]))?;
            ctx.run(&s.inputs)?;
        }
    }
    Ok(())
}

/// Entry point of the `bench-worker` subcommand.
pub fn worker(v: &Variant) -> Result<(), Failure> {
    let mut s = setup(v)?;
    let setup_alloc_peak = alloc::peak() as u64;
    let ready_hwm = proc_status_bytes("self", "VmHWM:").unwrap_or(0);
    let mut out = std::io::stdout().lock();
    writeln!(out, "ready").and_then(|_| out.flush()).map_err(Failure::runtime)?;
    alloc::reset_peak();
    let t0 = Instant::now();
    execute(v, &mut s)?;
    let run_ms = t0.elapsed().as_secs_f64() * 1e3;
    let report = WorkerReport {
        run_ms,
        setup_alloc_peak,
        run_alloc_peak: alloc::peak() as u64,
        ready_hwm,
        end_rss: proc_status_bytes("self", "VmRSS:").unwrap_or(0),
    };
    let line = serde_json::to_string(&report).map_err(Failure::runtime)?;
    writeln!(out, "{line}").and_then(|_| out.flush()).map_err(Failure::runtime)?;
    Ok(())
}

/// A `kB` field of `/proc/<pid>/status`, in bytes. `None` off Linux.
fn proc_status_bytes(pid: &str, field: &str) -> Option<u64> {
    let status = std::fs::read_to_string(format!("/proc/{pid}/status")).ok()?;
    let line = status.lines().find(|l| l.starts_with(field))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

struct Sample {
    spawn_ms: f64,
    run_ms: f64,
    spawn_mem: u64,
    run_mem: u64,
}

fn measure(exe: &Path, v: &Variant) -> Result<Sample, String> {
    let start = Instant::now();
    let mut child = Command::new(exe)
        .args(v.args())
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| format!("spawn failed: {e}"))?;
    let pid = child.id().to_string();
    let samples: Arc<Mutex<Vec<(Instant, u64)>>> = Arc::default();
    let stop = Arc::new(AtomicBool::new(false));
    let sampler = {
        let (samples, stop) = (Arc::clone(&samples), Arc::clone(&stop));
        thread::spawn(move || {
            while !stop.load(Ordering::Relaxed) {
                if let Some(b) = proc_status_bytes(&pid, "VmRSS:") {
                    samples.lock().expect("sampler lock").push((Instant::now(), b));
                }
                thread::sleep(SAMPLE_PERIOD);
            }
        })
    };
    let mut lines = BufReader::new(child.stdout.take().expect("piped stdout")).lines();
    let ready = match lines.next() {
        Some(Ok(l)) if l == "ready" => Some(Instant::now()),
        _ => None,
    };
    let report = lines.next().and_then(|l| l.ok());
    let output = child.wait_with_output();
    stop.store(true, Ordering::Relaxed);
    sampler.join().map_err(|_| "sampler thread panicked".to_string())?;

    let output = output.map_err(|e| format!("wait failed: {e}"))?;
    if !output.status.success() {
        let err = String::from_utf8_lossy(&output.stderr);
        return Err(format!("worker exited with {}: {}", output.status, err.trim()));
    }
    let ready = ready.ok_or("worker never reported ready")?;
    let report: WorkerReport = serde_json::from_str(&report.ok_or("worker printed no report")?)
        .map_err(|e| format!("bad worker report: {e}"))?;
    let samples = samples.lock().expect("sampler lock");
    let rss_before = samples.iter().filter(|(t, _)| *t <= ready).map(|s| s.1).max().unwrap_or(0);
    let rss_after = samples.iter().filter(|(t, _)| *t > ready).map(|s| s.1).max().unwrap_or(rss_before);
    Ok(Sample {
        spawn_ms: ready.duration_since(start).as_secs_f64() * 1e3,
        run_ms: report.run_ms,
        spawn_mem: rss_before.max(report.ready_hwm).max(report.setup_alloc_peak),
        run_mem: rss_after.max(report.end_rss).max(report.run_alloc_peak),
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Runs `warmup + repeats` children for `v` and summarises the measured
/// repeats into one record per phase.
pub fn bench_variant(exe: &Path, v: &Variant, repeats: usize, warmup: usize) -> [BenchRecord; 2] {
    let mut measured = Vec::with_capacity(repeats);
    let mut error = None;
    for i in 0..warmup + repeats {
        match measure(exe, v) {
            Ok(s) if i >= warmup => measured.push(s),
            Ok(_) => {}
            Err(e) => {
                error = Some(e);
                break;
            }
        }
    }
    let record = |phase: Phase| {
        let (times, mem): (Vec<f64>, u64) = match phase {
            Phase::Spawn => {
                (measured.iter().map(|s| s.spawn_ms).collect(), measured.iter().map(|s| s.spawn_mem).max().unwrap_or(0))
            }
            Phase::Run => {
                (measured.iter().map(|s| s.run_ms).collect(), measured.iter().map(|s| s.run_mem).max().unwrap_or(0))
            }
        };
        let (mean_ms, std_ms) = if error.is_none() { mean_std(&times) } else { (f64::NAN, f64::NAN) };
        BenchRecord { variant: *v, phase, mean_ms, std_ms, peak_memory_bytes: mem, repeats, error: error.clone() }
    };
    [record(Phase::Spawn), record(Phase::Run)]
}

/// Every variant of the matrix in run order.
pub fn variants(cfg: &BenchConfig) -> Vec<Variant> {
    let mut out = Vec::new();
    for &task in &cfg.tasks {
        let ig = matches!(task, BenchTask::Ig | BenchTask::IgMulti | BenchTask::IgLoop);
        let steps: &[usize] = if ig { &cfg.steps } else { &cfg.steps[..1] };
        for m in &cfg.models {
            for &batch in &cfg.batches {
                for &s in steps {
                    for &seed in &cfg.seeds {
                        out.push(Variant {
                            task,
                            width: m.width,
                            depth: m.depth,
                            batch,
                            steps: s,
                            targets: cfg.targets,
                            seed,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Runs the whole matrix sequentially and appends the records to `csv` in a
/// single write. The header is written only when the file is new or empty.
pub fn run_bench(
    exe: &Path,
    cfg: &BenchConfig,
    csv: &Path,
    mut progress: impl FnMut(&BenchRecord),
) -> Result<Vec<BenchRecord>, Failure> {
    let mut records = Vec::new();
    for v in variants(cfg) {
        for r in bench_variant(exe, &v, cfg.repeats, cfg.warmup) {
            progress(&r);
            records.push(r);
        }
    }
    let rows: Vec<Vec<String>> = records.iter().map(BenchRecord::row).collect();
    let mut bytes = csv_bytes(&HEADER, &rows)?;
    let fresh = std::fs::metadata(csv).map(|m| m.len() == 0).unwrap_or(true);
    if !fresh {
        let header_len = bytes.iter().position(|b| *b == b'\n').map_or(0, |i| i + 1);
        bytes.drain(..header_len);
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(csv)
        .map_err(|e| Failure::runtime(format!("cannot open {}: {e}", csv.display())))?;
    f.write_all(&bytes).map_err(|e| Failure::runtime(format!("cannot append to {}: {e}", csv.display())))?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelSize;

    #[test]
    fn matrix_expands_steps_only_for_ig() {
        let cfg = BenchConfig {
            tasks: vec![BenchTask::Ig, BenchTask::Lrp],
            models: vec![ModelSize { width: 4, depth: 1 }],
            batches: vec![1, 2],
            steps: vec![8, 16],
            seeds: vec![0],
            targets: 2,
            repeats: 3,
            warmup: 1,
            csv: "b.csv".into(),
        };
        let v = variants(&cfg);
        assert_eq!(v.iter().filter(|v| v.task == BenchTask::Ig).count(), 4);
        assert_eq!(v.iter().filter(|v| v.task == BenchTask::Lrp).count(), 2);
    }

    #[test]
    fn every_task_executes_in_process() {
        for task in [
            BenchTask::Ig,
            BenchTask::IgMulti,
            BenchTask::IgLoop,
            BenchTask::Lrp,
            BenchTask::Caching,
            BenchTask::Intervention,
        ] {
            let v = Variant { task, width: 4, depth: 2, batch: 3, steps: 4, targets: 2, seed: 1 };
            execute(&v, &mut setup(&v).unwrap()).unwrap();
        }
    }

    #[test]
    fn sample_std_is_zero_for_constant_times() {
        assert_eq!(mean_std(&[2.0, 2.0, 2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
