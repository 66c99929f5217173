//! Acceptance suite. Each criterion prints one PASS or FAIL line; the test
//! fails if any criterion does.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use hookscope::attribution::{
    integrated_gradients, lrp_with, pixel_flipping, saliency, AttributionConfig, AttributionResult, Fill, LrpOptions,
    LrpRules, RuleKind, Target,
};
use hookscope::latent::{activation_patch, attribution_patch, fit_probe, PatchMode, DEFAULT_RIDGE};
use hookscope::weights::{
    apply, insert_adapter, prune, random_relevance, remove_adapter, task_vector, Adapter, AdapterMode, Granularity,
};
use hookscope::zoo::{self, Activation};
use hookscope::{GraphBuilder, HookedModel, ModelGraph, ModuleKind, SeedPoint, Slot, Tensor, TensorMap};
use hookscope_cli::bench::{run_bench, Phase};
use hookscope_cli::config::{BenchConfig, BenchTask, ModelSize};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, Option<u64>, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn batch(rows: usize, sample: &[usize], seed: u64) -> TensorMap {
    zoo::uniform_batch("x", rows, sample, 1.0, seed).unwrap()
}

fn nonneg(rows: usize, sample: &[usize], seed: u64) -> TensorMap {
    batch(rows, sample, seed).apply(|t| t.abs()).unwrap()
}

/// Sum over rows of `y[row, index]`.
fn column_sum(model: &ModelGraph, x: &TensorMap, index: usize) -> f64 {
    let y = model.forward(x, false).unwrap().0;
    let y = y.get_tensor("y").unwrap();
    (0..y.rows()).map(|r| y.row(r)[index]).sum()
}

fn one_hot_seed(y: &Tensor, index: usize) -> Tensor {
    let mut s = Tensor::zeros(y.shape().to_vec());
    let per = y.row_len();
    s.update(|d| {
        for r in 0..d.len() / per {
            d[r * per + index] = 1.0;
        }
    });
    s
}

fn tape_grads(model: &ModelGraph, x: &TensorMap, index: usize) -> TensorMap {
    let (y, tape) = model.forward(x, true).unwrap();
    let y = y.get_tensor("y").unwrap();
    let seed = TensorMap::with_batch(vec![y.rows()]).with("y", one_hot_seed(y, index)).unwrap();
    tape.unwrap().backward(&seed).unwrap()
}

fn central_difference(f: impl Fn(&Tensor) -> f64, at: &Tensor, h: f64) -> Tensor {
    let mut g = vec![0.0; at.numel()];
    for (i, gi) in g.iter_mut().enumerate() {
        let mut plus = at.clone();
        plus.update(|d| d[i] += h);
        let mut minus = at.clone();
        minus.update(|d| d[i] -= h);
        *gi = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    Tensor::new(at.shape().to_vec(), g).unwrap()
}

fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    a.sub(b).unwrap().norm() / a.norm().max(b.norm()).max(1e-12)
}

fn gradient_oracle() -> Check {
    let mut instances: Vec<(ModelGraph, TensorMap)> = Vec::new();
    for s in 0..10 {
        instances.push((zoo::mlp(&[5, 7, 6, 3], Activation::Tanh, true, s).map_err(e)?, batch(3, &[5], 100 + s)));
        instances.push((zoo::cnn(2, 6, 3, true, s).map_err(e)?, batch(2, &[2, 6, 6], 200 + s)));
    }
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (i, (model, x)) in instances.iter().enumerate() {
        ensure(model.parameter_count() <= 10_000, || {
            format!("instance {i} has {} parameters", model.parameter_count())
        })?;
        let index = 2;
        let grads = tape_grads(model, x, index);
        let xt = x.get_tensor("x").unwrap();
        let fd = central_difference(|v| column_sum(model, &x.clone().with("x", v.clone()).unwrap(), index), xt, h);
        let mut errs = vec![("x".to_string(), rel_err(grads.get_tensor("x").map_err(e)?, &fd))];
        let params = model.parameters();
        for (k, p) in params.flatten_keys() {
            let fd = central_difference(
                |v| {
                    let mut q = params.clone();
                    q.put(k.as_str(), v.clone()).unwrap();
                    column_sum(&model.with_parameters(&q).unwrap(), x, index)
                },
                &p,
                h,
            );
            errs.push((k.to_string(), rel_err(grads.get_tensor(k.as_str()).map_err(e)?, &fd)));
        }
        for (k, err) in errs {
            worst = worst.max(err);
            ensure(err < 1e-5, || format!("instance {i}, {k}: relative error {err:e}"))?;
        }
    }
    Ok(format!("{} instances, worst relative error {worst:.1e}", instances.len()))
}

fn ig_gap(m: &mut HookedModel, x: &TensorMap, steps: usize) -> f64 {
    let cfg = AttributionConfig::new(Target::index("y", 1)).with_steps(steps);
    let total = integrated_gradients(m, x, &cfg).unwrap().attributions.get_tensor("x").unwrap().sum();
    let zero = x.apply(|t| t.scale(0.0)).unwrap();
    let g = m.graph();
    (total - (column_sum(g, x, 1) - column_sum(g, &zero, 1))).abs()
}

fn ig_completeness() -> Check {
    let steps = [16, 64, 256, 1024];
    let seeds = 6;
    let mut mean = [0.0; 4];
    let mut worst = 0.0f64;
    for s in 0..seeds {
        let mut m = HookedModel::new(zoo::mlp(&[6, 16, 16, 3], Activation::Tanh, true, s).map_err(e)?);
        let x = batch(1, &[6], 40 + s);
        let gap = ig_gap(&mut m, &x, 512);
        worst = worst.max(gap);
        ensure(gap < 1e-3, || format!("seed {s}: gap {gap:e} at 512 steps"))?;
        for (acc, st) in mean.iter_mut().zip(steps) {
            *acc += ig_gap(&mut m, &x, st) / seeds as f64;
        }
    }
    ensure(mean.windows(2).all(|w| w[1] < w[0]), || format!("mean gaps not decreasing: {mean:?}"))?;
    Ok(format!("worst gap at 512 steps {worst:.1e}; mean gaps {:?}", mean.map(|g| format!("{g:.1e}"))))
}

fn lrp_conservation() -> Check {
    let mut checks = 0;
    for s in 0..8 {
        let nets = [
            (zoo::mlp(&[5, 8, 8, 3], Activation::Relu, false, s).map_err(e)?, nonneg(3, &[5], s)),
            (zoo::cnn(1, 6, 3, false, s).map_err(e)?, nonneg(2, &[1, 6, 6], s)),
        ];
        for (graph, x) in nets {
            let logits = graph.forward(&x, false).map_err(e)?.0;
            let logits = logits.get_tensor("y").map_err(e)?.clone();
            let mut m = HookedModel::new(graph);
            for kind in [RuleKind::Lrp0, RuleKind::ZPlus, RuleKind::Flat, RuleKind::WSquare] {
                // z+ passes relevance only through positive contributions, so a
                // negative target logit has nowhere to go.
                let rows: Vec<usize> =
                    (0..logits.rows()).filter(|&r| kind != RuleKind::ZPlus || logits.row(r)[0] > 0.0).collect();
                for r in rows {
                    let xr = x.get_tensor("x").map_err(e)?;
                    let mut shape = xr.shape().to_vec();
                    shape[0] = 1;
                    let one = TensorMap::with_batch(vec![1])
                        .with("x", Tensor::new(shape, xr.row(r).to_vec()).map_err(e)?)
                        .map_err(e)?;
                    let cfg = AttributionConfig::new(Target::index("y", 0));
                    let opts = LrpOptions { audit: true, ..Default::default() };
                    let out = lrp_with(&mut m, &one, &cfg, &LrpRules::uniform(kind), None, opts).map_err(e)?;
                    let input = out.result.attributions.get_tensor("x").map_err(e)?.sum();
                    let logit = logits.row(r)[0];
                    ensure((input - logit).abs() < 1e-8, || format!("{kind}: input total {input} vs logit {logit}"))?;
                    for l in &out.layers {
                        let (a, b) = (l.entering_total(), l.leaving_total());
                        ensure((a - b).abs() < 1e-8, || format!("{kind} at {}: {a} vs {b}", l.site))?;
                    }
                    checks += 1;
                }
            }
            let cfg = AttributionConfig::new(Target::index("y", 0));
            let r0 = lrp_with(&mut m, &x, &cfg, &LrpRules::uniform(RuleKind::Lrp0), None, LrpOptions::default())
                .map_err(e)?
                .result;
            let gxi = saliency(&mut m, &x, &cfg.clone().times_inputs(true)).map_err(e)?;
            let d = r0
                .attributions
                .get_tensor("x")
                .map_err(e)?
                .max_abs_diff(gxi.attributions.get_tensor("x").map_err(e)?)
                .map_err(e)?;
            ensure(d < 1e-8, || format!("lrp0 differs from gradient x input by {d:e}"))?;
        }
    }
    Ok(format!("{checks} conserving propagations, lrp0 == gradient x input on 16 nets"))
}

const SITES: [&str; 5] = ["fc0", "act0", "fc1", "act1", "fc2"];

fn small(seed: u64) -> HookedModel {
    HookedModel::new(zoo::mlp(&[3, 4, 4, 2], Activation::Tanh, true, seed).unwrap())
}

fn get_set_soundness() -> Check {
    for seed in 0..5 {
        let mut m = small(seed);
        let x = batch(3, &[3], seed);
        let c = zoo::uniform_batch("h", 3, &[4], 2.0, seed + 50).map_err(e)?;
        let mut ctx = m.context().map_err(e)?;
        ctx.set("act0", Slot::Output, c.get_tensor("h").map_err(e)?.clone()).map_err(e)?;
        let patched = ctx.run(&x).map_err(e)?.outputs;
        let params = m.graph().parameters();
        let mut tail = TensorMap::new();
        for name in ["fc1", "fc2"] {
            tail.put(name, params.get_map(name).map_err(e)?.clone()).map_err(e)?;
        }
        let downstream = GraphBuilder::new()
            .input("h")
            .module("fc1", ModuleKind::linear(4, 4, true))
            .module("act1", ModuleKind::Tanh)
            .module("fc2", ModuleKind::linear(4, 2, true))
            .output("y", "fc2")
            .build_with_params(&tail)
            .map_err(e)?;
        ensure(patched.bitwise_eq(&downstream.forward(&c, false).map_err(e)?.0), || {
            format!("seed {seed}: set differs from composition")
        })?;
    }

    for (i, stop) in SITES.iter().enumerate() {
        let mut m = small(1);
        let counters: Vec<Arc<AtomicUsize>> = SITES.iter().map(|_| Arc::default()).collect();
        for (site, c) in SITES.iter().zip(&counters) {
            let c = Arc::clone(c);
            m.register(
                site,
                Slot::Output,
                Box::new(move |_, _| {
                    c.fetch_add(1, Ordering::SeqCst);
                    Ok(None)
                }),
            )
            .map_err(e)?;
        }
        let mut ctx = m.context().map_err(e)?;
        ctx.stop_at(stop).map_err(e)?;
        ctx.run(&batch(2, &[3], 0)).map_err(e)?;
        for (j, c) in counters.iter().enumerate().skip(i + 1) {
            let n = c.load(Ordering::SeqCst);
            ensure(n == 0, || format!("stop at {stop}: {} ran {n} times", SITES[j]))?;
        }
    }

    let cases = 500;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = batch(2, &[3], 9);
    for case in 0..cases {
        let mut m = small(3);
        for _ in 0..rng.gen_range(0..4) {
            m.register_capture(SITES[rng.gen_range(0..5)], Slot::Output).map_err(e)?;
        }
        let (before, hooks) = (m.registry_digest(), m.hooks().len());
        {
            let mut ctx = m.context().map_err(e)?;
            for _ in 0..rng.gen_range(0..8) {
                let s = rng.gen_range(0..5);
                let w = if s == 4 { 2 } else { 4 };
                let _ = match rng.gen_range(0..7) {
                    0 => ctx.get(SITES[s], Slot::Output).map(drop),
                    1 => ctx.set(SITES[s], Slot::Output, Tensor::zeros(vec![2, w])),
                    2 => ctx.set(SITES[s], Slot::Output, Tensor::zeros(vec![2, 7])),
                    3 => ctx.set_with(SITES[s], Slot::Output, |t: &Tensor| Ok(t.scale(2.0))),
                    4 => ctx.hook(SITES[s], Slot::GradOutput, Box::new(|_, _| Ok(None))),
                    5 => ctx.stop_at(SITES[s]),
                    _ => {
                        ctx.backward(|v| {
                            let y = v.output("y").ok_or(hookscope::Error::Seed("no output".into()))?;
                            Ok(vec![vec![(SeedPoint::Output("y".into()), Tensor::full(y.shape().to_vec(), 1.0))]])
                        });
                        Ok(())
                    }
                };
            }
            match rng.gen_range(0..3) {
                0 => drop(ctx),
                1 => {
                    let _ = ctx.run(&x);
                }
                _ => {
                    let _ = ctx.run(&TensorMap::new());
                }
            }
        }
        ensure(m.registry_digest() == before && m.hooks().len() == hooks && m.is_idle(), || {
            format!("case {case}: registry not restored")
        })?;
    }
    Ok(format!("5 composition seeds bitwise, 5 stop sites, {cases}/{cases} random hook sequences restored"))
}

fn patching() -> Check {
    let mut worst = 0.0f64;
    for s in 0..10 {
        let affine = GraphBuilder::new()
            .input("x")
            .module("fc0", ModuleKind::linear(4, 6, true))
            .module("fc1", ModuleKind::linear(6, 3, true))
            .output("y", "fc1");
        let mut m = HookedModel::new(zoo::scaled_init(affine, s).map_err(e)?);
        let (clean, corrupt) = (batch(3, &[4], 10 + s), batch(3, &[4], 20 + s));
        let metric = Target::index("y", 0);
        let act = activation_patch(&mut m, &clean, &corrupt, &["fc0", "fc1"], &metric).map_err(e)?.activation_effects();
        let grad = attribution_patch(&mut m, &clean, &corrupt, &["fc0", "fc1"], &metric, &PatchMode::Gradient)
            .map_err(e)?
            .gradient_effects()
            .ok_or("no gradient effects")?;
        let scale = act.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        for (a, g) in act.iter().zip(&grad) {
            let d = (a - g).abs() / scale;
            worst = worst.max(d);
            ensure(d <= 64.0 * f64::EPSILON, || format!("affine seed {s}: {a} vs {g}"))?;
        }
    }
    let mut min_r = f64::INFINITY;
    for s in 0..20 {
        let mut m = HookedModel::new(zoo::mlp(&[6, 10, 10, 2], Activation::Tanh, true, s).map_err(e)?);
        let clean = batch(4, &[6], 100 + s);
        let noise = batch(4, &[6], 200 + s);
        let corrupt = clean.zip_apply(&noise, |a, n| a.add(&n.scale(0.3))).map_err(e)?;
        let report = attribution_patch(
            &mut m,
            &clean,
            &corrupt,
            &["fc0", "act0", "fc1", "act1"],
            &Target::index("y", 1),
            &PatchMode::Gradient,
        )
        .map_err(e)?;
        let r = pearson(&report.activation_effects(), &report.gradient_effects().ok_or("no gradient effects")?);
        min_r = min_r.min(r);
        ensure(r > 0.9, || format!("seed {s}: r = {r}"))?;
    }
    Ok(format!("affine worst relative gap {worst:.1e}; min Pearson r {min_r:.4} over 20 seeds"))
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn probing() -> Check {
    let mut lows = (f64::INFINITY, f64::NEG_INFINITY);
    for s in 0..10 {
        let mut m = HookedModel::new(zoo::mlp(&[5, 12, 3], Activation::Relu, true, 7 + s).map_err(e)?);
        let x = batch(200, &[5], 8 + s);
        let mut ctx = m.context().map_err(e)?;
        let h = ctx.get("act0", Slot::Output).map_err(e)?;
        ctx.run(&x).map_err(e)?;
        let h = h.value().map_err(e)?;
        let u = zoo::uniform_batch("u", 1, &[12], 1.0, 300 + s).map_err(e)?.get_tensor("u").map_err(e)?.row(0).to_vec();
        let t: Vec<f64> = (0..h.rows()).map(|r| h.row(r).iter().zip(&u).map(|(a, b)| a * b).sum()).collect();
        let targets = Tensor::new(vec![h.rows(), 1], t).map_err(e)?;
        let layer = fit_probe("act0", h, &targets, DEFAULT_RIDGE, s).map_err(e)?.r2_test.ok_or("undefined r2")?;
        let raw = fit_probe("x", x.get_tensor("x").map_err(e)?, &targets, DEFAULT_RIDGE, s)
            .map_err(e)?
            .r2_test
            .ok_or("undefined r2")?;
        ensure(layer >= 0.99 && raw < layer, || format!("seed {s}: layer {layer}, raw {raw}"))?;
        lows = (lows.0.min(layer), lows.1.max(raw));
    }
    Ok(format!("min layer r2_test {:.6}, max baseline r2_test {:.4}", lows.0, lows.1))
}

fn multi_target_speedup() -> Check {
    let dir = tempfile::tempdir().map_err(e)?;
    let cfg = BenchConfig {
        tasks: vec![BenchTask::IgMulti, BenchTask::IgLoop],
        models: vec![ModelSize { width: 64, depth: 3 }],
        batches: vec![16],
        steps: vec![32],
        seeds: vec![0],
        targets: 8,
        repeats: 5,
        warmup: 1,
        csv: "bench.csv".into(),
    };
    let records = run_bench(Path::new(env!("CARGO_BIN_EXE_hookscope")), &cfg, &dir.path().join("bench.csv"), |_| {})
        .map_err(e)?;
    let run = |task: BenchTask| {
        records
            .iter()
            .find(|r| r.variant.task == task && r.phase == Phase::Run)
            .filter(|r| r.ok())
            .map(|r| r.mean_ms)
            .ok_or(format!("no successful {} run record", task.name()))
    };
    let (multi, looped) = (run(BenchTask::IgMulti)?, run(BenchTask::IgLoop)?);
    let speedup = looped / multi;
    ensure(speedup >= 1.5, || format!("speed-up {speedup:.2} ({looped:.1} ms vs {multi:.1} ms)"))?;
    Ok(format!("speed-up {speedup:.2}x ({looped:.1} ms loop vs {multi:.1} ms vectorized)"))
}

fn pixel_flipping_order() -> Check {
    let fractions: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let seeds = 20;
    let (mut by_grad, mut by_random) = (vec![0.0; 9], vec![0.0; 9]);
    for s in 0..seeds {
        let mut m = HookedModel::new(zoo::mlp(&[20, 3], Activation::Relu, true, s).map_err(e)?);
        let x = nonneg(4, &[20], 50 + s);
        let target = Target::index("y", 0);
        let grad = saliency(&mut m, &x, &AttributionConfig::new(target.clone())).map_err(e)?;
        let random = AttributionResult {
            attributions: zoo::uniform_batch("x", 4, &[20], 1.0, 900 + s).map_err(e)?,
            method: "random".into(),
            config_digest: String::new(),
        };
        let g = pixel_flipping(&mut m, &x, &grad, &target, &fractions, &Fill::Zero).map_err(e)?;
        let r = pixel_flipping(&mut m, &x, &random, &target, &fractions, &Fill::Zero).map_err(e)?;
        for i in 0..9 {
            by_grad[i] += g.values[i] / seeds as f64;
            by_random[i] += r.values[i] / seeds as f64;
        }
    }
    for i in 0..9 {
        ensure(by_grad[i] < by_random[i], || {
            format!("fraction {}: gradient {} vs random {}", fractions[i], by_grad[i], by_random[i])
        })?;
    }
    let margin = by_grad.iter().zip(&by_random).map(|(g, r)| r - g).fold(f64::INFINITY, f64::min);
    Ok(format!("gradient order below random at all 9 fractions, smallest margin {margin:.3}"))
}

fn weights_algebra() -> Check {
    for s in 0..10 {
        let pre = zoo::mlp(&[4, 6, 3], Activation::Tanh, true, s).map_err(e)?;
        let fine = zoo::mlp(&[4, 6, 3], Activation::Tanh, true, 100 + s).map_err(e)?;
        let back = apply(&pre, &task_vector(&pre, &fine).map_err(e)?, 1.0).map_err(e)?;
        ensure(back.parameters().bitwise_eq(&fine.parameters()), || format!("seed {s}: round trip not bitwise"))?;
    }
    let m = zoo::mlp(&[4, 8, 8, 3], Activation::Relu, true, 5).map_err(e)?;
    let rel = m.parameters().apply(|t| t.abs()).map_err(e)?;
    let size: usize = rel.flatten_keys().iter().map(|(_, t)| t.numel()).sum();
    for sparsity in [0.0, 0.1, 0.25, 0.5, 0.77, 1.0] {
        let (pruned, mask) = prune(&m, &rel, sparsity, Granularity::Weight).map_err(e)?;
        let zeros: usize = pruned
            .parameters()
            .flatten_keys()
            .iter()
            .map(|(_, t)| t.data().iter().filter(|v| **v == 0.0).count())
            .sum();
        let want = (sparsity * size as f64).floor() as usize;
        ensure(mask.size() == size && mask.zeros() == want && zeros == want, || {
            format!("sparsity {sparsity}: {} masked, {zeros} zero weights, want {want}", mask.zeros())
        })?;
    }
    let mut hm = HookedModel::new(zoo::mlp(&[3, 5, 5, 2], Activation::Tanh, true, 4).map_err(e)?);
    let x = batch(6, &[3], 1);
    let before = hm.forward(&x).map_err(e)?;
    let adapter = Adapter {
        site: "act0".into(),
        encoder: (
            Tensor::new(vec![2, 5], (0..10).map(|i| i as f64 / 10.0 - 0.4).collect()).map_err(e)?,
            Tensor::zeros(vec![2]),
        ),
        decoder: (
            Tensor::new(vec![5, 2], (0..10).map(|i| 0.3 - i as f64 / 20.0).collect()).map_err(e)?,
            Tensor::zeros(vec![5]),
        ),
        mode: AdapterMode::Residual,
        relu: true,
    };
    let handle = insert_adapter(&mut hm, adapter).map_err(e)?;
    ensure(!hm.forward(&x).map_err(e)?.bitwise_eq(&before), || "adapter had no effect".into())?;
    remove_adapter(&mut hm, handle);
    ensure(hm.forward(&x).map_err(e)?.bitwise_eq(&before), || "outputs not restored after removal".into())?;
    Ok("round trips bitwise on 10 seeds, 6 sparsities exact, adapter removal bitwise".into())
}

/// P(at least `wins` heads in `n` fair flips).
fn binomial_tail(wins: usize, n: usize) -> f64 {
    let mut p = 0.0;
    for k in wins..=n {
        let c: f64 = (0..k).map(|i| (n - i) as f64 / (i + 1) as f64).product();
        p += c / 2f64.powi(n as i32);
    }
    p
}

fn pruning_efficacy() -> Check {
    let seeds = 16;
    let mut wins = 0;
    for s in 0..seeds {
        let model = zoo::mlp(&[8, 32, 32, 4], Activation::Tanh, true, s).map_err(e)?;
        let x = batch(64, &[8], 500 + s);
        let reference = model.forward(&x, false).map_err(e)?.0;
        let params = model.parameters();
        let mut rel = TensorMap::new();
        for k in 0..4 {
            let g = tape_grads(&model, &x, k);
            for (key, w) in params.flatten_keys() {
                if !key.ends_with(".weight") {
                    continue;
                }
                let r = w.mul(g.get_tensor(key.as_str()).map_err(e)?).map_err(e)?.abs();
                let acc = match rel.get_tensor(key.as_str()) {
                    Ok(prev) => prev.add(&r).map_err(e)?,
                    Err(_) => r,
                };
                rel.put(key.as_str(), acc).map_err(e)?;
            }
        }
        let loss = |relevance: &TensorMap| -> Result<f64, String> {
            let (pruned, _) = prune(&model, relevance, 0.5, Granularity::Weight).map_err(e)?;
            let y = pruned.forward(&x, false).map_err(e)?.0;
            let d = y.get_tensor("y").map_err(e)?.sub(reference.get_tensor("y").map_err(e)?).map_err(e)?;
            Ok(d.data().iter().map(|v| v * v).sum::<f64>() / d.numel() as f64)
        };
        if loss(&rel)? < loss(&random_relevance(&rel, 1000 + s).map_err(e)?)? {
            wins += 1;
        }
    }
    let p = binomial_tail(wins, seeds as usize);
    ensure(p < 0.05, || format!("{wins}/{seeds} wins, p = {p:.3}"))?;
    Ok(format!("relevance masks win {wins}/{seeds} paired seeds, sign test p = {p:.2e}"))
}

fn cli_determinism() -> Check {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let mut fixtures: Vec<_> =
        fs::read_dir(&root).map_err(e)?.map(|d| d.unwrap().path()).filter(|p| p.join("golden").is_dir()).collect();
    fixtures.sort();
    ensure(!fixtures.is_empty(), || "no fixtures with goldens".into())?;
    let mut files = 0;
    for fx in &fixtures {
        let config = fs::read_to_string(fx.join("config.toml")).map_err(e)?;
        let command = config
            .lines()
            .find_map(|l| l.strip_prefix("command = \""))
            .and_then(|l| l.strip_suffix('"'))
            .ok_or("config without command")?;
        let mut golden: Vec<_> = fs::read_dir(fx.join("golden")).map_err(e)?.map(|d| d.unwrap().file_name()).collect();
        golden.sort();
        for run in 0..2 {
            let out = tempfile::tempdir().map_err(e)?;
            let status = Command::new(env!("CARGO_BIN_EXE_hookscope"))
                .args([command, "--config"])
                .arg(fx.join("config.toml"))
                .arg("--out")
                .arg(out.path())
                .env_remove(hookscope_cli::OUT_ENV)
                .output()
                .map_err(e)?;
            let name = fx.file_name().unwrap().to_string_lossy().to_string();
            ensure(status.status.success(), || {
                format!("{name} run {run}: {}", String::from_utf8_lossy(&status.stderr))
            })?;
            let mut produced: Vec<_> = fs::read_dir(out.path()).map_err(e)?.map(|d| d.unwrap().file_name()).collect();
            produced.sort();
            ensure(produced == golden, || format!("{name} run {run}: file set {produced:?} vs {golden:?}"))?;
            for f in &golden {
                let same =
                    fs::read(fx.join("golden").join(f)).map_err(e)? == fs::read(out.path().join(f)).map_err(e)?;
                ensure(same, || format!("{name} run {run}: {} differs from golden", f.to_string_lossy()))?;
                files += 1;
            }
        }
    }
    Ok(format!("{} configs, {files} files bitwise equal to goldens over two runs", fixtures.len()))
}

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 11] = [
        ("gradient engine matches finite differences", Some(60), gradient_oracle),
        ("integrated gradients completeness", Some(60), ig_completeness),
        ("LRP conservation", None, lrp_conservation),
        ("get-set soundness", None, get_set_soundness),
        ("patching exactness and correlation", Some(120), patching),
        ("probing pipeline", None, probing),
        ("multi-target backward speed-up", Some(300), multi_target_speedup),
        ("pixel flipping order", None, pixel_flipping_order),
        ("weights algebra", None, weights_algebra),
        ("pruning efficacy", Some(300), pruning_efficacy),
        ("CLI determinism", None, cli_determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, limit, check)) in criteria.into_iter().enumerate() {
        let n = i + 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = start.elapsed();
        let outcome = match (outcome, limit) {
            (Ok(_), Some(l)) if elapsed > Duration::from_secs(l) => Err(format!("took {elapsed:.1?}, limit {l} s")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{elapsed:.2?}]"),
            Err(detail) => {
                println!("criterion {n:>2} FAIL  {name}: {detail} [{elapsed:.2?}]");
                failed.push(n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
