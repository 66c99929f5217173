//! One function per non-bench command. Each reads its inputs, runs the
//! method and writes its reports into the output directory, returning the
//! paths it wrote.

use std::path::{Path, PathBuf};

use anyhow::Context;
use hookscope::attribution::{
    self, activation_maximisation, AttributionConfig, AttributionResult, MultiTarget, UnitRef,
};
use hookscope::latent::{attribution_patch, cache_activations, fit_probe, PatchMode};
use hookscope::weights::{prune, random_relevance, Granularity};
use hookscope::{io, DType, HookedModel, ModelGraph, ModuleKind, SeedPoint, Slot, Tensor, TensorMap};

use crate::config::{
    lrp_rules, AttributeConfig, AttributionMethod, GranularityConfig, MaximiseConfig, PatchConfig, PatchModeConfig,
    ProbeConfig, PruneConfig, RelevanceSource,
};
use crate::report::{float, heatmaps, opt_float, pgm_bytes, write_csv};
use crate::Failure;

pub(crate) fn load_model(path: &Path, dtype: DType) -> Result<ModelGraph, Failure> {
    let m = io::read_model(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    Ok(m.with_dtype(dtype))
}

pub(crate) fn load_map(path: &Path, dtype: DType) -> Result<TensorMap, Failure> {
    let m = io::read_tensormap(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    Ok(m.apply(|t| t.to_dtype(dtype))?)
}

fn write_bytes(path: PathBuf, bytes: &[u8]) -> Result<PathBuf, Failure> {
    std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display())).map_err(Failure::Runtime)?;
    Ok(path)
}

fn attribution_rows(result: &AttributionResult) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (key, t) in result.attributions.flatten_keys() {
        for n in 0..t.rows() {
            for (i, v) in t.row(n).iter().enumerate() {
                rows.push(vec![n.to_string(), key.to_string(), i.to_string(), float(*v)]);
            }
        }
    }
    rows
}

pub fn attribute(model: ModelGraph, cfg: &AttributeConfig, dtype: DType, out: &Path) -> Result<Vec<PathBuf>, Failure> {
    let inputs = load_map(&cfg.inputs, dtype)?;
    let baseline = cfg.baseline.as_deref().map(|p| load_map(p, dtype)).transpose()?;
    let rules = lrp_rules(&cfg.rules)?;
    let mut model = HookedModel::new(model);
    let base_cfg = |t: hookscope::attribution::Target| {
        let mut c = AttributionConfig::new(t);
        if let Some(s) = cfg.steps {
            c = c.with_steps(s);
        }
        if let Some(b) = &baseline {
            c = c.with_baseline(b.clone());
        }
        c
    };
    let targets: Vec<_> = cfg.targets.iter().map(|t| t.target()).collect();
    let results: Vec<AttributionResult> = match cfg.method {
        AttributionMethod::IntegratedGradients => attribution::integrated_gradients_multi(
            &mut model,
            &inputs,
            &base_cfg(targets[0].clone()),
            &targets,
            MultiTarget::Vectorized,
        )?,
        method => {
            let mut v = Vec::with_capacity(targets.len());
            for t in &targets {
                let c = base_cfg(t.clone());
                let site = cfg.site.as_deref().unwrap_or_default();
                v.push(match method {
                    AttributionMethod::Saliency => attribution::saliency(&mut model, &inputs, &c)?,
                    AttributionMethod::GradientXInput => {
                        attribution::saliency(&mut model, &inputs, &c.times_inputs(true))?
                    }
                    AttributionMethod::Conductance => attribution::layer_conductance(&mut model, &inputs, &c, site)?,
                    AttributionMethod::GradCam => attribution::grad_cam(&mut model, &inputs, &c, site)?,
                    AttributionMethod::GuidedBackprop => attribution::guided_backprop(&mut model, &inputs, &c)?,
                    AttributionMethod::Lrp => attribution::lrp(&mut model, &inputs, &c, &rules, None)?,
                    AttributionMethod::IntegratedGradients => unreachable!("handled above"),
                });
            }
            v
        }
    };
    let mut written = Vec::new();
    for (t, r) in cfg.targets.iter().zip(&results) {
        let stem = format!("attribution_{}_{}", t.output, t.index);
        written.push(write_csv(
            &out.join(format!("{stem}.csv")),
            &["sample", "key", "coord", "value"],
            &attribution_rows(r),
        )?);
        for (key, tensor) in r.attributions.flatten_keys() {
            if let Some((h, w, maps)) = heatmaps(&tensor) {
                for (n, m) in maps.iter().enumerate() {
                    let name = format!("{stem}_{}_{n}.pgm", key.replace('.', "_"));
                    written.push(write_bytes(out.join(name), &pgm_bytes(h, w, m))?);
                }
            }
        }
    }
    Ok(written)
}

pub fn probe(
    model: ModelGraph,
    cfg: &ProbeConfig,
    dtype: DType,
    seed: u64,
    out: &Path,
) -> Result<Vec<PathBuf>, Failure> {
    let inputs = load_map(&cfg.inputs, dtype)?;
    let targets_map = load_map(&cfg.targets, DType::F64)?;
    let targets = targets_map
        .get_tensor(cfg.target_key.as_str())
        .map_err(|_| Failure::config(format!("targets file has no entry {:?}", cfg.target_key)))?
        .clone();
    let sites: Vec<String> = if cfg.sites.is_empty() {
        model.execution_order().iter().map(|&i| model.modules()[i].name().to_string()).collect()
    } else {
        cfg.sites.clone()
    };
    let input_keys = model.input_keys().to_vec();
    let mut model = HookedModel::new(model);
    let site_refs: Vec<&str> = sites.iter().map(String::as_str).collect();
    let store = cache_activations(&mut model, std::slice::from_ref(&inputs), &site_refs, 1)?;
    let mut rows = Vec::new();
    let mut push = |kind: &str, site: &str, h: &Tensor| -> Result<(), Failure> {
        let r = fit_probe(site, h, &targets, cfg.lambda, seed)?;
        rows.push(vec![
            site.to_string(),
            kind.to_string(),
            (h.numel() / h.rows().max(1)).to_string(),
            r.train_size.to_string(),
            r.test_size.to_string(),
            float(r.lambda),
            opt_float(r.r2_train),
            opt_float(r.r2_test),
        ]);
        Ok(())
    };
    for s in &sites {
        push("layer", s, store.activations(s)?)?;
    }
    if cfg.baseline {
        for k in &input_keys {
            push("baseline", k, inputs.get_tensor(k.as_str())?)?;
        }
    }
    let header = ["site", "kind", "units", "train_size", "test_size", "lambda", "r2_train", "r2_test"];
    Ok(vec![write_csv(&out.join("probe.csv"), &header, &rows)?])
}

fn status(r: Option<f64>, computed: bool) -> (String, String) {
    match (computed, r) {
        (false, _) => ("NaN".into(), "not_computed".into()),
        (true, Some(v)) => (float(v), "ok".into()),
        (true, None) => ("NaN".into(), "undefined".into()),
    }
}

pub fn patch(model: ModelGraph, cfg: &PatchConfig, dtype: DType, out: &Path) -> Result<Vec<PathBuf>, Failure> {
    let clean = load_map(&cfg.clean, dtype)?;
    let corrupt = load_map(&cfg.corrupt, dtype)?;
    let sites: Vec<String> = if cfg.sites.is_empty() {
        model.execution_order().iter().map(|&i| model.modules()[i].name().to_string()).collect()
    } else {
        cfg.sites.clone()
    };
    let mode = match cfg.mode {
        PatchModeConfig::Gradient => PatchMode::Gradient,
        PatchModeConfig::Relevance => PatchMode::Relevance(lrp_rules(&cfg.rules)?),
    };
    let mut model = HookedModel::new(model);
    let site_refs: Vec<&str> = sites.iter().map(String::as_str).collect();
    let report = attribution_patch(&mut model, &clean, &corrupt, &site_refs, &cfg.target.target(), &mode)?;

    let mut units = Vec::new();
    for s in &report.sites {
        for i in 0..s.activation.numel() {
            let col = |t: &Option<Tensor>| t.as_ref().map_or_else(String::new, |t| float(t.data()[i]));
            units.push(vec![
                s.site.clone(),
                i.to_string(),
                float(s.activation.data()[i]),
                col(&s.gradient),
                col(&s.relevance),
            ]);
        }
    }
    let relevance = cfg.mode == PatchModeConfig::Relevance;
    let mut summary = vec![
        vec!["metric_clean".into(), float(report.metric_clean), "ok".into()],
        vec!["metric_corrupt".into(), float(report.metric_corrupt), "ok".into()],
    ];
    for (name, r, computed) in [
        ("r_activation_gradient", report.r_activation_gradient, true),
        ("r_activation_relevance", report.r_activation_relevance, relevance),
        ("r_gradient_relevance", report.r_gradient_relevance, relevance),
    ] {
        let (v, st) = status(r, computed);
        summary.push(vec![name.into(), v, st]);
    }
    for s in &report.sites {
        summary.push(vec![format!("site_effect.{}", s.site), float(s.site_activation), "ok".into()]);
    }
    Ok(vec![
        write_csv(&out.join("patch_units.csv"), &["site", "unit", "activation", "gradient", "relevance"], &units)?,
        write_csv(&out.join("patch_summary.csv"), &["quantity", "value", "status"], &summary)?,
    ])
}

pub fn maximise(
    model: ModelGraph,
    cfg: &MaximiseConfig,
    dtype: DType,
    seed: u64,
    out: &Path,
) -> Result<Vec<PathBuf>, Failure> {
    let init = cfg.init.as_deref().map(|p| load_map(p, dtype)).transpose()?;
    let template = match &init {
        Some(m) => m.clone(),
        None => {
            let keys = model.input_keys();
            if keys.len() != 1 {
                return Err(Failure::config("a shape only describes single-input models; give an init file"));
            }
            let mut shape = vec![1];
            shape.extend_from_slice(&cfg.shape);
            TensorMap::with_batch(vec![1]).with(keys[0].as_str(), Tensor::zeros(shape).to_dtype(dtype))?
        }
    };
    let mcfg = attribution::MaximiseConfig {
        lr: cfg.lr,
        iters: cfg.iters,
        l2: cfg.l2,
        seed,
        init_scale: cfg.init_scale,
        init,
    };
    let mut model = HookedModel::new(model);
    let res = activation_maximisation(&mut model, &template, &UnitRef::new(&cfg.site, cfg.index), &mcfg)?;
    let pre_path = out.join("preimage.tmap");
    io::write_tensormap(&pre_path, &res.preimage)?;
    let rows: Vec<Vec<String>> = res
        .objective
        .iter()
        .zip(&res.activation)
        .enumerate()
        .map(|(i, (o, a))| vec![i.to_string(), float(*o), float(*a)])
        .collect();
    let mut written =
        vec![pre_path, write_csv(&out.join("trajectory.csv"), &["iter", "objective", "activation"], &rows)?];
    for (key, t) in res.preimage.flatten_keys() {
        if let Some((h, w, maps)) = heatmaps(&t) {
            let name = format!("preimage_{}.pgm", key.replace('.', "_"));
            written.push(write_bytes(out.join(name), &pgm_bytes(h, w, &maps[0]))?);
        }
    }
    Ok(written)
}

fn unit_sites(model: &ModelGraph, cfg: &PruneConfig) -> Vec<String> {
    if !cfg.units.is_empty() {
        return cfg.units.clone();
    }
    let outputs: Vec<&str> = model.outputs().iter().map(|o| o.module.as_str()).collect();
    model
        .modules()
        .iter()
        .filter(|m| matches!(m.kind(), ModuleKind::Linear { .. } | ModuleKind::Conv2d { .. }))
        .filter(|m| !outputs.contains(&m.name()))
        .map(|m| m.name().to_string())
        .collect()
}

/// Per-unit sum of `v` over the batch and any spatial positions.
fn per_unit(v: &Tensor) -> Vec<f64> {
    let units = v.shape()[1];
    let per = v.row_len() / units;
    let mut acc = vec![0.0; units];
    for n in 0..v.rows() {
        for (u, a) in acc.iter_mut().enumerate() {
            *a += v.row(n)[u * per..(u + 1) * per].iter().sum::<f64>();
        }
    }
    acc
}

fn prune_relevance(model: &ModelGraph, cfg: &PruneConfig, inputs: &TensorMap, seed: u64) -> Result<TensorMap, Failure> {
    let mut rel = TensorMap::new();
    match cfg.granularity {
        GranularityConfig::Weight => {
            let params = model.parameters();
            let keep = |k: &str| k.ends_with(".weight") || (cfg.include_bias && k.ends_with(".bias"));
            let grads = match cfg.relevance {
                RelevanceSource::Gradient => {
                    let target = cfg.target.as_ref().expect("validated").target();
                    let mut hm = HookedModel::new(model.clone());
                    let mut ctx = hm.context()?;
                    ctx.with_param_grads(true);
                    ctx.backward(move |v| {
                        let y = v
                            .output(&target.output)
                            .ok_or_else(|| hookscope::Error::Seed(format!("no output {:?}", target.output)))?;
                        Ok(vec![vec![(SeedPoint::Output(target.output.clone()), target.seed_tensor(y)?)]])
                    });
                    Some(ctx.run(inputs)?.grad()?.clone())
                }
                _ => None,
            };
            for (k, w) in params.flatten_keys() {
                if !keep(k.as_str()) {
                    continue;
                }
                let r = match &grads {
                    Some(g) => w.mul(g.get_tensor(k.as_str())?)?.abs(),
                    None => w.abs(),
                };
                rel.put(k.as_str(), r)?;
            }
        }
        GranularityConfig::Unit => {
            let sites = unit_sites(model, cfg);
            match cfg.relevance {
                RelevanceSource::Gradient => {
                    let target = cfg.target.as_ref().expect("validated").target();
                    let mut hm = HookedModel::new(model.clone());
                    let mut ctx = hm.context()?;
                    let mut proxies = Vec::new();
                    for s in &sites {
                        proxies.push((ctx.get(s, Slot::Output)?, ctx.get(s, Slot::GradOutput)?));
                    }
                    ctx.backward(move |v| {
                        Ok(vec![vec![(
                            SeedPoint::Output(target.output.clone()),
                            target
                                .seed_tensor(v.output(&target.output).ok_or_else(|| {
                                    hookscope::Error::Seed(format!("no output {:?}", target.output))
                                })?)?,
                        )]])
                    });
                    ctx.run(inputs)?;
                    for (s, (h, g)) in sites.iter().zip(proxies) {
                        let hg = h.value()?.mul(g.value()?)?.abs();
                        rel.put(s.as_str(), Tensor::vector(&per_unit(&hg)))?;
                    }
                }
                _ => {
                    for s in &sites {
                        let m = model.module(s).ok_or_else(|| Failure::config(format!("unknown module {s:?}")))?;
                        let w = m.weight().ok_or_else(|| Failure::config(format!("{s:?} has no weights")))?;
                        let rows = w.shape()[0];
                        let per = w.numel() / rows;
                        let norms: Vec<f64> = (0..rows)
                            .map(|r| w.data()[r * per..(r + 1) * per].iter().map(|v| v * v).sum::<f64>().sqrt())
                            .collect();
                        rel.put(s.as_str(), Tensor::vector(&norms))?;
                    }
                }
            }
        }
    }
    if cfg.relevance == RelevanceSource::Random {
        rel = random_relevance(&rel, seed)?;
    }
    Ok(rel)
}

fn mse(model: &ModelGraph, inputs: &TensorMap, labels: &Tensor) -> Result<f64, Failure> {
    let (y, _) = model.forward(inputs, false)?;
    let key = model.outputs()[0].key.as_str();
    let d = y.get_tensor(key)?.sub(labels)?;
    Ok(d.data().iter().map(|v| v * v).sum::<f64>() / d.numel().max(1) as f64)
}

pub fn prune_cmd(
    model: ModelGraph,
    cfg: &PruneConfig,
    dtype: DType,
    seed: u64,
    out: &Path,
) -> Result<Vec<PathBuf>, Failure> {
    let inputs = load_map(&cfg.inputs, dtype)?;
    let labels = match &cfg.labels {
        Some(p) => Some(
            load_map(p, DType::F64)?
                .get_tensor(cfg.label_key.as_str())
                .map_err(|_| Failure::config(format!("labels file has no entry {:?}", cfg.label_key)))?
                .clone(),
        ),
        None => None,
    };
    let rel = prune_relevance(&model, cfg, &inputs, seed)?;
    let granularity = match cfg.granularity {
        GranularityConfig::Weight => Granularity::Weight,
        GranularityConfig::Unit => Granularity::Unit,
    };
    let (pruned, mask) = prune(&model, &rel, cfg.sparsity, granularity)?;
    let model_path = out.join("pruned.hsm");
    io::write_model(&model_path, &pruned)?;
    let mask_path = out.join("mask.tmap");
    io::write_tensormap(&mask_path, &mask.masks)?;
    let rows: Vec<Vec<String>> = mask
        .masks
        .flatten_keys()
        .iter()
        .map(|(k, t)| {
            let zeros = t.data().iter().filter(|v| **v == 0.0).count();
            vec![k.to_string(), t.numel().to_string(), zeros.to_string()]
        })
        .collect();
    let mut summary = vec![
        vec!["sparsity_requested".to_string(), float(cfg.sparsity)],
        vec!["sparsity_realised".to_string(), float(mask.realised_sparsity())],
    ];
    if let Some(l) = &labels {
        summary.push(vec!["loss_before".into(), float(mse(&model, &inputs, l)?)]);
        summary.push(vec!["loss_after".into(), float(mse(&pruned, &inputs, l)?)]);
    }
    Ok(vec![
        model_path,
        mask_path,
        write_csv(&out.join("prune.csv"), &["key", "size", "zeros"], &rows)?,
        write_csv(&out.join("prune_summary.csv"), &["quantity", "value"], &summary)?,
    ])
}
