use crate::attribution::{initial_relevance, AttributionConfig, LrpRule, LrpRules, RelevanceInit, Target};
use crate::error::{Error, Result};
use crate::graph::SeedPoint;
use crate::hooking::{HookedModel, Slot};
use crate::stats::pearson;
use crate::tensor::Tensor;
use crate::tensormap::TensorMap;

use super::capture;

/// Guard added (with the activation's sign) when dividing relevance by
/// activation.
pub const RELEVANCE_GUARD: f64 = 1e-9;

/// Which first-order estimate to add next to the gradient column.
#[derive(Debug, Clone)]
pub enum PatchMode {
    Gradient,
    /// Relevance-to-activation ratios under the given LRP rules.
    Relevance(LrpRules),
}

/// Effects at one site; per-unit tensors have the shape of one row of the
/// site output.
#[derive(Debug, Clone, PartialEq)]
pub struct SitePatch {
    pub site: String,
    /// Metric change from patching each unit alone with its clean value.
    pub activation: Tensor,
    pub gradient: Option<Tensor>,
    pub relevance: Option<Tensor>,
    /// Metric change from patching the whole site at once.
    pub site_activation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchReport {
    pub metric_clean: f64,
    pub metric_corrupt: f64,
    pub sites: Vec<SitePatch>,
    /// Correlations over all units of all sites; `None` when undefined.
    pub r_activation_gradient: Option<f64>,
    pub r_activation_relevance: Option<f64>,
    pub r_gradient_relevance: Option<f64>,
}

impl PatchReport {
    fn column(&self, f: impl Fn(&SitePatch) -> Option<&Tensor>) -> Option<Vec<f64>> {
        let mut v = Vec::new();
        for s in &self.sites {
            v.extend_from_slice(f(s)?.data());
        }
        Some(v)
    }

    pub fn activation_effects(&self) -> Vec<f64> {
        self.column(|s| Some(&s.activation)).unwrap_or_default()
    }

    pub fn gradient_effects(&self) -> Option<Vec<f64>> {
        self.column(|s| s.gradient.as_ref())
    }

    pub fn relevance_effects(&self) -> Option<Vec<f64>> {
        self.column(|s| s.relevance.as_ref())
    }

    fn correlate(&mut self) {
        let a = self.activation_effects();
        let g = self.gradient_effects();
        let r = self.relevance_effects();
        self.r_activation_gradient = g.as_ref().and_then(|g| pearson(&a, g));
        self.r_activation_relevance = r.as_ref().and_then(|r| pearson(&a, r));
        self.r_gradient_relevance = match (&g, &r) {
            (Some(g), Some(r)) => pearson(g, r),
            _ => None,
        };
    }
}

fn mean_metric(metric: &Target, outputs: &TensorMap) -> Result<f64> {
    let v = metric.values(outputs)?;
    Ok(v.iter().sum::<f64>() / v.len().max(1) as f64)
}

fn check_pair(clean: &TensorMap, corrupt: &TensorMap) -> Result<()> {
    let (a, b) = (clean.flatten_keys(), corrupt.flatten_keys());
    if a.len() != b.len() || a.iter().zip(&b).any(|((ka, ta), (kb, tb))| ka != kb || ta.shape() != tb.shape()) {
        return Err(Error::Structure("clean and corrupt inputs differ in structure".into()));
    }
    Ok(())
}

fn owned_sites(model: &HookedModel, sites: &[&str]) -> Result<Vec<String>> {
    sites
        .iter()
        .map(|s| if model.graph().has_site(s) { Ok(s.to_string()) } else { Err(Error::UnknownSite(s.to_string())) })
        .collect()
}

/// Metric on `corrupt` with every listed site replaced by its clean value.
pub fn patched_metric(
    model: &mut HookedModel,
    clean: &TensorMap,
    corrupt: &TensorMap,
    sites: &[&str],
    metric: &Target,
) -> Result<f64> {
    check_pair(clean, corrupt)?;
    let names = owned_sites(model, sites)?;
    let (_, clean_h) = capture(model, clean, &names)?;
    let mut ctx = model.context()?;
    for (s, h) in names.iter().zip(clean_h) {
        ctx.set(s, Slot::Output, h)?;
    }
    let out = ctx.run(corrupt)?;
    mean_metric(metric, &out.outputs)
}

/// Activation patching: per unit and per site, the metric change when the
/// corrupt run receives the clean activation. The metric is the batch mean
/// of `metric`.
pub fn activation_patch(
    model: &mut HookedModel,
    clean: &TensorMap,
    corrupt: &TensorMap,
    sites: &[&str],
    metric: &Target,
) -> Result<PatchReport> {
    check_pair(clean, corrupt)?;
    let names = owned_sites(model, sites)?;
    let (clean_out, clean_h) = capture(model, clean, &names)?;
    let (corrupt_out, _) = capture(model, corrupt, &names)?;
    let m_clean = mean_metric(metric, &clean_out)?;
    let m_corrupt = mean_metric(metric, &corrupt_out)?;
    let mut patches = Vec::with_capacity(names.len());
    for (site, hc) in names.iter().zip(&clean_h) {
        let per = hc.row_len();
        let mut effects = Vec::with_capacity(per);
        for j in 0..per {
            let src = hc.clone();
            let mut ctx = model.context()?;
            ctx.set_with(site, Slot::Output, move |h: &Tensor| {
                let mut out = h.clone();
                let s = src.data();
                out.update(|d| {
                    for (r, row) in d.chunks_mut(per).enumerate() {
                        row[j] = s[r * per + j];
                    }
                });
                Ok(out)
            })?;
            let out = ctx.run(corrupt)?;
            effects.push(mean_metric(metric, &out.outputs)? - m_corrupt);
        }
        let mut ctx = model.context()?;
        ctx.set(site, Slot::Output, hc.clone())?;
        let whole = mean_metric(metric, &ctx.run(corrupt)?.outputs)? - m_corrupt;
        patches.push(SitePatch {
            site: site.clone(),
            activation: Tensor::new(hc.shape()[1..].to_vec(), effects)?,
            gradient: None,
            relevance: None,
            site_activation: whole,
        });
    }
    Ok(PatchReport {
        metric_clean: m_clean,
        metric_corrupt: m_corrupt,
        sites: patches,
        r_activation_gradient: None,
        r_activation_relevance: None,
        r_gradient_relevance: None,
    })
}

/// Per-unit batch mean of `w ⊙ (h_clean - h_corrupt)`.
fn first_order(w: &Tensor, hc: &Tensor, hk: &Tensor) -> Result<Tensor> {
    let (n, per) = (hc.rows(), hc.row_len());
    let mut acc = vec![0.0; per];
    for r in 0..n {
        let (w, c, k) = (w.row(r), hc.row(r), hk.row(r));
        for (j, a) in acc.iter_mut().enumerate() {
            *a += w[j] * (c[j] - k[j]);
        }
    }
    Tensor::new(hc.shape()[1..].to_vec(), acc.iter().map(|a| a / n as f64).collect())
}

/// Attribution patching alongside activation patching.
///
/// The gradient column is `∂metric/∂h` on the clean run times
/// `h_clean - h_corrupt`, which is the first-order estimate of the
/// activation-patching effect (exact on affine models). In relevance mode
/// the gradient is replaced by `R / (h + 1e-9·sign(h))` from an LRP pass on
/// the clean run.
pub fn attribution_patch(
    model: &mut HookedModel,
    clean: &TensorMap,
    corrupt: &TensorMap,
    sites: &[&str],
    metric: &Target,
    mode: &PatchMode,
) -> Result<PatchReport> {
    let mut report = activation_patch(model, clean, corrupt, sites, metric)?;
    let names = owned_sites(model, sites)?;

    let t = metric.clone();
    let mut ctx = model.context()?;
    ctx.backward(move |v| Ok(vec![t.seed_set(v)?]));
    let gp = names.iter().map(|s| ctx.get(s, Slot::GradOutput)).collect::<Result<Vec<_>>>()?;
    let hp = names.iter().map(|s| ctx.get(s, Slot::Output)).collect::<Result<Vec<_>>>()?;
    ctx.run(clean)?;
    let (_, corrupt_h) = capture(model, corrupt, &names)?;

    let mut rel = None;
    if let PatchMode::Relevance(rules) = mode {
        rules.validate(model.graph())?;
        let cfg = AttributionConfig::new(metric.clone());
        let key = metric.output.clone();
        let mut ctx = model.context()?;
        ctx.backward(move |v| {
            let y = v.output(&key).ok_or_else(|| Error::Seed(format!("output {key:?} was not computed")))?;
            Ok(vec![vec![(SeedPoint::Output(key.clone()), initial_relevance(&cfg, RelevanceInit::Logit, y)?)]])
        });
        ctx.rule(LrpRule::new(rules.clone()));
        let rp = names.iter().map(|s| ctx.get(s, Slot::GradOutput)).collect::<Result<Vec<_>>>()?;
        ctx.run(clean)?;
        rel = Some(rp.into_iter().map(|p| p.into_value()).collect::<Result<Vec<_>>>()?);
    }

    for (i, patch) in report.sites.iter_mut().enumerate() {
        let g = gp[i].value()?;
        let hc = hp[i].value()?;
        let hk = &corrupt_h[i];
        patch.gradient = Some(first_order(g, hc, hk)?);
        if let Some(rel) = &rel {
            let ratio = rel[i].zip_map(hc, |r, h| {
                let s = if h >= 0.0 { 1.0 } else { -1.0 };
                r / (h + RELEVANCE_GUARD * s)
            })?;
            patch.relevance = Some(first_order(&ratio, hc, hk)?);
        }
    }
    report.correlate();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, Init, ModuleKind};

    fn affine() -> HookedModel {
        let g = GraphBuilder::new()
            .input("x")
            .module("a", ModuleKind::linear(3, 4, true))
            .module("b", ModuleKind::linear(4, 3, true))
            .module("c", ModuleKind::linear(3, 2, true))
            .output("y", "c")
            .build(Init::Uniform(-1.0, 1.0), 5)
            .unwrap();
        HookedModel::new(g)
    }

    fn pair() -> (TensorMap, TensorMap) {
        let c = TensorMap::with_batch(vec![2])
            .with("x", Tensor::matrix(&[&[0.5, -1.0, 2.0], &[0.1, 0.2, 0.3]]).unwrap())
            .unwrap();
        let k = TensorMap::with_batch(vec![2])
            .with("x", Tensor::matrix(&[&[-0.5, 1.0, 0.0], &[0.4, -0.2, 0.9]]).unwrap())
            .unwrap();
        (c, k)
    }

    #[test]
    fn gradient_mode_exact_on_affine() {
        let mut m = affine();
        let (c, k) = pair();
        let r = attribution_patch(&mut m, &c, &k, &["a", "b"], &Target::index("y", 1), &PatchMode::Gradient).unwrap();
        let a = r.activation_effects();
        let g = r.gradient_effects().unwrap();
        for (x, y) in a.iter().zip(&g) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
        assert!(r.r_activation_gradient.unwrap() > 0.999_999);
    }

    #[test]
    fn full_patch_restores_clean_metric() {
        let mut m = affine();
        let (c, k) = pair();
        let t = Target::index("y", 0);
        let patched = patched_metric(&mut m, &c, &k, &["a", "b", "c"], &t).unwrap();
        let r = activation_patch(&mut m, &c, &k, &["a"], &t).unwrap();
        assert_eq!(patched, r.metric_clean);
    }

    #[test]
    fn identical_runs_have_zero_effects() {
        let mut m = affine();
        let (c, _) = pair();
        let r = activation_patch(&mut m, &c, &c, &["a", "b"], &Target::index("y", 0)).unwrap();
        assert!(r.activation_effects().iter().all(|e| *e == 0.0));
    }
}
