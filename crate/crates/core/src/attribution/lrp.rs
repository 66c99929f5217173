//! Layer-wise relevance propagation as a backward rule.
//!
//! Relevance travels through the reverse sweep in place of gradients.
//! Linear and convolutional modules redistribute it with the rule assigned
//! to them; elementwise activations pass it through unchanged, average
//! pooling and residual sums split it in proportion to their inputs. Bias
//! terms enter the denominators and keep the share they absorb.

use std::str::FromStr;
use std::sync::{Arc, Mutex};

use glob::Pattern;

use crate::error::{Error, Result};
use crate::graph::kernels::ConvGeom;
use crate::graph::{BackwardRule, ModelGraph, Module, ModuleKind, SeedPoint};
use crate::hooking::{HookedModel, Slot};
use crate::tensor::Tensor;
use crate::tensormap::TensorMap;

use super::{model_inputs, AttributionConfig, AttributionResult, Selector};

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_GAMMA: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RuleKind {
    Lrp0,
    Epsilon(f64),
    ZPlus,
    Gamma(f64),
    Flat,
    WSquare,
}

impl std::fmt::Display for RuleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RuleKind::Lrp0 => write!(f, "lrp0"),
            RuleKind::Epsilon(e) => write!(f, "epsilon({e})"),
            RuleKind::ZPlus => write!(f, "zplus"),
            RuleKind::Gamma(g) => write!(f, "gamma({g})"),
            RuleKind::Flat => write!(f, "flat"),
            RuleKind::WSquare => write!(f, "wsquare"),
        }
    }
}

impl FromStr for RuleKind {
    type Err = Error;

    /// `lrp0`, `epsilon(0.25)`, `zplus`, `gamma(0.25)`, `flat`, `wsquare`;
    /// bare `epsilon` and `gamma` take the defaults.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let arg = |name: &str| -> Option<Result<f64>> {
            let inner = s.strip_prefix(name)?.strip_prefix('(')?.strip_suffix(')')?;
            Some(
                inner.trim().parse::<f64>().map_err(|_| Error::InvalidArgument(format!("bad rule parameter in {s:?}"))),
            )
        };
        match s {
            "lrp0" => return Ok(RuleKind::Lrp0),
            "zplus" => return Ok(RuleKind::ZPlus),
            "flat" => return Ok(RuleKind::Flat),
            "wsquare" => return Ok(RuleKind::WSquare),
            "epsilon" => return Ok(RuleKind::Epsilon(DEFAULT_EPSILON)),
            "gamma" => return Ok(RuleKind::Gamma(DEFAULT_GAMMA)),
            _ => {}
        }
        if let Some(e) = arg("epsilon") {
            let e = e?;
            if !(e > 0.0) {
                return Err(Error::InvalidArgument(format!("epsilon must be positive, got {e}")));
            }
            return Ok(RuleKind::Epsilon(e));
        }
        if let Some(g) = arg("gamma") {
            let g = g?;
            if !(g >= 0.0) {
                return Err(Error::InvalidArgument(format!("gamma must be non-negative, got {g}")));
            }
            return Ok(RuleKind::Gamma(g));
        }
        Err(Error::InvalidArgument(format!("unknown LRP rule {s:?}")))
    }
}

/// Rule assignment by module-name glob; the first matching pattern wins.
#[derive(Debug, Clone, Default)]
pub struct LrpRules {
    assignments: Vec<(Pattern, RuleKind)>,
}

impl LrpRules {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every layer under one rule.
    pub fn uniform(kind: RuleKind) -> Self {
        Self::new().assign("*", kind).expect("valid pattern")
    }

    pub fn assign(mut self, pattern: &str, kind: RuleKind) -> Result<Self> {
        let p = Pattern::new(pattern)
            .map_err(|e| Error::InvalidArgument(format!("bad module pattern {pattern:?}: {e}")))?;
        self.assignments.push((p, kind));
        Ok(self)
    }

    pub fn rule_for(&self, module: &str) -> Option<RuleKind> {
        self.assignments.iter().find(|(p, _)| p.matches(module)).map(|(_, k)| *k)
    }

    /// Fails on the first linear or convolutional module without a rule.
    pub fn validate(&self, graph: &ModelGraph) -> Result<()> {
        for m in graph.modules() {
            if m.kind().is_parameterised() && self.rule_for(m.name()).is_none() {
                return Err(Error::UncoveredModule(m.name().to_string()));
            }
        }
        Ok(())
    }
}

/// The backward rule that carries relevance instead of gradient.
pub struct LrpRule {
    rules: LrpRules,
}

impl LrpRule {
    pub fn new(rules: LrpRules) -> Self {
        LrpRule { rules }
    }
}

struct Affine<'a> {
    site: &'a str,
    rule: RuleKind,
    weight: &'a [f64],
    bias: Option<&'a [f64]>,
    outs: usize,
    patch: usize,
    positions: usize,
}

impl Affine<'_> {
    /// Relevance over one sample's patch matrix `[positions, patch]`, given
    /// the output relevance laid out `[outs, positions]`.
    fn redistribute(&self, cols: &[f64], valid: &dyn Fn(usize, usize) -> bool, rel: &[f64]) -> Result<Vec<f64>> {
        let (p_n, l_n) = (self.patch, self.positions);
        let mut out = vec![0.0; l_n * p_n];
        let mut z = vec![0.0; p_n];
        for o in 0..self.outs {
            let w = &self.weight[o * p_n..(o + 1) * p_n];
            let b = self.bias.map_or(0.0, |b| b[o]);
            for l in 0..l_n {
                let r = rel[o * l_n + l];
                if r == 0.0 {
                    continue;
                }
                let x = &cols[l * p_n..(l + 1) * p_n];
                let mut denom = match self.rule {
                    RuleKind::Lrp0 | RuleKind::Epsilon(_) => {
                        for p in 0..p_n {
                            z[p] = x[p] * w[p];
                        }
                        b
                    }
                    RuleKind::ZPlus => {
                        for p in 0..p_n {
                            z[p] = (x[p] * w[p]).max(0.0);
                        }
                        b.max(0.0)
                    }
                    RuleKind::Gamma(g) => {
                        for p in 0..p_n {
                            z[p] = x[p] * (w[p] + g * w[p].max(0.0));
                        }
                        b + g * b.max(0.0)
                    }
                    RuleKind::Flat => {
                        for p in 0..p_n {
                            z[p] = if valid(l, p) { 1.0 } else { 0.0 };
                        }
                        0.0
                    }
                    RuleKind::WSquare => {
                        for p in 0..p_n {
                            z[p] = if valid(l, p) { w[p] * w[p] } else { 0.0 };
                        }
                        0.0
                    }
                };
                denom += z.iter().sum::<f64>();
                match self.rule {
                    RuleKind::Epsilon(e) => denom += if denom >= 0.0 { e } else { -e },
                    RuleKind::Lrp0 if denom == 0.0 => {
                        return Err(Error::ZeroDenominator { site: self.site.to_string(), unit: o * l_n + l })
                    }
                    _ if denom == 0.0 => continue,
                    _ => {}
                }
                let s = r / denom;
                for p in 0..p_n {
                    out[l * p_n + p] += z[p] * s;
                }
            }
        }
        Ok(out)
    }
}

impl BackwardRule for LrpRule {
    fn propagate(
        &mut self,
        module: &Module,
        inputs: &[Tensor],
        output: &Tensor,
        grad: &Tensor,
    ) -> Result<Option<Vec<Tensor>>> {
        let x = &inputs[0];
        let n = x.rows();
        let rows = grad.rows();
        let name = module.name();
        match module.kind() {
            ModuleKind::Linear { in_features, out_features, .. } => {
                let rule = self.rules.rule_for(name).ok_or_else(|| Error::UncoveredModule(name.to_string()))?;
                let w = module.weight().expect("linear has weight");
                let aff = Affine {
                    site: name,
                    rule,
                    weight: w.data(),
                    bias: module.bias().map(|b| b.data()),
                    outs: *out_features,
                    patch: *in_features,
                    positions: 1,
                };
                let mut data = Vec::with_capacity(rows * in_features);
                for r in 0..rows {
                    data.extend(aff.redistribute(x.row(r % n), &|_, _| true, grad.row(r))?);
                }
                let mut shape = x.shape().to_vec();
                shape[0] = rows;
                Ok(Some(vec![Tensor::new(shape, data)?]))
            }
            ModuleKind::Conv2d { in_channels, out_channels, kernel, stride, padding, .. } => {
                let rule = self.rules.rule_for(name).ok_or_else(|| Error::UncoveredModule(name.to_string()))?;
                let geom = ConvGeom::new(x.shape(), *in_channels, *kernel, *stride, *padding)?;
                let w = module.weight().expect("conv has weight");
                let aff = Affine {
                    site: name,
                    rule,
                    weight: w.data(),
                    bias: module.bias().map(|b| b.data()),
                    outs: *out_channels,
                    patch: geom.patch_len(),
                    positions: geom.positions(),
                };
                let per = x.row_len();
                let mut data = vec![0.0; rows * per];
                let valid = |l: usize, p: usize| geom.source(l, p).is_some();
                for r in 0..rows {
                    let cols = geom.im2col(x.row(r % n));
                    let rc = aff.redistribute(&cols, &valid, grad.row(r))?;
                    geom.col2im(&rc, &mut data[r * per..(r + 1) * per]);
                }
                let mut shape = x.shape().to_vec();
                shape[0] = rows;
                Ok(Some(vec![Tensor::new(shape, data)?]))
            }
            ModuleKind::Relu | ModuleKind::Tanh | ModuleKind::Sigmoid | ModuleKind::Softmax { .. } => {
                Ok(Some(vec![grad.clone()]))
            }
            ModuleKind::Flatten => Ok(None),
            ModuleKind::AvgPool2d { kernel } => {
                let k = *kernel;
                let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
                let (ho, wo) = (output.shape()[2], output.shape()[3]);
                let per = c * h * w;
                let mut data = vec![0.0; rows * per];
                for r in 0..rows {
                    let xs = x.row(r % n);
                    let rel = grad.row(r);
                    let dst = &mut data[r * per..(r + 1) * per];
                    for ch in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let rj = rel[(ch * ho + oy) * wo + ox];
                                let idx = |dy: usize, dx: usize| (ch * h + oy * k + dy) * w + ox * k + dx;
                                let mut s = 0.0;
                                for dy in 0..k {
                                    for dx in 0..k {
                                        s += xs[idx(dy, dx)];
                                    }
                                }
                                for dy in 0..k {
                                    for dx in 0..k {
                                        let i = idx(dy, dx);
                                        dst[i] = if s != 0.0 { xs[i] / s * rj } else { rj / (k * k) as f64 };
                                    }
                                }
                            }
                        }
                    }
                }
                let mut shape = x.shape().to_vec();
                shape[0] = rows;
                Ok(Some(vec![Tensor::new(shape, data)?]))
            }
            ModuleKind::Add => {
                let (a, b) = (&inputs[0], &inputs[1]);
                let per = a.row_len();
                let mut ra = Vec::with_capacity(rows * per);
                let mut rb = Vec::with_capacity(rows * per);
                for r in 0..rows {
                    let (av, bv, rel) = (a.row(r % n), b.row(r % n), grad.row(r));
                    for i in 0..per {
                        let s = av[i] + bv[i];
                        if s != 0.0 {
                            ra.push(av[i] / s * rel[i]);
                            rb.push(bv[i] / s * rel[i]);
                        } else {
                            ra.push(rel[i] / 2.0);
                            rb.push(rel[i] / 2.0);
                        }
                    }
                }
                Ok(Some(vec![Tensor::new(grad.shape().to_vec(), ra)?, Tensor::new(grad.shape().to_vec(), rb)?]))
            }
        }
    }
}

/// Starting relevance at the target output.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum RelevanceInit {
    /// The selected logit (or the seed-weighted output).
    #[default]
    Logit,
    /// The selected softmax probability of the output row.
    Probability,
}

/// Which part of the relevance at a site to keep.
#[derive(Debug, Clone, PartialEq)]
pub enum ConceptSelector {
    /// Channels along axis 1.
    Channels(Vec<usize>),
    /// Projection onto a direction over the flattened row.
    Direction(Tensor),
}

/// Restricts relevance to a concept at one site before it propagates
/// further towards the input.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptCondition {
    pub site: String,
    pub selector: ConceptSelector,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LrpOptions {
    pub init: RelevanceInit,
    /// Record relevance entering and leaving every module.
    pub audit: bool,
}

/// Relevance at a module's output and at each of its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRelevance {
    pub site: String,
    pub entering: Tensor,
    pub leaving: Vec<Tensor>,
}

impl LayerRelevance {
    pub fn entering_total(&self) -> f64 {
        self.entering.sum()
    }

    pub fn leaving_total(&self) -> f64 {
        self.leaving.iter().map(Tensor::sum).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrpOutput {
    pub result: AttributionResult,
    /// Relevance placed on the target output.
    pub initial: Tensor,
    /// In reverse execution order; empty unless auditing.
    pub layers: Vec<LayerRelevance>,
}

/// LRP relevance at the model inputs.
pub fn lrp(
    model: &mut HookedModel,
    inputs: &TensorMap,
    cfg: &AttributionConfig,
    rules: &LrpRules,
    condition: Option<&ConceptCondition>,
) -> Result<AttributionResult> {
    Ok(lrp_with(model, inputs, cfg, rules, condition, LrpOptions::default())?.result)
}

pub(crate) fn initial_relevance(cfg: &AttributionConfig, init: RelevanceInit, y: &Tensor) -> Result<Tensor> {
    let per = y.row_len();
    let w = cfg.target.row_weights(per)?;
    let mut data = Vec::with_capacity(y.numel());
    for r in 0..y.rows() {
        let row = y.row(r);
        match init {
            RelevanceInit::Logit => data.extend(row.iter().zip(&w).map(|(a, b)| a * b)),
            RelevanceInit::Probability => {
                if !matches!(cfg.target.selector, Selector::Index(_)) {
                    return Err(Error::InvalidArgument("probability initialisation needs an index target".into()));
                }
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                data.extend(e.iter().zip(&w).map(|(a, b)| a / s * b));
            }
        }
    }
    Tensor::new(y.shape().to_vec(), data)
}

fn condition_fn(sel: &ConceptSelector) -> Result<Box<dyn FnMut(&Tensor) -> Result<Tensor> + Send>> {
    match sel.clone() {
        ConceptSelector::Channels(chs) => Ok(Box::new(move |r: &Tensor| {
            if r.ndim() < 2 {
                return Err(Error::Shape("channel conditioning needs a channel axis".into()));
            }
            let c = r.shape()[1];
            if let Some(bad) = chs.iter().find(|&&ch| ch >= c) {
                return Err(Error::InvalidArgument(format!("channel {bad} out of range for {c} channels")));
            }
            let inner: usize = r.shape()[2..].iter().product();
            let mut out = r.clone();
            out.update(|d| {
                for (i, v) in d.iter_mut().enumerate() {
                    if !chs.contains(&((i / inner) % c)) {
                        *v = 0.0;
                    }
                }
            });
            Ok(out)
        })),
        ConceptSelector::Direction(v) => {
            let norm = v.norm();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::InvalidArgument("concept direction must be non-zero".into()));
            }
            let u: Vec<f64> = v.data().iter().map(|x| x / norm).collect();
            Ok(Box::new(move |r: &Tensor| {
                let per = r.row_len();
                if per != u.len() {
                    return Err(Error::Shape(format!(
                        "concept direction has {} values, relevance rows have {per}",
                        u.len()
                    )));
                }
                let mut out = r.clone();
                out.update(|d| {
                    for row in d.chunks_mut(per) {
                        let dot: f64 = row.iter().zip(&u).map(|(a, b)| a * b).sum();
                        for (x, ui) in row.iter_mut().zip(&u) {
                            *x = dot * ui;
                        }
                    }
                });
                Ok(out)
            }))
        }
    }
}

type AuditLog = Arc<Mutex<Vec<(String, Slot, Vec<Tensor>)>>>;

/// LRP with initialisation options, optional concept conditioning and an
/// optional per-layer audit of relevance flow.
pub fn lrp_with(
    model: &mut HookedModel,
    inputs: &TensorMap,
    cfg: &AttributionConfig,
    rules: &LrpRules,
    condition: Option<&ConceptCondition>,
    opts: LrpOptions,
) -> Result<LrpOutput> {
    rules.validate(model.graph())?;
    let x = model_inputs(model.graph(), inputs)?;
    let n = x.batch_shape()[0];
    let sites: Vec<String> =
        model.graph().execution_order().iter().map(|&i| model.graph().modules()[i].name().to_string()).collect();
    let key = cfg.target.output.clone();
    let initial: Arc<Mutex<Option<Tensor>>> = Arc::default();
    let log: AuditLog = Arc::default();

    let mut ctx = model.context()?;
    {
        let (cfg, initial) = (cfg.clone(), Arc::clone(&initial));
        ctx.backward(move |v| {
            let y = v.output(&key).ok_or_else(|| Error::Seed(format!("output {key:?} was not computed")))?;
            let r = initial_relevance(&cfg, opts.init, y)?;
            *initial.lock().expect("unpoisoned") = Some(r.clone());
            Ok(vec![vec![(SeedPoint::Output(key.clone()), r)]])
        });
    }
    ctx.rule(LrpRule::new(rules.clone()));
    if let Some(c) = condition {
        ctx.set_with(&c.site, Slot::GradOutput, condition_fn(&c.selector)?)?;
    }
    if opts.audit {
        for site in &sites {
            for slot in [Slot::GradOutput, Slot::GradInput] {
                let log = Arc::clone(&log);
                ctx.hook(
                    site,
                    slot,
                    Box::new(move |s: &str, payload: &TensorMap| {
                        let ts = payload.flatten_keys().into_values().collect();
                        log.lock().expect("unpoisoned").push((s.to_string(), slot, ts));
                        Ok(None)
                    }),
                )?;
            }
        }
    }
    let mut out = ctx.run(&x)?;
    let rel = out.grads.remove(0).rebatch(vec![n])?;
    let initial = initial.lock().expect("unpoisoned").take().expect("seed was built");

    let mut layers: Vec<LayerRelevance> = Vec::new();
    for (site, slot, ts) in log.lock().expect("unpoisoned").drain(..) {
        match slot {
            Slot::GradOutput => layers.push(LayerRelevance {
                site,
                entering: ts.into_iter().next().expect("one payload"),
                leaving: Vec::new(),
            }),
            _ => {
                if let Some(l) = layers.iter_mut().rev().find(|l| l.site == site) {
                    l.leaving = ts;
                }
            }
        }
    }
    Ok(LrpOutput {
        result: AttributionResult {
            attributions: rel,
            method: "lrp".into(),
            config_digest: cfg.digest(&format!(
                "lrp:{:?}:{:?}:{:?}",
                rules.assignments.iter().map(|(p, k)| format!("{}={k}", p.as_str())).collect::<Vec<_>>(),
                condition,
                opts.init
            )),
        },
        initial,
        layers,
    })
}
