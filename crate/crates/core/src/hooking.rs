//! Model wrapping, hook registration and the get/set intervention API.
//!
//! A [`HookedModel`] owns an ordered hook registry. Persistent hooks live
//! until deregistered; a [`RunContext`] adds context-scoped hooks (cache
//! captures from [`RunContext::get`], interventions from
//! [`RunContext::set`]) that are removed when the context ends, whether the
//! run succeeded, failed, or never happened.
//!
//! ```
//! use hookscope::graph::{GraphBuilder, Init, ModuleKind};
//! use hookscope::{HookedModel, Slot, Tensor, TensorMap};
//!
//! let graph = GraphBuilder::new()
//!     .input("x")
//!     .module("fc", ModuleKind::linear(2, 2, false))
//!     .module("act", ModuleKind::Relu)
//!     .output("y", "act")
//!     .build(Init::Uniform(-1.0, 1.0), 0)
//!     .unwrap();
//! let mut model = HookedModel::new(graph);
//! let x = TensorMap::with_batch(vec![1])
//!     .with("x", Tensor::matrix(&[&[1.0, -1.0]]).unwrap())
//!     .unwrap();
//!
//! let mut ctx = model.context().unwrap();
//! let hidden = ctx.get("fc", Slot::Output).unwrap();
//! ctx.set("act", Slot::Output, Tensor::matrix(&[&[0.0, 0.0]]).unwrap()).unwrap();
//! let out = ctx.run(&x).unwrap();
//! assert_eq!(out.outputs.get_tensor("y").unwrap().data(), &[0.0, 0.0]);
//! assert_eq!(hidden.value().unwrap().shape(), &[1, 2]);
//! ```

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::graph::{BackwardOptions, BackwardRule, ForwardView, Interceptor, ModelGraph, SeedSet};
use crate::tensor::Tensor;
use crate::tensormap::TensorMap;

/// Which payload at a module boundary a hook or proxy addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    /// Module inputs, before the module runs (forward-pre hook).
    Input,
    /// Module output, after the module runs (forward hook).
    Output,
    /// Gradient with respect to the module inputs (backward hook).
    GradInput,
    /// Gradient flowing into the module from downstream (backward hook).
    GradOutput,
}

impl Slot {
    pub fn key(self) -> &'static str {
        match self {
            Slot::Input => "input",
            Slot::Output => "output",
            Slot::GradInput => "grad_input",
            Slot::GradOutput => "grad_output",
        }
    }

    pub fn is_grad(self) -> bool {
        matches!(self, Slot::GradInput | Slot::GradOutput)
    }

    fn payload_key(self, i: usize) -> String {
        match self {
            Slot::Output | Slot::GradOutput => self.key().to_string(),
            Slot::Input | Slot::GradInput => i.to_string(),
        }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl std::str::FromStr for Slot {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(Slot::Input),
            "output" => Ok(Slot::Output),
            "grad_input" => Ok(Slot::GradInput),
            "grad_output" => Ok(Slot::GradOutput),
            other => Err(Error::InvalidArgument(format!("unknown slot {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scope {
    Persistent,
    Context,
}

/// General hook callback. The payload map is keyed `"output"` /
/// `"grad_output"` for single payloads and `"0"`, `"1"`, ... for module
/// inputs and their gradients. Returning a map replaces the payload; it
/// must carry the same keys and shapes.
pub type Callback = Box<dyn FnMut(&str, &TensorMap) -> Result<Option<TensorMap>> + Send>;

/// Transform of the primary payload tensor (first input, output, or
/// gradient).
pub type TensorFn = Box<dyn FnMut(&Tensor) -> Result<Tensor> + Send>;

enum Action {
    Callback(Callback),
    Map(TensorFn),
    Replace(Tensor),
    Capture(Option<Arc<OnceLock<Tensor>>>),
}

struct HookRecord {
    id: u64,
    site: String,
    slot: Slot,
    scope: Scope,
    action: Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HookHandle(u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeregisterStatus {
    Removed,
    /// The hook was not registered (already removed); nothing changed.
    NotRegistered,
}

/// Summary of one registered hook.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HookInfo {
    pub order: u64,
    pub site: String,
    pub slot: Slot,
    pub scope: Scope,
}

/// A pending handle on a value produced during a run.
#[derive(Debug, Clone)]
pub struct Proxy {
    site: String,
    slot: Slot,
    cell: Arc<OnceLock<Tensor>>,
}

impl Proxy {
    pub fn site(&self) -> &str {
        &self.site
    }

    pub fn slot(&self) -> Slot {
        self.slot
    }

    pub fn is_resolved(&self) -> bool {
        self.cell.get().is_some()
    }

    pub fn value(&self) -> Result<&Tensor> {
        self.cell
            .get()
            .ok_or_else(|| Error::ProxyPending { site: self.site.clone(), slot: self.slot.key().to_string() })
    }

    pub fn into_value(self) -> Result<Tensor> {
        self.value().cloned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RunState {
    Idle,
    Running,
}

/// A module graph plus a hook registry and a per-run cache.
pub struct HookedModel {
    graph: Arc<ModelGraph>,
    registry: Vec<HookRecord>,
    next_id: u64,
    cache: TensorMap,
    state: RunState,
}

impl fmt::Debug for HookedModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HookedModel")
            .field("modules", &self.graph.modules().len())
            .field("hooks", &self.hooks())
            .finish()
    }
}

impl HookedModel {
    pub fn new(graph: impl Into<Arc<ModelGraph>>) -> Self {
        HookedModel {
            graph: graph.into(),
            registry: Vec::new(),
            next_id: 0,
            cache: TensorMap::new(),
            state: RunState::Idle,
        }
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn shared_graph(&self) -> Arc<ModelGraph> {
        Arc::clone(&self.graph)
    }

    /// Values captured during the most recent run, keyed `<site>.<slot>`.
    pub fn cache(&self) -> &TensorMap {
        &self.cache
    }

    pub fn is_idle(&self) -> bool {
        self.state == RunState::Idle
    }

    pub fn hooks(&self) -> Vec<HookInfo> {
        self.registry
            .iter()
            .map(|r| HookInfo { order: r.id, site: r.site.clone(), slot: r.slot, scope: r.scope })
            .collect()
    }

    /// Stable digest of the registry contents, for restoration checks.
    pub fn registry_digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.hooks().hash(&mut h);
        h.finish()
    }

    fn check_site(&self, site: &str) -> Result<()> {
        if self.graph.has_site(site) {
            Ok(())
        } else {
            Err(Error::UnknownSite(site.to_string()))
        }
    }

    fn push(&mut self, site: &str, slot: Slot, scope: Scope, action: Action) -> Result<HookHandle> {
        self.check_site(site)?;
        let id = self.next_id;
        self.next_id += 1;
        self.registry.push(HookRecord { id, site: site.to_string(), slot, scope, action });
        Ok(HookHandle(id))
    }

    /// Registers a persistent callback hook.
    pub fn register(&mut self, site: &str, slot: Slot, callback: Callback) -> Result<HookHandle> {
        self.push(site, slot, Scope::Persistent, Action::Callback(callback))
    }

    /// Registers a persistent transform of the primary payload tensor.
    pub fn register_map(
        &mut self,
        site: &str,
        slot: Slot,
        f: impl FnMut(&Tensor) -> Result<Tensor> + Send + 'static,
    ) -> Result<HookHandle> {
        self.push(site, slot, Scope::Persistent, Action::Map(Box::new(f)))
    }

    /// Registers a persistent hook copying the payload into the cache.
    pub fn register_capture(&mut self, site: &str, slot: Slot) -> Result<HookHandle> {
        self.push(site, slot, Scope::Persistent, Action::Capture(None))
    }

    pub fn deregister(&mut self, handle: HookHandle) -> DeregisterStatus {
        match self.registry.iter().position(|r| r.id == handle.0) {
            Some(i) => {
                self.registry.remove(i);
                DeregisterStatus::Removed
            }
            None => DeregisterStatus::NotRegistered,
        }
    }

    /// Removes every hook of `scope`; returns how many were removed.
    pub fn deregister_scope(&mut self, scope: Scope) -> usize {
        let before = self.registry.len();
        self.registry.retain(|r| r.scope != scope);
        before - self.registry.len()
    }

    /// Opens a run context. Only one context can be active at a time.
    pub fn context(&mut self) -> Result<RunContext<'_>> {
        if self.state != RunState::Idle {
            return Err(Error::AlreadyRunning);
        }
        Ok(RunContext {
            model: self,
            proxies: Vec::new(),
            stop: None,
            seeds: None,
            options: BackwardOptions::default(),
            rule: None,
        })
    }

    /// Plain forward pass through the persistent hooks.
    pub fn forward(&mut self, inputs: &TensorMap) -> Result<TensorMap> {
        Ok(self.context()?.run(inputs)?.outputs)
    }
}

/// Builds backward seeds once the forward values are known.
pub type SeedFn<'a> = Box<dyn FnOnce(&dyn ForwardView) -> Result<Vec<SeedSet>> + 'a>;

/// Result of [`RunContext::run`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub outputs: TensorMap,
    /// One gradient map per seed set; empty when backward was not enabled.
    pub grads: Vec<TensorMap>,
}

impl RunOutput {
    /// Gradients of the first (usually only) seed set.
    pub fn grad(&self) -> Result<&TensorMap> {
        self.grads.first().ok_or_else(|| Error::InvalidArgument("backward was not enabled for this run".into()))
    }
}

/// A single prepared run over a [`HookedModel`].
///
/// Context-scoped hooks registered through it are removed when it is
/// dropped, which [`run`](Self::run) always does on exit.
pub struct RunContext<'m> {
    model: &'m mut HookedModel,
    proxies: Vec<Proxy>,
    stop: Option<String>,
    seeds: Option<SeedFn<'m>>,
    options: BackwardOptions,
    rule: Option<Box<dyn BackwardRule + 'm>>,
}

impl<'m> RunContext<'m> {
    pub fn graph(&self) -> &ModelGraph {
        &self.model.graph
    }

    /// Enables a reverse pass after the forward pass, seeded by `seeds`.
    pub fn backward(&mut self, seeds: impl FnOnce(&dyn ForwardView) -> Result<Vec<SeedSet>> + 'm) {
        self.seeds = Some(Box::new(seeds));
    }

    /// Also collect parameter gradients in the reverse pass.
    pub fn with_param_grads(&mut self, on: bool) {
        self.options.param_grads = on;
    }

    /// Replaces gradient kernels during the reverse pass.
    pub fn rule(&mut self, rule: impl BackwardRule + 'm) {
        self.rule = Some(Box::new(rule));
    }

    /// Requests the value at `site`/`slot`; resolved once the run finishes.
    pub fn get(&mut self, site: &str, slot: Slot) -> Result<Proxy> {
        self.model.check_site(site)?;
        if slot.is_grad() && self.seeds.is_none() {
            return Err(Error::BackwardNotEnabled(site.to_string()));
        }
        let cell = Arc::new(OnceLock::new());
        self.model.push(site, slot, Scope::Context, Action::Capture(Some(Arc::clone(&cell))))?;
        let proxy = Proxy { site: site.to_string(), slot, cell };
        self.proxies.push(proxy.clone());
        Ok(proxy)
    }

    /// Replaces the payload at `site`/`slot` with a fixed tensor.
    pub fn set(&mut self, site: &str, slot: Slot, value: Tensor) -> Result<()> {
        self.model.push(site, slot, Scope::Context, Action::Replace(value))?;
        Ok(())
    }

    /// Replaces the payload at `site`/`slot` with `f(payload)`.
    pub fn set_with(
        &mut self,
        site: &str,
        slot: Slot,
        f: impl FnMut(&Tensor) -> Result<Tensor> + Send + 'static,
    ) -> Result<()> {
        self.model.push(site, slot, Scope::Context, Action::Map(Box::new(f)))?;
        Ok(())
    }

    /// Registers a context-scoped general callback.
    pub fn hook(&mut self, site: &str, slot: Slot, callback: Callback) -> Result<()> {
        self.model.push(site, slot, Scope::Context, Action::Callback(callback))?;
        Ok(())
    }

    /// Halts execution right after `site` runs.
    pub fn stop_at(&mut self, site: &str) -> Result<()> {
        self.model.check_site(site)?;
        self.stop = Some(site.to_string());
        Ok(())
    }

    /// Runs forward (and backward when enabled), fires every registered
    /// hook, resolves the proxies and restores the registry.
    pub fn run(mut self, inputs: &TensorMap) -> Result<RunOutput> {
        self.model.state = RunState::Running;
        self.model.cache = TensorMap::new();
        let graph = Arc::clone(&self.model.graph);
        let seeds = self.seeds.take();
        let mut rule = self.rule.take();
        let mut dispatch =
            Dispatch { registry: &mut self.model.registry, cache: &mut self.model.cache, stop: self.stop.as_deref() };
        let pass = graph.forward_with(inputs, seeds.is_some(), &mut dispatch)?;
        let mut grads = Vec::new();
        if let (Some(seed_fn), Some(mut tape)) = (seeds, pass.tape) {
            let sets = seed_fn(&tape)?;
            let fan = sets.len();
            grads = tape.backward_with(
                &sets,
                self.options,
                &mut dispatch,
                rule.as_deref_mut().map(|r| r as &mut dyn BackwardRule),
            )?;
            // sites the reverse pass never reached carry zero gradient
            for p in &self.proxies {
                if p.slot.is_grad() && !p.is_resolved() {
                    let base = match p.slot {
                        Slot::GradOutput => tape.site_output(&p.site),
                        _ => tape.site_input(&p.site),
                    };
                    if let Some(b) = base {
                        let mut shape = b.shape().to_vec();
                        shape[0] *= fan;
                        let z = Tensor::zeros(shape);
                        let _ = dispatch.cache.put(cache_path(&p.site, p.slot).as_str(), z.clone());
                        let _ = p.cell.set(z);
                    }
                }
            }
        }
        if let Some(p) = self.proxies.iter().find(|p| !p.is_resolved()) {
            return Err(Error::ProxyPending { site: p.site.clone(), slot: p.slot.key().to_string() });
        }
        Ok(RunOutput { outputs: pass.outputs, grads })
    }
}

impl Drop for RunContext<'_> {
    fn drop(&mut self) {
        self.model.deregister_scope(Scope::Context);
        self.model.state = RunState::Idle;
    }
}

fn cache_path(site: &str, slot: Slot) -> String {
    format!("{site}.{}", slot.key())
}

struct Dispatch<'a> {
    registry: &'a mut Vec<HookRecord>,
    cache: &'a mut TensorMap,
    stop: Option<&'a str>,
}

impl Dispatch<'_> {
    fn fire(&mut self, site: &str, slot: Slot, payload: &mut [Tensor]) -> Result<()> {
        for rec in self.registry.iter_mut() {
            if rec.site != site || rec.slot != slot {
                continue;
            }
            match &mut rec.action {
                Action::Capture(cell) => {
                    let v = payload[0].clone();
                    self.cache.put(cache_path(site, slot).as_str(), v.clone())?;
                    if let Some(cell) = cell {
                        let _ = cell.set(v);
                    }
                }
                Action::Replace(t) => {
                    check_same_shape(site, slot, &payload[0], t)?;
                    payload[0] = t.clone();
                }
                Action::Map(f) => {
                    let new = f(&payload[0]).map_err(|e| callback_error(site, e))?;
                    check_same_shape(site, slot, &payload[0], &new)?;
                    payload[0] = new;
                }
                Action::Callback(cb) => {
                    let mut map = TensorMap::new();
                    for (i, t) in payload.iter().enumerate() {
                        map.put(slot.payload_key(i).as_str(), t.clone())?;
                    }
                    if let Some(new) = cb(site, &map).map_err(|e| callback_error(site, e))? {
                        if new.len() != payload.len() {
                            return Err(Error::Shape(format!(
                                "{site}.{slot}: replacement has {} entries, payload has {}",
                                new.len(),
                                payload.len()
                            )));
                        }
                        for (i, old) in payload.iter_mut().enumerate() {
                            let t = new.get_tensor(slot.payload_key(i).as_str())?;
                            check_same_shape(site, slot, old, t)?;
                            *old = t.clone();
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn fire_one(&mut self, site: &str, slot: Slot, value: &mut Tensor) -> Result<()> {
        let mut v = vec![std::mem::replace(value, Tensor::scalar(0.0))];
        let r = self.fire(site, slot, &mut v);
        *value = v.pop().expect("single payload");
        r
    }
}

fn check_same_shape(site: &str, slot: Slot, old: &Tensor, new: &Tensor) -> Result<()> {
    if old.shape() != new.shape() {
        return Err(Error::Shape(format!(
            "{site}.{slot}: replacement shape {:?} does not match payload {:?}",
            new.shape(),
            old.shape()
        )));
    }
    Ok(())
}

fn callback_error(site: &str, e: Error) -> Error {
    match e {
        Error::Callback { .. } => e,
        other => Error::Callback { site: site.to_string(), message: other.to_string() },
    }
}

impl Interceptor for Dispatch<'_> {
    fn forward_pre(&mut self, site: &str, inputs: &mut Vec<Tensor>) -> Result<()> {
        self.fire(site, Slot::Input, inputs)
    }

    fn forward(&mut self, site: &str, output: &mut Tensor) -> Result<()> {
        self.fire_one(site, Slot::Output, output)
    }

    fn stop_after(&self, site: &str) -> bool {
        self.stop == Some(site)
    }

    fn backward_output(&mut self, site: &str, grad: &mut Tensor) -> Result<()> {
        self.fire_one(site, Slot::GradOutput, grad)
    }

    fn backward_input(&mut self, site: &str, grads: &mut Vec<Tensor>) -> Result<()> {
        self.fire(site, Slot::GradInput, grads)
    }
}

/// Seeds that select `index` within every row of output `key`.
pub fn one_hot_seed(view: &dyn ForwardView, key: &str, index: usize) -> Result<SeedSet> {
    let y = view.output(key).ok_or_else(|| Error::Seed(format!("output {key:?} was not computed")))?;
    let per = y.row_len();
    if index >= per {
        return Err(Error::InvalidArgument(format!(
            "target index {index} out of range for output {key:?} of shape {:?}",
            y.shape()
        )));
    }
    let mut data = vec![0.0; y.numel()];
    for r in 0..y.rows() {
        data[r * per + index] = 1.0;
    }
    Ok(vec![(crate::graph::SeedPoint::Output(key.to_string()), Tensor::new(y.shape().to_vec(), data)?)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, Init, ModuleKind, SeedPoint};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    fn chain() -> ModelGraph {
        GraphBuilder::new()
            .input("x")
            .module("l1", ModuleKind::linear(3, 4, true))
            .module("a1", ModuleKind::Tanh)
            .module("l2", ModuleKind::linear(4, 2, true))
            .output("y", "l2")
            .build(Init::Uniform(-1.0, 1.0), 11)
            .unwrap()
    }

    fn input() -> TensorMap {
        TensorMap::with_batch(vec![2])
            .with("x", Tensor::matrix(&[&[0.1, 0.2, -0.3], &[1.0, -0.5, 0.25]]).unwrap())
            .unwrap()
    }

    #[test]
    fn transparent_wrap() {
        let g = chain();
        let (plain, _) = g.forward(&input(), false).unwrap();
        let mut m = HookedModel::new(g);
        let wrapped = m.forward(&input()).unwrap();
        assert!(plain.bitwise_eq(&wrapped));
    }

    #[test]
    fn get_matches_persistent_capture() {
        let mut m = HookedModel::new(chain());
        m.register_capture("l1", Slot::Output).unwrap();
        let mut ctx = m.context().unwrap();
        let p = ctx.get("l1", Slot::Output).unwrap();
        let q = ctx.get("l1", Slot::Output).unwrap();
        assert!(matches!(p.value(), Err(Error::ProxyPending { .. })));
        ctx.run(&input()).unwrap();
        let cached = m.cache().get_tensor("l1.output").unwrap();
        assert!(p.value().unwrap().bitwise_eq(cached));
        assert!(p.value().unwrap().bitwise_eq(q.value().unwrap()));
    }

    #[test]
    fn unknown_site_and_grad_without_backward() {
        let mut m = HookedModel::new(chain());
        let mut ctx = m.context().unwrap();
        assert!(matches!(ctx.get("nope", Slot::Output), Err(Error::UnknownSite(_))));
        assert!(matches!(ctx.get("l1", Slot::GradOutput), Err(Error::BackwardNotEnabled(_))));
        assert!(matches!(ctx.stop_at("nope"), Err(Error::UnknownSite(_))));
    }

    #[test]
    fn identity_set_is_noop_and_callbacks_restore() {
        let mut m = HookedModel::new(chain());
        let base = m.forward(&input()).unwrap();
        let mut ctx = m.context().unwrap();
        ctx.set_with("a1", Slot::Output, |t| Ok(t.clone())).unwrap();
        let out = ctx.run(&input()).unwrap();
        assert!(out.outputs.bitwise_eq(&base));

        let digest = m.registry_digest();
        let mut ctx = m.context().unwrap();
        ctx.set_with("a1", Slot::Output, |_| Err(Error::InvalidArgument("boom".into()))).unwrap();
        assert!(matches!(ctx.run(&input()), Err(Error::Callback { .. })));
        assert_eq!(m.registry_digest(), digest);
        assert!(m.is_idle());
    }

    #[test]
    fn fire_time_shape_mismatch_aborts() {
        let mut m = HookedModel::new(chain());
        let digest = m.registry_digest();
        let mut ctx = m.context().unwrap();
        ctx.set("l1", Slot::Output, Tensor::zeros(vec![2, 3])).unwrap();
        assert!(matches!(ctx.run(&input()), Err(Error::Shape(_))));
        assert_eq!(m.registry_digest(), digest);
    }

    #[test]
    fn zero_grad_output_zeroes_input_grads() {
        let mut m = HookedModel::new(chain());
        let mut ctx = m.context().unwrap();
        ctx.backward(|v| Ok(vec![one_hot_seed(v, "y", 0)?]));
        ctx.set_with("l2", Slot::GradOutput, |g| Ok(g.scale(0.0))).unwrap();
        let out = ctx.run(&input()).unwrap();
        assert_eq!(out.grad().unwrap().get_tensor("x").unwrap().max_abs(), 0.0);
    }

    #[test]
    fn set_then_get_ordering() {
        let mut m = HookedModel::new(chain());
        let c = Tensor::full(vec![2, 4], 0.5);
        let mut ctx = m.context().unwrap();
        let before = ctx.get("a1", Slot::Output).unwrap();
        ctx.set("a1", Slot::Output, c.clone()).unwrap();
        let after = ctx.get("a1", Slot::Output).unwrap();
        ctx.run(&input()).unwrap();
        assert!(after.value().unwrap().bitwise_eq(&c));
        assert!(!before.value().unwrap().bitwise_eq(&c));
    }

    #[test]
    fn callbacks_fire_in_registration_order() {
        let mut m = HookedModel::new(chain());
        let log = Arc::new(Mutex::new(Vec::new()));
        for i in 0..3 {
            let log = Arc::clone(&log);
            m.register(
                "l1",
                Slot::Output,
                Box::new(move |_, _| {
                    log.lock().unwrap().push(i);
                    Ok(None)
                }),
            )
            .unwrap();
        }
        m.forward(&input()).unwrap();
        assert_eq!(*log.lock().unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn stop_at_halts_downstream() {
        let mut m = HookedModel::new(chain());
        let count = Arc::new(AtomicUsize::new(0));
        let c = Arc::clone(&count);
        m.register(
            "l2",
            Slot::Input,
            Box::new(move |_, _| {
                c.fetch_add(1, Ordering::SeqCst);
                Ok(None)
            }),
        )
        .unwrap();
        let mut ctx = m.context().unwrap();
        ctx.stop_at("a1").unwrap();
        let out = ctx.run(&input()).unwrap();
        assert!(out.outputs.is_empty());
        assert_eq!(count.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn deregister_reports_status() {
        let mut m = HookedModel::new(chain());
        let h = m.register_capture("l1", Slot::Output).unwrap();
        assert_eq!(m.deregister(h), DeregisterStatus::Removed);
        assert_eq!(m.deregister(h), DeregisterStatus::NotRegistered);
        m.forward(&input()).unwrap();
        assert!(m.cache().is_empty());
    }

    #[test]
    fn unreached_grad_proxy_is_zero() {
        let g = GraphBuilder::new()
            .input("x")
            .module("trunk", ModuleKind::linear(3, 2, true))
            .module_from("a", ModuleKind::linear(2, 1, true), &["trunk"])
            .module_from("b", ModuleKind::linear(2, 1, true), &["trunk"])
            .output("pa", "a")
            .output("pb", "b")
            .build(Init::Uniform(-1.0, 1.0), 2)
            .unwrap();
        let mut m = HookedModel::new(g);
        let mut ctx = m.context().unwrap();
        ctx.backward(|v| {
            let y = v.output("pa").unwrap();
            Ok(vec![vec![(SeedPoint::Output("pa".into()), Tensor::full(y.shape().to_vec(), 1.0))]])
        });
        let gb = ctx.get("b", Slot::GradOutput).unwrap();
        ctx.run(&input()).unwrap();
        assert_eq!(gb.value().unwrap().max_abs(), 0.0);
    }
}
