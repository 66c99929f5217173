//! Named module graphs with hook points at every module boundary.
//!
//! A [`ModelGraph`] is an ordered list of [`Module`]s, each reading from
//! model inputs or from other modules (its *sources*). Modules are
//! addressed by their dot-joined path (`"trunk.0"`), which doubles as the
//! key path of their parameters in [`ModelGraph::parameters`].

mod fd;
mod init;
pub(crate) mod kernels;
mod tape;

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};
use crate::tensormap::{KeyPath, TensorMap};

pub use fd::finite_difference_gradient;
pub use init::Init;
pub use tape::{BackwardOptions, ForwardView, SeedPoint, SeedSet, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModuleKind {
    Linear {
        #[serde(rename = "in")]
        in_features: usize,
        #[serde(rename = "out")]
        out_features: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Conv2d {
        #[serde(rename = "cin")]
        in_channels: usize,
        #[serde(rename = "cout")]
        out_channels: usize,
        #[serde(rename = "k")]
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default, rename = "pad")]
        padding: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Relu,
    Tanh,
    Sigmoid,
    Softmax {
        #[serde(default = "last_axis")]
        axis: isize,
    },
    Flatten,
    #[serde(rename = "avgpool2d")]
    AvgPool2d {
        #[serde(rename = "k")]
        kernel: usize,
    },
    /// Elementwise sum of two sources; the second is the residual source.
    Add,
}

fn yes() -> bool {
    true
}
fn one() -> usize {
    1
}
fn last_axis() -> isize {
    -1
}

impl ModuleKind {
    pub fn linear(in_features: usize, out_features: usize, bias: bool) -> Self {
        ModuleKind::Linear { in_features, out_features, bias }
    }

    pub fn conv2d(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        ModuleKind::Conv2d { in_channels, out_channels, kernel, stride, padding, bias }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModuleKind::Linear { .. } => "linear",
            ModuleKind::Conv2d { .. } => "conv2d",
            ModuleKind::Relu => "relu",
            ModuleKind::Tanh => "tanh",
            ModuleKind::Sigmoid => "sigmoid",
            ModuleKind::Softmax { .. } => "softmax",
            ModuleKind::Flatten => "flatten",
            ModuleKind::AvgPool2d { .. } => "avgpool2d",
            ModuleKind::Add => "add",
        }
    }

    /// Modules carrying weights.
    pub fn is_parameterised(&self) -> bool {
        matches!(self, ModuleKind::Linear { .. } | ModuleKind::Conv2d { .. })
    }

    /// Shape-preserving elementwise nonlinearities.
    pub fn is_activation(&self) -> bool {
        matches!(self, ModuleKind::Relu | ModuleKind::Tanh | ModuleKind::Sigmoid | ModuleKind::Softmax { .. })
    }

    pub fn arity(&self) -> usize {
        if matches!(self, ModuleKind::Add) {
            2
        } else {
            1
        }
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self {
            ModuleKind::Linear { in_features, out_features, .. } => Some(vec![*out_features, *in_features]),
            ModuleKind::Conv2d { in_channels, out_channels, kernel, .. } => {
                Some(vec![*out_channels, *in_channels, *kernel, *kernel])
            }
            _ => None,
        }
    }

    pub fn bias_shape(&self) -> Option<Vec<usize>> {
        match self {
            ModuleKind::Linear { out_features, bias: true, .. } => Some(vec![*out_features]),
            ModuleKind::Conv2d { out_channels, bias: true, .. } => Some(vec![*out_channels]),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamRole {
    Weight,
    Bias,
}

impl ParamRole {
    pub fn key(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Node {
    Input(usize),
    Module(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Module {
    name: String,
    kind: ModuleKind,
    sources: Vec<String>,
    weight: Option<Tensor>,
    bias: Option<Tensor>,
    nodes: Vec<Node>,
}

impl Module {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> &ModuleKind {
        &self.kind
    }

    pub fn sources(&self) -> &[String] {
        &self.sources
    }

    pub fn weight(&self) -> Option<&Tensor> {
        self.weight.as_ref()
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn param(&self, role: ParamRole) -> Option<&Tensor> {
        match role {
            ParamRole::Weight => self.weight.as_ref(),
            ParamRole::Bias => self.bias.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputSpec {
    pub key: String,
    #[serde(rename = "from")]
    pub module: String,
}

/// An immutable, validated module graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    dtype: DType,
    inputs: Vec<String>,
    outputs: Vec<OutputSpec>,
    modules: Vec<Module>,
    order: Vec<usize>,
    index: HashMap<String, usize>,
}

/// Hooks the engine calls at every module boundary.
///
/// All methods default to doing nothing.
pub trait Interceptor {
    fn forward_pre(&mut self, _site: &str, _inputs: &mut Vec<Tensor>) -> Result<()> {
        Ok(())
    }

    fn forward(&mut self, _site: &str, _output: &mut Tensor) -> Result<()> {
        Ok(())
    }

    /// Checked after `site` has executed and its forward hooks fired.
    fn stop_after(&self, _site: &str) -> bool {
        false
    }

    fn backward_output(&mut self, _site: &str, _grad: &mut Tensor) -> Result<()> {
        Ok(())
    }

    fn backward_input(&mut self, _site: &str, _grads: &mut Vec<Tensor>) -> Result<()> {
        Ok(())
    }
}

pub struct NoHooks;

impl Interceptor for NoHooks {}

/// Replaces the gradient kernel of selected modules during a reverse pass.
///
/// Returning `Ok(None)` falls back to the ordinary chain rule.
pub trait BackwardRule {
    fn propagate(
        &mut self,
        module: &Module,
        inputs: &[Tensor],
        output: &Tensor,
        grad: &Tensor,
    ) -> Result<Option<Vec<Tensor>>>;
}

pub struct ForwardPass<'g> {
    pub outputs: TensorMap,
    pub tape: Option<Tape<'g>>,
}

impl ModelGraph {
    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn input_keys(&self) -> &[String] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[OutputSpec] {
        &self.outputs
    }

    pub fn output_keys(&self) -> impl Iterator<Item = &str> {
        self.outputs.iter().map(|o| o.key.as_str())
    }

    pub fn modules(&self) -> &[Module] {
        &self.modules
    }

    pub fn module(&self, name: &str) -> Option<&Module> {
        self.index.get(name).map(|&i| &self.modules[i])
    }

    pub fn module_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn has_site(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Module indices in execution order.
    pub fn execution_order(&self) -> &[usize] {
        &self.order
    }

    pub(crate) fn output_module(&self, key: &str) -> Option<usize> {
        self.outputs.iter().find(|o| o.key == key).and_then(|o| self.module_index(&o.module))
    }

    /// Modules that read `name`'s output directly.
    pub fn consumers(&self, name: &str) -> Vec<&Module> {
        let Some(idx) = self.module_index(name) else {
            return Vec::new();
        };
        self.modules.iter().filter(|m| m.nodes.contains(&Node::Module(idx))).collect()
    }

    /// Modules reachable from `name` along data edges (excluding itself).
    pub fn downstream(&self, name: &str) -> Result<HashSet<String>> {
        let start = self.module_index(name).ok_or_else(|| Error::UnknownSite(name.to_string()))?;
        let mut seen = HashSet::new();
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            for (j, m) in self.modules.iter().enumerate() {
                if m.nodes.contains(&Node::Module(i)) && seen.insert(j) {
                    stack.push(j);
                }
            }
        }
        Ok(seen.into_iter().map(|j| self.modules[j].name.clone()).collect())
    }

    /// Per-row width of a module's output when the graph alone fixes it
    /// (linear layers and elementwise activations after them).
    pub fn row_width(&self, name: &str) -> Option<usize> {
        let m = self.module(name)?;
        match &m.kind {
            ModuleKind::Linear { out_features, .. } => Some(*out_features),
            ModuleKind::Relu | ModuleKind::Tanh | ModuleKind::Sigmoid | ModuleKind::Softmax { .. } => {
                self.row_width(m.sources.first()?)
            }
            _ => None,
        }
    }

    /// Parameters keyed `<module path>.<role>`, unbatched.
    pub fn parameters(&self) -> TensorMap {
        let mut map = TensorMap::new();
        for m in &self.modules {
            for (role, t) in [(ParamRole::Weight, &m.weight), (ParamRole::Bias, &m.bias)] {
                if let Some(t) = t {
                    let path = param_path(&m.name, role).expect("validated module name");
                    map.put(&path, t.clone()).expect("validated parameter paths");
                }
            }
        }
        map
    }

    pub fn parameter_count(&self) -> usize {
        self.modules
            .iter()
            .map(|m| m.weight.as_ref().map_or(0, Tensor::numel) + m.bias.as_ref().map_or(0, Tensor::numel))
            .sum()
    }

    /// A copy computing in `dtype`, parameters rounded accordingly.
    pub fn with_dtype(&self, dtype: DType) -> ModelGraph {
        let mut out = self.clone();
        out.dtype = dtype;
        for m in &mut out.modules {
            m.weight = m.weight.take().map(|t| t.to_dtype(dtype));
            m.bias = m.bias.take().map(|t| t.to_dtype(dtype));
        }
        out
    }

    /// A copy with every parameter replaced from `params`, which must hold
    /// exactly the keys and shapes of [`parameters`](Self::parameters).
    pub fn with_parameters(&self, params: &TensorMap) -> Result<ModelGraph> {
        let expected = self.parameters().flatten_keys();
        let given = params.flatten_keys();
        if expected.len() != given.len() {
            return Err(Error::Structure(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                given.len()
            )));
        }
        let mut out = self.clone();
        for m in &mut out.modules {
            for role in [ParamRole::Weight, ParamRole::Bias] {
                let slot = match role {
                    ParamRole::Weight => &mut m.weight,
                    ParamRole::Bias => &mut m.bias,
                };
                if let Some(old) = slot {
                    let key = format!("{}.{}", m.name, role.key());
                    let new = given.get(&key).ok_or_else(|| Error::Structure(format!("missing parameter {key:?}")))?;
                    if new.shape() != old.shape() {
                        return Err(Error::Shape(format!(
                            "parameter {key}: expected {:?}, got {:?}",
                            old.shape(),
                            new.shape()
                        )));
                    }
                    *slot = Some(new.to_dtype(self.dtype));
                }
            }
        }
        Ok(out)
    }

    pub fn forward(&self, inputs: &TensorMap, record: bool) -> Result<(TensorMap, Option<Tape<'_>>)> {
        let pass = self.forward_with(inputs, record, &mut NoHooks)?;
        Ok((pass.outputs, pass.tape))
    }

    pub fn forward_with<'g>(
        &'g self,
        inputs: &TensorMap,
        record: bool,
        hooks: &mut dyn Interceptor,
    ) -> Result<ForwardPass<'g>> {
        let mut batch = None;
        let mut input_values = Vec::with_capacity(self.inputs.len());
        for key in &self.inputs {
            let t = inputs.get_tensor(key.as_str()).map_err(|_| Error::MissingInput(key.clone()))?;
            if t.ndim() == 0 {
                return Err(Error::Shape(format!("input {key:?} has no batch axis")));
            }
            match batch {
                None => batch = Some(t.rows()),
                Some(b) if b != t.rows() => {
                    return Err(Error::Shape(format!(
                        "input {key:?} has batch {} but earlier inputs have {b}",
                        t.rows()
                    )))
                }
                _ => {}
            }
            input_values.push(t.clone());
        }
        let batch = batch.unwrap_or(0);
        let mut values: Vec<Option<Tensor>> = vec![None; self.modules.len()];
        let mut entries = Vec::new();
        for &mi in &self.order {
            let m = &self.modules[mi];
            let mut ins: Vec<Tensor> = m
                .nodes
                .iter()
                .map(|n| match n {
                    Node::Input(i) => input_values[*i].clone(),
                    Node::Module(j) => values[*j].clone().expect("topological order"),
                })
                .collect();
            hooks.forward_pre(&m.name, &mut ins)?;
            let mut out = kernels::forward(&m.kind, &ins, m.weight.as_ref(), m.bias.as_ref(), self.dtype)
                .map_err(|e| at_module(&m.name, e))?;
            hooks.forward(&m.name, &mut out)?;
            if record {
                entries.push(tape::Entry { module: mi, inputs: ins, output: out.clone() });
            }
            values[mi] = Some(out);
            if hooks.stop_after(&m.name) {
                break;
            }
        }
        let mut outputs = TensorMap::with_batch(vec![batch]);
        for o in &self.outputs {
            let mi = self.index[&o.module];
            if let Some(v) = &values[mi] {
                outputs.put(o.key.as_str(), v.clone())?;
            }
        }
        let tape = record.then(|| Tape::new(self, entries, input_values, batch));
        Ok(ForwardPass { outputs, tape })
    }
}

fn at_module(name: &str, e: Error) -> Error {
    match e {
        Error::Shape(s) => Error::Shape(format!("{name}: {s}")),
        other => other,
    }
}

pub(crate) fn param_path(module: &str, role: ParamRole) -> Result<KeyPath> {
    KeyPath::parse(module)?.child(role.key())
}

/// Declarative graph construction.
///
/// Modules read from the previously declared module unless sources are
/// given explicitly; the first module reads from the first input.
#[derive(Debug, Clone, Default)]
pub struct GraphBuilder {
    dtype: DType,
    inputs: Vec<String>,
    decls: Vec<(String, ModuleKind, Option<Vec<String>>)>,
    outputs: Vec<OutputSpec>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn input(mut self, key: &str) -> Self {
        self.inputs.push(key.to_string());
        self
    }

    pub fn module(mut self, name: &str, kind: ModuleKind) -> Self {
        self.decls.push((name.to_string(), kind, None));
        self
    }

    pub fn module_from<S: AsRef<str>>(mut self, name: &str, kind: ModuleKind, sources: &[S]) -> Self {
        let sources = sources.iter().map(|s| s.as_ref().to_string()).collect();
        self.decls.push((name.to_string(), kind, Some(sources)));
        self
    }

    pub fn output(mut self, key: &str, module: &str) -> Self {
        self.outputs.push(OutputSpec { key: key.to_string(), module: module.to_string() });
        self
    }

    /// Declared module names and kinds, in order.
    pub fn declarations(&self) -> impl Iterator<Item = (&str, &ModuleKind)> {
        self.decls.iter().map(|(n, k, _)| (n.as_str(), k))
    }

    /// Builds with parameters drawn from `init` using a seeded generator.
    pub fn build(self, init: Init, seed: u64) -> Result<ModelGraph> {
        let mut rng = init::rng(seed);
        let mut params = Vec::new();
        for (_, kind, _) in &self.decls {
            let w = kind.weight_shape().map(|s| init.sample(&s, &mut rng));
            let b = kind.bias_shape().map(|s| init.sample(&s, &mut rng));
            params.push((w, b));
        }
        self.assemble(params)
    }

    /// Builds with parameters from a map keyed like [`ModelGraph::parameters`].
    pub fn build_with_params(self, params: &TensorMap) -> Result<ModelGraph> {
        let mut list = Vec::new();
        let mut used = 0;
        for (name, kind, _) in &self.decls {
            let mut fetch = |role: ParamRole, shape: Option<Vec<usize>>| -> Result<Option<Tensor>> {
                let Some(shape) = shape else { return Ok(None) };
                let path = param_path(name, role)?;
                let t = params.get_tensor(&path).map_err(|_| Error::Structure(format!("missing parameter {path}")))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::Shape(format!("parameter {path}: expected {shape:?}, got {:?}", t.shape())));
                }
                used += 1;
                Ok(Some(t.clone()))
            };
            let w = fetch(ParamRole::Weight, kind.weight_shape())?;
            let b = fetch(ParamRole::Bias, kind.bias_shape())?;
            list.push((w, b));
        }
        if used != params.leaf_count() {
            return Err(Error::Structure(format!(
                "{} parameter tensors supplied but {used} used",
                params.leaf_count()
            )));
        }
        self.assemble(list)
    }

    fn assemble(self, params: Vec<(Option<Tensor>, Option<Tensor>)>) -> Result<ModelGraph> {
        if self.inputs.is_empty() {
            return Err(Error::Graph("graph needs at least one input".into()));
        }
        let mut seen = HashSet::new();
        for k in &self.inputs {
            crate::tensormap::validate_key(k)?;
            if !seen.insert(k.clone()) {
                return Err(Error::Graph(format!("duplicate input {k:?}")));
            }
        }
        let mut index = HashMap::new();
        for (i, (name, _, _)) in self.decls.iter().enumerate() {
            let path = KeyPath::parse(name)?;
            if self.inputs.contains(&path.segments()[0]) {
                return Err(Error::Graph(format!("module {name:?} shadows an input key")));
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Graph(format!("duplicate module name {name:?}")));
            }
        }
        let names: Vec<String> = self.decls.iter().map(|(n, _, _)| n.clone()).collect();
        let mut modules = Vec::with_capacity(self.decls.len());
        for (i, ((name, kind, sources), (weight, bias))) in self.decls.into_iter().zip(params).enumerate() {
            let sources = match sources {
                Some(s) => s,
                None if kind.arity() == 1 => vec![if i == 0 { self.inputs[0].clone() } else { names[i - 1].clone() }],
                None => return Err(Error::Graph(format!("module {name:?} needs explicit sources"))),
            };
            if sources.len() != kind.arity() {
                return Err(Error::Graph(format!(
                    "module {name:?} ({}) takes {} sources, {} given",
                    kind.name(),
                    kind.arity(),
                    sources.len()
                )));
            }
            let nodes = sources
                .iter()
                .map(|s| {
                    if let Some(p) = self.inputs.iter().position(|k| k == s) {
                        Ok(Node::Input(p))
                    } else if let Some(&j) = index.get(s) {
                        Ok(Node::Module(j))
                    } else {
                        Err(Error::Graph(format!("module {name:?} reads unknown source {s:?}")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let weight = weight.map(|t| t.to_dtype(self.dtype));
            let bias = bias.map(|t| t.to_dtype(self.dtype));
            modules.push(Module { name, kind, sources, weight, bias, nodes });
        }
        let order = topo_order(&modules)?;
        let mut keys = HashSet::new();
        for o in &self.outputs {
            crate::tensormap::validate_key(&o.key)?;
            if !keys.insert(o.key.clone()) {
                return Err(Error::Graph(format!("output key {:?} produced twice", o.key)));
            }
            if !index.contains_key(&o.module) {
                return Err(Error::Graph(format!("output {:?} reads unknown module {:?}", o.key, o.module)));
            }
        }
        if self.outputs.is_empty() {
            return Err(Error::Graph("graph declares no outputs".into()));
        }
        let graph = ModelGraph { dtype: self.dtype, inputs: self.inputs, outputs: self.outputs, modules, order, index };
        // parameter paths must not collide with one another
        let mut probe = TensorMap::new();
        for m in &graph.modules {
            for role in [ParamRole::Weight, ParamRole::Bias] {
                if m.param(role).is_some() {
                    let p = param_path(&m.name, role)?;
                    if probe.contains(&p) {
                        return Err(Error::Graph(format!("parameter path {p} collides")));
                    }
                    probe
                        .put(&p, Tensor::scalar(0.0))
                        .map_err(|_| Error::Graph(format!("parameter path {p} collides")))?;
                }
            }
        }
        Ok(graph)
    }
}

/// Kahn's algorithm, breaking ties by declaration order.
fn topo_order(modules: &[Module]) -> Result<Vec<usize>> {
    let n = modules.len();
    let mut indegree = vec![0usize; n];
    for (i, m) in modules.iter().enumerate() {
        indegree[i] = m.nodes.iter().filter(|n| matches!(n, Node::Module(_))).count();
    }
    let mut done = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let Some(next) = (0..n).find(|&i| !done[i] && indegree[i] == 0) else {
            let stuck = (0..n).find(|&i| !done[i]).expect("unfinished module");
            return Err(Error::Cycle(modules[stuck].name.clone()));
        };
        done[next] = true;
        order.push(next);
        for (j, m) in modules.iter().enumerate() {
            for node in &m.nodes {
                if *node == Node::Module(next) {
                    indegree[j] -= 1;
                }
            }
        }
    }
    Ok(order)
}

/// Shared handle to an immutable graph.
pub type SharedGraph = Arc<ModelGraph>;
