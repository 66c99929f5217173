//! Recorded forward passes and the reverse sweep over them.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tensormap::TensorMap;

use super::kernels;
use super::{param_path, BackwardRule, Interceptor, ModelGraph, NoHooks, Node, ParamRole};

pub(crate) struct Entry {
    pub module: usize,
    pub inputs: Vec<Tensor>,
    pub output: Tensor,
}

/// Where a backward seed enters the graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SeedPoint {
    /// A model output key.
    Output(String),
    /// The output of any executed module.
    Site(String),
}

/// Seeds for one reverse pass; each tensor matches the value at its point.
pub type SeedSet = Vec<(SeedPoint, Tensor)>;

#[derive(Debug, Clone, Copy, Default)]
pub struct BackwardOptions {
    /// Also accumulate parameter gradients (single seed set only).
    pub param_grads: bool,
}

/// One recorded forward pass, good for exactly one reverse pass.
pub struct Tape<'g> {
    graph: &'g ModelGraph,
    entries: Vec<Entry>,
    inputs: Vec<Tensor>,
    batch: usize,
    consumed: bool,
}

/// Read access to recorded values, for building seeds.
pub trait ForwardView {
    fn output(&self, key: &str) -> Option<&Tensor>;
    fn site_output(&self, site: &str) -> Option<&Tensor>;
    fn site_input(&self, site: &str) -> Option<&Tensor>;
    fn batch(&self) -> usize;
}

impl<'g> Tape<'g> {
    pub(crate) fn new(graph: &'g ModelGraph, entries: Vec<Entry>, inputs: Vec<Tensor>, batch: usize) -> Self {
        Tape { graph, entries, inputs, batch, consumed: false }
    }

    pub fn graph(&self) -> &'g ModelGraph {
        self.graph
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn entry(&self, site: &str) -> Option<&Entry> {
        let idx = self.graph.module_index(site)?;
        self.entries.iter().find(|e| e.module == idx)
    }

    /// Names of modules that executed, in order.
    pub fn executed(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| self.graph.modules[e.module].name.as_str())
    }

    /// Reverse pass seeded on output keys. Gradients are keyed by input key
    /// and by parameter path (`<module>.weight`, `<module>.bias`).
    pub fn backward(&mut self, seed: &TensorMap) -> Result<TensorMap> {
        let mut set = SeedSet::new();
        for (k, t) in seed.flatten_keys() {
            set.push((SeedPoint::Output(k), t));
        }
        let mut out = self.backward_with(&[set], BackwardOptions { param_grads: true }, &mut NoHooks, None)?;
        Ok(out.remove(0))
    }

    /// General reverse pass. Every seed set in `seeds` is propagated in one
    /// sweep by stacking the sets along the leading axis; the result holds
    /// one gradient map per set, in order.
    pub fn backward_with(
        &mut self,
        seeds: &[SeedSet],
        opts: BackwardOptions,
        hooks: &mut dyn Interceptor,
        mut rule: Option<&mut dyn BackwardRule>,
    ) -> Result<Vec<TensorMap>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let fan = seeds.len();
        if fan == 0 {
            return Err(Error::Seed("no seed sets given".into()));
        }
        if opts.param_grads && fan > 1 {
            return Err(Error::InvalidArgument("parameter gradients need a single seed set".into()));
        }
        let graph = self.graph;
        let n_mod = graph.modules.len();

        // resolve and validate seed points
        let mut points: Vec<usize> = Vec::new();
        let mut per_set: Vec<Vec<(usize, &Tensor)>> = Vec::with_capacity(fan);
        for set in seeds {
            let mut resolved = Vec::new();
            for (point, t) in set {
                let (mi, label) = match point {
                    SeedPoint::Output(k) => {
                        (graph.output_module(k).ok_or_else(|| Error::Seed(format!("{k:?} is not an output key")))?, k)
                    }
                    SeedPoint::Site(s) => (graph.module_index(s).ok_or_else(|| Error::UnknownSite(s.clone()))?, s),
                };
                let entry = self
                    .entries
                    .iter()
                    .find(|e| e.module == mi)
                    .ok_or_else(|| Error::Seed(format!("{label:?} was not computed in this pass")))?;
                if t.shape() != entry.output.shape() {
                    return Err(Error::Seed(format!(
                        "seed for {label:?} has shape {:?}, value has {:?}",
                        t.shape(),
                        entry.output.shape()
                    )));
                }
                if !points.contains(&mi) {
                    points.push(mi);
                }
                resolved.push((mi, t));
            }
            per_set.push(resolved);
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; n_mod];
        let mut input_grads: Vec<Option<Tensor>> = vec![None; self.inputs.len()];
        for &mi in &points {
            let shape = self.entries.iter().find(|e| e.module == mi).expect("checked").output.shape();
            let per = shape.iter().product::<usize>();
            let mut data = vec![0.0; per * fan];
            for (f, set) in per_set.iter().enumerate() {
                for (m, t) in set {
                    if *m == mi {
                        for (d, v) in data[f * per..(f + 1) * per].iter_mut().zip(t.data()) {
                            *d += v;
                        }
                    }
                }
            }
            let mut s = shape.to_vec();
            s[0] *= fan;
            grads[mi] = Some(Tensor::new(s, data)?);
        }

        let mut params = TensorMap::new();
        for entry in self.entries.iter().rev() {
            let module = &graph.modules[entry.module];
            let Some(mut g) = grads[entry.module].take() else {
                continue;
            };
            hooks.backward_output(&module.name, &mut g)?;
            let custom = match rule.as_deref_mut() {
                Some(r) => r.propagate(module, &entry.inputs, &entry.output, &g)?,
                None => None,
            };
            let mut gin = match custom {
                Some(v) => v,
                None => {
                    let mg = kernels::backward(
                        &module.kind,
                        &entry.inputs,
                        &entry.output,
                        module.weight.as_ref(),
                        &g,
                        opts.param_grads,
                    )?;
                    if let Some(w) = mg.weight {
                        params.put(&param_path(&module.name, ParamRole::Weight)?, w)?;
                    }
                    if let Some(b) = mg.bias {
                        params.put(&param_path(&module.name, ParamRole::Bias)?, b)?;
                    }
                    mg.inputs
                }
            };
            hooks.backward_input(&module.name, &mut gin)?;
            if gin.len() != module.nodes.len() {
                return Err(Error::Shape(format!(
                    "{}: {} input gradients for {} sources",
                    module.name,
                    gin.len(),
                    module.nodes.len()
                )));
            }
            for (node, gi) in module.nodes.iter().zip(gin) {
                let slot = match node {
                    Node::Input(i) => &mut input_grads[*i],
                    Node::Module(j) => &mut grads[*j],
                };
                *slot = Some(match slot.take() {
                    None => gi,
                    Some(prev) => prev.add(&gi)?,
                });
            }
        }

        let mut out: Vec<TensorMap> = (0..fan).map(|_| TensorMap::new()).collect();
        for (i, key) in graph.inputs.iter().enumerate() {
            let x = &self.inputs[i];
            let g = match input_grads[i].take() {
                Some(g) => g,
                None => Tensor::zeros(x.repeat_rows(fan).shape().to_vec()),
            };
            for (f, map) in out.iter_mut().enumerate() {
                let part = g.slice_rows(f * self.batch, (f + 1) * self.batch)?;
                map.put(key.as_str(), part)?;
            }
        }
        if opts.param_grads {
            for (k, t) in params.flatten_keys() {
                out[0].put(k.as_str(), t)?;
            }
        }
        Ok(out)
    }
}

impl ForwardView for Tape<'_> {
    fn output(&self, key: &str) -> Option<&Tensor> {
        let mi = self.graph.output_module(key)?;
        self.entries.iter().find(|e| e.module == mi).map(|e| &e.output)
    }

    fn site_output(&self, site: &str) -> Option<&Tensor> {
        self.entry(site).map(|e| &e.output)
    }

    fn site_input(&self, site: &str) -> Option<&Tensor> {
        self.entry(site).map(|e| &e.inputs[0])
    }

    fn batch(&self) -> usize {
        self.batch
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, Init, ModuleKind};

    #[test]
    fn reuse_is_an_error() {
        let g = GraphBuilder::new()
            .input("x")
            .module("fc", ModuleKind::linear(2, 1, false))
            .output("y", "fc")
            .build(Init::Uniform(-1.0, 1.0), 0)
            .unwrap();
        let x = TensorMap::with_batch(vec![1]).with("x", Tensor::matrix(&[&[1.0, 2.0]]).unwrap()).unwrap();
        let (_, tape) = g.forward(&x, true).unwrap();
        let mut tape = tape.unwrap();
        let seed = TensorMap::new().with("y", Tensor::matrix(&[&[1.0]]).unwrap()).unwrap();
        tape.backward(&seed).unwrap();
        assert_eq!(tape.backward(&seed).unwrap_err(), Error::TapeConsumed);
    }

    #[test]
    fn seed_shape_checked() {
        let g = GraphBuilder::new()
            .input("x")
            .module("fc", ModuleKind::linear(2, 1, false))
            .output("y", "fc")
            .build(Init::Uniform(-1.0, 1.0), 0)
            .unwrap();
        let x = TensorMap::with_batch(vec![1]).with("x", Tensor::matrix(&[&[1.0, 2.0]]).unwrap()).unwrap();
        let (_, tape) = g.forward(&x, true).unwrap();
        let seed = TensorMap::new().with("y", Tensor::vector(&[1.0, 1.0])).unwrap();
        assert!(matches!(tape.unwrap().backward(&seed), Err(Error::Seed(_))));
    }
}
