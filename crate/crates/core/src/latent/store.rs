use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::hooking::HookedModel;
use crate::tensor::Tensor;
use crate::tensormap::TensorMap;

use super::{as_matrix, capture};

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ranked {
    value: f64,
    sample: usize,
}

impl Eq for Ranked {}

impl Ord for Ranked {
    /// Higher value ranks first; on ties the lower sample id does.
    fn cmp(&self, other: &Self) -> Ordering {
        self.value.total_cmp(&other.value).then_with(|| other.sample.cmp(&self.sample))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Cached activations of one site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteActivations {
    /// `[samples, units]`, rows in dataset order.
    pub activations: Tensor,
    /// Per unit, the `k` highest `(value, sample id)` pairs, best first.
    pub top_k: Vec<Vec<(f64, usize)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStore {
    pub k: usize,
    pub sites: IndexMap<String, SiteActivations>,
}

impl ActivationStore {
    pub fn site(&self, site: &str) -> Result<&SiteActivations> {
        self.sites.get(site).ok_or_else(|| Error::UnknownSite(site.to_string()))
    }

    pub fn activations(&self, site: &str) -> Result<&Tensor> {
        Ok(&self.site(site)?.activations)
    }

    pub fn samples(&self) -> usize {
        self.sites.values().next().map_or(0, |s| s.activations.rows())
    }
}

/// Runs every batch of `dataset` and keeps all activations at `sites`
/// together with the per-unit top-`k` samples. Sample ids count rows
/// across the whole dataset.
pub fn cache_activations(
    model: &mut HookedModel,
    dataset: &[TensorMap],
    sites: &[&str],
    k: usize,
) -> Result<ActivationStore> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    for s in sites {
        if !model.graph().has_site(s) {
            return Err(Error::UnknownSite(s.to_string()));
        }
    }
    let names: Vec<String> = sites.iter().map(|s| s.to_string()).collect();
    let mut rows: Vec<Vec<Tensor>> = vec![Vec::new(); names.len()];
    let mut heaps: Vec<Vec<BinaryHeap<Reverse<Ranked>>>> = vec![Vec::new(); names.len()];
    let mut next_id = 0;
    for batch in dataset {
        let (_, acts) = capture(model, batch, &names)?;
        let mut n = 0;
        for (i, a) in acts.into_iter().enumerate() {
            let m = as_matrix(&a)?;
            n = m.rows();
            let units = m.row_len();
            if heaps[i].is_empty() {
                heaps[i] = vec![BinaryHeap::with_capacity(k + 1); units];
            } else if heaps[i].len() != units {
                return Err(Error::Shape(format!("{} changed width across batches", names[i])));
            }
            for r in 0..n {
                for (u, &value) in m.row(r).iter().enumerate() {
                    let heap = &mut heaps[i][u];
                    heap.push(Reverse(Ranked { value, sample: next_id + r }));
                    if heap.len() > k {
                        heap.pop();
                    }
                }
            }
            rows[i].push(m);
        }
        next_id += n;
    }
    let mut out = IndexMap::new();
    for ((name, parts), hs) in names.into_iter().zip(rows).zip(heaps) {
        let activations = if parts.is_empty() { Tensor::zeros(vec![0, 0]) } else { Tensor::concat(&parts)? };
        let top_k = hs
            .into_iter()
            .map(|h| {
                let mut v: Vec<Ranked> = h.into_iter().map(|Reverse(r)| r).collect();
                v.sort_by(|a, b| b.cmp(a));
                v.into_iter().map(|r| (r.value, r.sample)).collect()
            })
            .collect();
        out.insert(name, SiteActivations { activations, top_k });
    }
    Ok(ActivationStore { k, sites: out })
}
