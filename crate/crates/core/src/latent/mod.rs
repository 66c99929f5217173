//! Latent-space methods: activation caching, probes, concept vectors,
//! patching and steering.

mod cav;
mod patching;
mod probe;
mod steering;
mod store;

pub use cav::{fit_cav, tcav_score, Cav, CavMethod};
pub use patching::{activation_patch, attribution_patch, patched_metric, PatchMode, PatchReport, SitePatch};
pub use probe::{fit_probe, ProbeReport, DEFAULT_RIDGE};
pub use steering::{apply_steering, steering_vector};
pub use store::{cache_activations, ActivationStore, SiteActivations};

use crate::error::{Error, Result};
use crate::hooking::{HookedModel, Slot};
use crate::tensor::Tensor;
use crate::tensormap::TensorMap;

/// Activations at `sites` for one batch, in site order.
pub(crate) fn capture(
    model: &mut HookedModel,
    inputs: &TensorMap,
    sites: &[String],
) -> Result<(TensorMap, Vec<Tensor>)> {
    let mut ctx = model.context()?;
    let proxies = sites.iter().map(|s| ctx.get(s, Slot::Output)).collect::<Result<Vec<_>>>()?;
    let out = ctx.run(inputs)?;
    let acts = proxies.into_iter().map(|p| p.into_value()).collect::<Result<Vec<_>>>()?;
    Ok((out.outputs, acts))
}

/// Rows flattened into a `[rows, units]` matrix.
pub(crate) fn as_matrix(t: &Tensor) -> Result<Tensor> {
    if t.ndim() == 0 {
        return Err(Error::Shape("activations need a leading sample axis".into()));
    }
    t.reshape(vec![t.rows(), t.row_len()])
}
