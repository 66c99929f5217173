//! Hook-based interpretability over a small differentiable module graph.
//!
//! Everything flows as [`TensorMap`]s: model inputs and outputs, cached
//! activations, gradients, attributions and parameter deltas. Models are
//! [`ModelGraph`]s wrapped in a [`HookedModel`], whose run contexts expose
//! get/set interventions with cache proxies and stop-at-layer execution.
//! The method families build on that wrapper:
//!
//! - [`attribution`]: gradients, integrated gradients, conductance,
//!   grad-CAM, guided backprop, LRP and its concept-conditioned variant,
//!   activation maximisation, pixel flipping.
//! - [`latent`]: activation caching, probes, CAVs and TCAV, activation and
//!   attribution patching, steering vectors.
//! - [`weights`]: task vectors, pruning, adapter insertion.

pub mod attribution;
pub mod error;
pub mod graph;
pub mod hooking;
pub mod io;
pub mod latent;
pub mod stats;
pub mod tensor;
pub mod tensormap;
pub mod weights;
pub mod zoo;

pub use error::{Error, Result};
pub use graph::{GraphBuilder, Init, ModelGraph, ModuleKind, SeedPoint};
pub use hooking::{HookedModel, Proxy, RunContext, Scope, Slot};
pub use tensor::{DType, Tensor};
pub use tensormap::{Entry, KeyPath, TensorMap};
