use crate::error::{Error, Result};
use crate::hooking::{DeregisterStatus, HookHandle, HookedModel, Slot};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterMode {
    /// `h ← D(E(h))`
    Replace,
    /// `h ← h + D(E(h))`
    Residual,
}

/// An encoder/decoder pair spliced in at a site. Weights are `[out, in]`
/// like linear layers: the encoder maps `d → k`, the decoder `k → d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub site: String,
    pub encoder: (Tensor, Tensor),
    pub decoder: (Tensor, Tensor),
    pub mode: AdapterMode,
    /// ReLU on the code.
    pub relu: bool,
}

impl Adapter {
    fn dims(&self) -> Result<(usize, usize)> {
        let (we, be) = &self.encoder;
        let (wd, bd) = &self.decoder;
        if we.ndim() != 2 || wd.ndim() != 2 {
            return Err(Error::Shape("adapter weights must be matrices".into()));
        }
        let (k, d) = (we.shape()[0], we.shape()[1]);
        if be.shape() != [k] || wd.shape() != [d, k] || bd.shape() != [d] {
            return Err(Error::Shape(format!(
                "adapter shapes disagree: encoder {:?}+{:?}, decoder {:?}+{:?}",
                we.shape(),
                be.shape(),
                wd.shape(),
                bd.shape()
            )));
        }
        Ok((d, k))
    }

    /// The adapter's output for every row of `h`.
    pub fn transform(&self, h: &Tensor) -> Result<Tensor> {
        let (d, k) = self.dims()?;
        if h.row_len() != d {
            return Err(Error::Shape(format!(
                "adapter at {} expects {d} values per row, got {}",
                self.site,
                h.row_len()
            )));
        }
        let (we, be) = (self.encoder.0.data(), self.encoder.1.data());
        let (wd, bd) = (self.decoder.0.data(), self.decoder.1.data());
        let mut out = h.clone();
        let mode = self.mode;
        let relu = self.relu;
        out.update(|data| {
            let mut z = vec![0.0; k];
            for row in data.chunks_mut(d) {
                for (i, zi) in z.iter_mut().enumerate() {
                    let mut s = be[i];
                    for (j, v) in row.iter().enumerate() {
                        s += we[i * d + j] * v;
                    }
                    *zi = if relu { s.max(0.0) } else { s };
                }
                for (j, v) in row.iter_mut().enumerate() {
                    let mut s = bd[j];
                    for (i, zi) in z.iter().enumerate() {
                        s += wd[j * k + i] * zi;
                    }
                    *v = match mode {
                        AdapterMode::Replace => s,
                        AdapterMode::Residual => *v + s,
                    };
                }
            }
        });
        Ok(out)
    }
}

/// Installs the adapter as a persistent output hook at its site. The graph
/// itself is untouched; [`remove_adapter`] restores the original behaviour.
pub fn insert_adapter(model: &mut HookedModel, adapter: Adapter) -> Result<HookHandle> {
    let (d, _) = adapter.dims()?;
    if let Some(w) = model.graph().row_width(&adapter.site) {
        if w != d {
            return Err(Error::Shape(format!("adapter width {d} does not match {} ({w})", adapter.site)));
        }
    }
    let site = adapter.site.clone();
    model.register_map(&site, Slot::Output, move |h: &Tensor| adapter.transform(h))
}

pub fn remove_adapter(model: &mut HookedModel, handle: HookHandle) -> DeregisterStatus {
    model.deregister(handle)
}
