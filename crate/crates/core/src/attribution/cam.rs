use crate::error::{Error, Result};
use crate::hooking::{HookedModel, Slot};
use crate::tensor::Tensor;
use crate::tensormap::TensorMap;

use super::{model_inputs, AttributionConfig, AttributionResult};

/// Grad-CAM at a convolutional `site` with output `[N, C, H, W]`.
///
/// Channel weights are the spatial mean of the target's gradient; the map
/// is the weighted channel sum. `cam_raw` holds it before clamping at the
/// site resolution, `cam` is clamped at zero and upsampled (nearest
/// neighbour) to the spatial size of the first 4-D model input.
pub fn grad_cam(
    model: &mut HookedModel,
    inputs: &TensorMap,
    cfg: &AttributionConfig,
    site: &str,
) -> Result<AttributionResult> {
    let x = model_inputs(model.graph(), inputs)?;
    let up = model
        .graph()
        .input_keys()
        .iter()
        .filter_map(|k| x.get_tensor(k.as_str()).ok())
        .find(|t| t.ndim() == 4)
        .map(|t| (t.shape()[2], t.shape()[3]));
    let target = cfg.target.clone();
    let mut ctx = model.context()?;
    ctx.backward(move |v| Ok(vec![target.seed_set(v)?]));
    let a = ctx.get(site, Slot::Output)?;
    let g = ctx.get(site, Slot::GradOutput)?;
    ctx.run(&x)?;
    let (a, g) = (a.into_value()?, g.into_value()?);
    if a.ndim() != 4 {
        return Err(Error::Shape(format!(
            "grad-CAM needs spatial axes at {site:?}, activation has shape {:?}",
            a.shape()
        )));
    }
    let (n, c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
    let hw = h * w;
    let mut raw = vec![0.0; n * hw];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let weight = g.data()[off..off + hw].iter().sum::<f64>() / hw as f64;
            for (r, v) in raw[b * hw..(b + 1) * hw].iter_mut().zip(&a.data()[off..off + hw]) {
                *r += weight * v;
            }
        }
    }
    let (uh, uw) = up.unwrap_or((h, w));
    let mut cam = vec![0.0; n * uh * uw];
    for b in 0..n {
        for y in 0..uh {
            for xx in 0..uw {
                let (sy, sx) = (y * h / uh, xx * w / uw);
                cam[(b * uh + y) * uw + xx] = raw[b * hw + sy * w + sx].max(0.0);
            }
        }
    }
    let attributions = TensorMap::with_batch(vec![n])
        .with("cam", Tensor::new(vec![n, uh, uw], cam)?)?
        .with("cam_raw", Tensor::new(vec![n, h, w], raw)?)?;
    Ok(AttributionResult {
        attributions,
        method: "grad_cam".into(),
        config_digest: cfg.digest(&format!("grad_cam:{site}")),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::Target;
    use crate::graph::{GraphBuilder, Init, ModuleKind};

    #[test]
    fn shapes_and_nonnegativity() {
        let g = GraphBuilder::new()
            .input("img")
            .module("conv", ModuleKind::conv2d(1, 2, 3, 1, 1, true))
            .module("act", ModuleKind::Relu)
            .module("pool", ModuleKind::AvgPool2d { kernel: 2 })
            .module("flat", ModuleKind::Flatten)
            .module("fc", ModuleKind::linear(8, 3, true))
            .output("logits", "fc")
            .build(Init::Uniform(-0.5, 0.5), 3)
            .unwrap();
        let mut m = HookedModel::new(g);
        let data: Vec<f64> = (0..32).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.4).collect();
        let x = TensorMap::with_batch(vec![2]).with("img", Tensor::new(vec![2, 1, 4, 4], data).unwrap()).unwrap();
        let cfg = AttributionConfig::new(Target::index("logits", 2));
        let r = grad_cam(&mut m, &x, &cfg, "pool").unwrap();
        let cam = r.attributions.get_tensor("cam").unwrap();
        assert_eq!(cam.shape(), &[2, 4, 4]);
        assert!(cam.data().iter().all(|v| *v >= 0.0));
        assert_eq!(r.attributions.get_tensor("cam_raw").unwrap().shape(), &[2, 2, 2]);
        assert!(matches!(grad_cam(&mut m, &x, &cfg, "fc"), Err(Error::Shape(_))));
    }
}
