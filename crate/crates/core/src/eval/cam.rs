use crate::error::{Error, Result};
use crate::filters::highpass_stream;
use crate::gradcore::{pool_resize, Resample, Tape, Tensor};
use crate::model::{Stage2Model, Stage2Taps};

pub const DEFAULT_LAYER: &str = "fc_out";

/// Grad-CAM intermediates for one image.
#[derive(Clone, Debug)]
pub struct GradCam {
    /// `K×h×w` layer activation.
    pub activation: Tensor,
    /// Per-channel weights: spatial mean of the logit gradient.
    pub weights: Vec<f64>,
    /// `S×S` heatmap in `[0, 1]`.
    pub heatmap: Tensor,
}

/// Grad-CAM of the common-semantics detector for `image` (`3×S×S`).
pub fn grad_cam(model: &Stage2Model, image: &Tensor, target_class: usize, layer: &str) -> Result<GradCam> {
    if !Stage2Taps::LAYERS.contains(&layer) {
        return Err(Error::Config(format!(
            "unknown Grad-CAM layer {layer:?}; expected one of {:?}",
            Stage2Taps::LAYERS
        )));
    }
    if target_class >= model.detector_common.class_count {
        return Err(Error::Config(format!("target class {target_class} out of range")));
    }
    let s = model.cfg.image_size;
    if image.shape() != [3, s, s] {
        return Err(Error::contract(format!("expected 3×{s}×{s} image, got {:?}", image.shape())));
    }
    let x = image.clone().reshape(&[1, 3, s, s])?;
    let xh = highpass_stream(&x)?;

    // Gradients must reach the tapped layer even when the embedded branch is frozen.
    let mut store = model.store.clone();
    store.set_trainable("", true);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let (xv, hv) = (tape.constant(x), tape.constant(xh));
    let taps = model.encode(&mut tape, &p, xv, hv)?;
    let logits = model.detector_common.forward(&mut tape, &p, taps.common)?;
    let mut onehot = Tensor::zeros(&[1, model.detector_common.class_count]);
    onehot.data_mut()[target_class] = 1.0;
    let mask = tape.constant(onehot);
    let picked = tape.mul(logits, mask)?;
    let score = tape.sum(picked);
    tape.backward(score)?;

    let a = taps.layer(layer).expect("layer checked");
    let activation = tape.value(a).clone();
    let (_, k, h, w) = activation.dims4()?;
    let grad = tape.grad(a).cloned().unwrap_or_else(|| Tensor::zeros(activation.shape()));
    let weights: Vec<f64> = (0..k)
        .map(|c| grad.data()[c * h * w..(c + 1) * h * w].iter().map(|&g| g as f64).sum::<f64>() / (h * w) as f64)
        .collect();
    let activation = activation.reshape(&[k, h, w])?;
    let heatmap = cam_from_weights(&activation, &weights, s)?;
    Ok(GradCam {
        activation,
        weights,
        heatmap,
    })
}

/// `ReLU(Σ_k w_k A_k)` upsampled bilinearly to `size×size`, min-max
/// normalized. An all-zero map stays all-zero.
pub fn cam_from_weights(activation: &Tensor, weights: &[f64], size: usize) -> Result<Tensor> {
    let [k, h, w] = activation.shape()[..] else {
        return Err(Error::contract("activation must be K×h×w"));
    };
    if weights.len() != k || h != w || !size.is_multiple_of(h) {
        return Err(Error::contract(format!(
            "cannot build a {size}×{size} map from {k}×{h}×{w} with {} weights",
            weights.len()
        )));
    }
    let plane = h * w;
    let a = activation.data();
    let raw = Tensor::from_fn(&[1, 1, h, w], |i| {
        let v: f64 = (0..k).map(|c| weights[c] * a[c * plane + i] as f64).sum();
        v.max(0.0) as f32
    });
    let up = pool_resize(&raw, Resample::UpsampleBilinear, size / h)?;
    let max = up.data().iter().copied().fold(0.0f32, f32::max);
    let min = up.data().iter().copied().fold(f32::INFINITY, f32::min);
    let data = if max <= 0.0 {
        vec![0.0; size * size]
    } else if max - min <= f32::EPSILON * max {
        up.data().iter().map(|&v| v / max).collect()
    } else {
        up.data().iter().map(|&v| ((v - min) / (max - min)).clamp(0.0, 1.0)).collect()
    };
    Tensor::new(&[size, size], data)
}
