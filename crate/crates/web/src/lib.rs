//! WebAssembly bindings for the browser demo. The plain functions are
//! usable natively; the `#[wasm_bindgen]` wrappers expose them to JS.

use forgesem::corpus::{render_fake, render_real, Method};
use forgesem::filters::{freq_response, highpass_stream, AhfKernel};
use forgesem::gradcore::Tensor;
use wasm_bindgen::prelude::*;

/// Single-channel `size×size` AHF kernel, row-major, optionally projected.
pub fn kernel_weights(size: usize, sigma: f64, project: bool) -> forgesem::Result<Vec<f32>> {
    let k = if project {
        AhfKernel::projected(size, sigma, 1)?
    } else {
        AhfKernel::init(size, sigma, 1)?
    };
    Ok(k.channel(0).to_vec())
}

/// `n×n` DFT magnitude of the projected kernel, shifted so DC sits at the
/// centre.
pub fn kernel_spectrum(size: usize, sigma: f64, n: usize) -> forgesem::Result<Vec<f64>> {
    let k = AhfKernel::projected(size, sigma, 1)?;
    let mags = freq_response(&k, 0, n)?;
    let half = n / 2;
    Ok((0..n * n)
        .map(|i| {
            let (r, c) = (i / n, i % n);
            mags[((r + half) % n) * n + (c + half) % n]
        })
        .collect())
}

fn to_rgba(img: &Tensor, size: usize, f: impl Fn(f32) -> f32) -> Vec<u8> {
    let plane = size * size;
    let d = img.data();
    let mut out = Vec::with_capacity(plane * 4);
    for i in 0..plane {
        for c in 0..3 {
            out.push((f(d[c * plane + i]).clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

/// RGBA pixels of a synthetic sample: `"real"` or a method name. With
/// `highpass`, the absolute high-pass stream scaled by `gain` instead.
pub fn sample_pixels(seed: u64, method: &str, size: usize, highpass: bool, gain: f32) -> forgesem::Result<Vec<u8>> {
    let synth = if method == "real" {
        render_real(seed, size)
    } else {
        render_fake(seed, method.parse::<Method>()?, size)
    };
    if !highpass {
        return Ok(to_rgba(&synth.image, size, |v| v));
    }
    let batched = synth.image.reshape(&[1, 3, size, size])?;
    let hp = highpass_stream(&batched)?.reshape(&[3, size, size])?;
    Ok(to_rgba(&hp, size, |v| v.abs() * gain))
}

fn js_err(e: forgesem::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[wasm_bindgen(js_name = kernelWeights)]
pub fn kernel_weights_js(size: usize, sigma: f64, project: bool) -> Result<Vec<f32>, JsValue> {
    kernel_weights(size, sigma, project).map_err(js_err)
}

#[wasm_bindgen(js_name = kernelSpectrum)]
pub fn kernel_spectrum_js(size: usize, sigma: f64, n: usize) -> Result<Vec<f64>, JsValue> {
    kernel_spectrum(size, sigma, n).map_err(js_err)
}

#[wasm_bindgen(js_name = samplePixels)]
pub fn sample_pixels_js(seed: u32, method: &str, size: usize, highpass: bool, gain: f32) -> Result<Vec<u8>, JsValue> {
    sample_pixels(seed as u64, method, size, highpass, gain).map_err(js_err)
}

#[wasm_bindgen(js_name = methodNames)]
pub fn method_names() -> Vec<String> {
    Method::ALL.iter().map(|m| m.name().to_string()).collect()
}
