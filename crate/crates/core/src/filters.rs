//! Adaptive high-pass filtering.
//!
//! An AHF kernel starts as `E − G/ΣG` (identity minus a normalized
//! Gaussian) and is re-projected after initialization and after every
//! optimizer step so that its center is −1 and the remaining weights sum to
//! 1. The projected kernel has zero DC gain: constant regions map to zero.

use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::gradcore::nn::Conv;
use crate::gradcore::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

/// Projection denominators at or below this magnitude are degenerate.
pub const PROJECTION_EPS: f64 = 1e-8;

/// A bank of per-channel `k×k` high-pass kernels, laid out `C×1×k×k` so it
/// can be used directly as depthwise convolution weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AhfKernel {
    pub size: usize,
    pub sigma: f64,
    pub weights: Tensor,
}

impl AhfKernel {
    /// Identity-minus-Gaussian kernel for every channel (not yet projected).
    pub fn init(size: usize, sigma: f64, channels: usize) -> Result<Self> {
        if size < 3 || size.is_multiple_of(2) {
            return Err(Error::contract(format!("AHF size must be odd and ≥ 3, got {size}")));
        }
        if sigma.is_nan() || sigma <= 0.0 {
            return Err(Error::contract(format!("AHF sigma must be > 0, got {sigma}")));
        }
        if channels == 0 {
            return Err(Error::contract("AHF needs at least one channel"));
        }
        let single = gaussian_highpass(size, sigma);
        let mut data = Vec::with_capacity(channels * size * size);
        for _ in 0..channels {
            data.extend(single.iter().map(|&v| v as f32));
        }
        Ok(AhfKernel {
            size,
            sigma,
            weights: Tensor::new(&[channels, 1, size, size], data)?,
        })
    }

    /// Initialized and projected; the form used for fixed streams.
    pub fn projected(size: usize, sigma: f64, channels: usize) -> Result<Self> {
        let mut k = Self::init(size, sigma, channels)?;
        k.project();
        Ok(k)
    }

    pub fn channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let kk = self.size * self.size;
        &self.weights.data()[c * kk..(c + 1) * kk]
    }

    /// Apply the center/normalization projection in place. Returns the
    /// number of channels that hit the degenerate fallback.
    pub fn project(&mut self) -> usize {
        project_weights(self.weights.data_mut(), self.size)
    }

    /// Depthwise convolution of an NCHW tensor, stride 1, same padding.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.channels() {
            return Err(Error::contract(format!(
                "AHF has {} channels, input has {c}",
                self.channels()
            )));
        }
        crate::gradcore::conv2d(x, &self.weights, None, 1, self.size / 2, c)
    }
}

/// `E − G/ΣG` for one channel, in f64.
pub fn gaussian_highpass(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as isize;
    let gauss: Vec<f64> = (-r..=r)
        .flat_map(|y| (-r..=r).map(move |x| (-((x * x + y * y) as f64) / (2.0 * sigma * sigma)).exp()))
        .collect();
    let total: f64 = gauss.iter().sum();
    let center = size * size / 2;
    gauss
        .iter()
        .enumerate()
        .map(|(i, g)| if i == center { 1.0 } else { 0.0 } - g / total)
        .collect()
}

/// Project a flat buffer of `k×k` kernels in place: center → −1, others
/// divided by (Σg − g_center). A degenerate denominator resets the
/// non-center weights to `1/(k²−1)`.
pub fn project_weights(weights: &mut [f32], k: usize) -> usize {
    let kk = k * k;
    let center = kk / 2;
    let mut degenerate = 0;
    for (c, kernel) in weights.chunks_mut(kk).enumerate() {
        let others: f64 = kernel
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != center)
            .map(|(_, &v)| v as f64)
            .sum();
        if others.abs() <= PROJECTION_EPS || !others.is_finite() {
            log::warn!("AHF channel {c}: degenerate projection denominator {others:e}, resetting to uniform");
            degenerate += 1;
            let u = (1.0 / (kk - 1) as f64) as f32;
            kernel.iter_mut().for_each(|v| *v = u);
        } else {
            for (i, v) in kernel.iter_mut().enumerate() {
                if i != center {
                    *v = (*v as f64 / others) as f32;
                }
            }
        }
        kernel[center] = -1.0;
    }
    degenerate
}

/// The fixed high-frequency input stream: every RGB channel filtered by a
/// projected `3×3`, `σ = 1` AHF kernel.
pub fn highpass_stream(x: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    AhfKernel::projected(3, 1.0, c)?.apply(x)
}

/// Magnitude of the `n×n` DFT of channel `channel` zero-padded to `n×n`,
/// row-major.
pub fn freq_response(kernel: &AhfKernel, channel: usize, n: usize) -> Result<Vec<f64>> {
    if n < kernel.size {
        return Err(Error::contract(format!("grid {n} smaller than kernel {}", kernel.size)));
    }
    if channel >= kernel.channels() {
        return Err(Error::contract(format!("channel {channel} out of {}", kernel.channels())));
    }
    let k = kernel.size;
    let w = kernel.channel(channel);
    let mut grid = vec![Complex::new(0.0f64, 0.0); n * n];
    for y in 0..k {
        for x in 0..k {
            grid[y * n + x].re = w[y * k + x] as f64;
        }
    }
    let fft = FftPlanner::new().plan_fft_forward(n);
    for row in grid.chunks_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for x in 0..n {
        for y in 0..n {
            col[y] = grid[y * n + x];
        }
        fft.process(&mut col);
        for y in 0..n {
            grid[y * n + x] = col[y];
        }
    }
    Ok(grid.iter().map(|c| c.norm()).collect())
}

/// CSV rendering of a frequency-response grid: header `n=<n>`, then `n`
/// rows of comma-separated magnitudes.
pub fn freq_response_csv(mags: &[f64], n: usize) -> String {
    let mut out = format!("n={n}\n");
    for row in mags.chunks(n) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.9}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Per-level high-frequency activations of a multi-scale extraction.
#[derive(Clone, Debug, PartialEq)]
pub struct MhfePyramid {
    pub levels: Vec<Tensor>,
}

/// One extraction level: learnable AHF bank followed by a 3×3 mixer.
#[derive(Clone, Debug)]
pub struct MhfeLevel {
    pub ahf: ParamId,
    pub mixer: Conv,
}

/// Multi-scale high-frequency feature extraction. Level ℓ filters the
/// ℓ-times 2×2-average-pooled input with its own AHF bank and mixes the
/// result with a 3×3 convolution.
#[derive(Clone, Debug)]
pub struct Mhfe {
    pub levels: Vec<MhfeLevel>,
    pub kernel_size: usize,
}

impl Mhfe {
    /// `out_channels[ℓ]` is the mixer width at level ℓ.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: &[usize],
        kernel_size: usize,
        sigma: f64,
    ) -> Result<Self> {
        if out_channels.is_empty() {
            return Err(Error::contract("MHFE needs at least one level"));
        }
        let mut levels = Vec::with_capacity(out_channels.len());
        for (l, &cout) in out_channels.iter().enumerate() {
            let kernel = AhfKernel::projected(kernel_size, sigma, in_channels)?;
            let ahf = store.add(format!("{name}.l{l}.ahf"), kernel.weights);
            let mixer = Conv::new(store, rng, &format!("{name}.l{l}.mix"), in_channels, cout, 3, 1, 1, true);
            levels.push(MhfeLevel { ahf, mixer });
        }
        Ok(Mhfe { levels, kernel_size })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let channels = tape.shape(x)[1];
        let mut input = x;
        let mut out = Vec::with_capacity(self.levels.len());
        for (l, level) in self.levels.iter().enumerate() {
            if l > 0 {
                input = tape.avg_pool2(input)?;
            }
            let hp = tape.conv2d(input, p.var(level.ahf), None, 1, self.kernel_size / 2, channels)?;
            out.push(level.mixer.forward(tape, p, hp)?);
        }
        Ok(out)
    }

    /// Forward pass on a plain tensor.
    pub fn pyramid(&self, store: &ParamStore, x: &Tensor) -> Result<MhfePyramid> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let levels = self.forward(&mut tape, &p, xv)?;
        Ok(MhfePyramid {
            levels: levels.into_iter().map(|v| tape.value(v).clone()).collect(),
        })
    }

    pub fn kernel_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.levels.iter().map(|l| l.ahf)
    }
}

/// Re-project every trainable AHF bank stored under a name ending in
/// `.ahf`. Frozen banks are left bit-identical. Returns the number of
/// degenerate channel resets.
pub fn project_all(store: &mut ParamStore) -> usize {
    store
        .iter_mut()
        .filter(|p| p.trainable && p.name.ends_with(".ahf"))
        .map(|p| {
            let k = p.value.shape()[3];
            project_weights(p.value.data_mut(), k)
        })
        .sum()
}
