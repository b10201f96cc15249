#![allow(dead_code)]

pub mod gradcases;

use forgesem::gradcore::{Real, Tape, Tensor, Var};
use forgesem::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(lo..hi)))
}

/// Values in `±[0.1, 1]`, away from the kinks of relu/abs.
pub fn away_from_zero<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        T::of(if rng.gen_bool(0.5) { m } else { -m })
    })
}

/// A differentiable function of the test inputs.
pub type Graph<T> = dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>;

pub struct GradReport {
    pub probes: usize,
    pub max_rel: f64,
}

/// Central finite-difference check of `f` against the tape gradient.
///
/// The scalar under test is `Σ f(inputs) ⊙ R` for a fixed random `R`, so
/// every output element contributes. Relative error is
/// `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
pub fn grad_check<T: Real>(
    inputs: &[Tensor<T>],
    f: &Graph<T>,
    probes: usize,
    eps: f64,
    floor: f64,
    seed: u64,
) -> GradReport {
    let mut r = rng(seed);
    let eval = |xs: &[Tensor<T>], weights: Option<&Tensor<T>>| -> (Tape<T>, Vec<Var>, Var, Tensor<T>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let out = f(&mut tape, &vars).expect("forward");
        let shape = tape.shape(out).to_vec();
        let w = match weights {
            Some(w) => w.clone(),
            None => {
                let mut wr = rng(seed ^ 0xA5A5);
                random_tensor(&mut wr, &shape, -1.0, 1.0)
            }
        };
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv).expect("weights");
        let loss = tape.sum(prod);
        (tape, vars, loss, w)
    };
    let (mut tape, vars, loss, weights) = eval(inputs, None);
    tape.backward(loss).expect("backward");
    let grads: Vec<Tensor<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();
    // Accumulate the probe scalar in f64 so only the forward pass rounds.
    let value = |xs: &[Tensor<T>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let out = f(&mut tape, &vars).expect("forward");
        tape.value(out).data().iter().zip(weights.data()).map(|(o, w)| o.f64() * w.f64()).sum()
    };

    let mut max_rel: f64 = 0.0;
    for _ in 0..probes {
        let which = r.gen_range(0..inputs.len());
        let idx = r.gen_range(0..inputs[which].len());
        let mut plus = inputs.to_vec();
        let mut minus = inputs.to_vec();
        let x0 = inputs[which].data()[idx].f64();
        plus[which].data_mut()[idx] = T::of(x0 + eps);
        minus[which].data_mut()[idx] = T::of(x0 - eps);
        // Use the perturbation actually representable in T.
        let h = plus[which].data()[idx].f64() - minus[which].data()[idx].f64();
        let numeric = (value(&plus) - value(&minus)) / h;
        let analytic = grads[which].data()[idx].f64();
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        max_rel = max_rel.max(rel);
    }
    GradReport { probes, max_rel }
}

/// Direct nested-loop convolution, zero padding, grouped.
pub fn naive_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cpg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cpg * groups, cin);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let opg = cout / groups;
    let xs = x.data();
    let ws = w.data();
    let mut out = vec![0.0; n * cout * oh * ow];
    for s in 0..n {
        for o in 0..cout {
            let g = o / opg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for ci in 0..cpg {
                        let c = g * cpg + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += xs[((s * cin + c) * h + iy as usize) * wd + ix as usize]
                                    * ws[((o * cpg + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((s * cout + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, oh, ow], out).unwrap()
}

/// Half-pixel bilinear upsampling written as two separate 1-D passes.
pub fn separable_bilinear(x: &Tensor<f64>, f: usize) -> Tensor<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let taps = |len: usize, o: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut out = vec![0.0; n * c * h * f * w * f];
    for p in 0..n * c {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        let mut rows = vec![0.0; h * w * f];
        for y in 0..h {
            for ox in 0..w * f {
                let (a, b, l) = taps(w, ox);
                rows[y * w * f + ox] = (1.0 - l) * plane[y * w + a] + l * plane[y * w + b];
            }
        }
        for oy in 0..h * f {
            let (a, b, l) = taps(h, oy);
            for ox in 0..w * f {
                out[p * h * f * w * f + oy * w * f + ox] = (1.0 - l) * rows[a * w * f + ox] + l * rows[b * w * f + ox];
            }
        }
    }
    Tensor::new(&[n, c, h * f, w * f], out).unwrap()
}

/// Magnitude of the `n×n` DFT of a `k×k` kernel at the top-left corner,
/// summed term by term.
pub fn naive_dft(kernel: &[f64], k: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * n);
    for u in 0..n {
        for v in 0..n {
            let (mut re, mut im) = (0.0, 0.0);
            for r in 0..k {
                for c in 0..k {
                    let phase = -2.0 * std::f64::consts::PI * ((u * r + v * c) as f64) / n as f64;
                    re += kernel[r * k + c] * phase.cos();
                    im += kernel[r * k + c] * phase.sin();
                }
            }
            out.push((re * re + im * im).sqrt());
        }
    }
    out
}

/// Fraction of (positive, negative) pairs won by the positive, ties ½.
pub fn pair_count_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut wins2, mut pairs) = (0u64, 0u64);
    for i in 0..scores.len() {
        if !positive[i] {
            continue;
        }
        for j in 0..scores.len() {
            if positive[j] {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                wins2 += 2;
            } else if scores[i] == scores[j] {
                wins2 += 1;
            }
        }
    }
    wins2 as f64 / 2.0 / pairs as f64
}

/// Contrastive loss of one tuple evaluated directly from rows.
pub fn brute_contrastive(anchor: &[f64], pos: &[f64], neg: &[f64], margin: f64) -> f64 {
    let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    (margin + d(anchor, pos) - d(anchor, neg)).max(0.0)
}
