use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gradcore::nn::{Conv, ConvNormAct, Linear};
use crate::gradcore::{Bound, ParamStore, Tape, Tensor, Var};

/// Efficient additive attention over spatial tokens: a learned score per
/// token builds one global query, which modulates the keys elementwise.
/// Used as the lightweight transformer stand-in in the content paths.
#[derive(Clone, Debug)]
pub struct AdditiveAttention {
    query: Conv,
    key: Conv,
    score: Conv,
    mix: Conv,
    proj: Conv,
    dim: usize,
}

impl AdditiveAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Self {
        AdditiveAttention {
            query: Conv::new(store, rng, &format!("{name}.q"), dim, dim, 1, 1, 1, true),
            key: Conv::new(store, rng, &format!("{name}.k"), dim, dim, 1, 1, 1, true),
            score: Conv::new(store, rng, &format!("{name}.score"), dim, 1, 1, 1, 1, false),
            mix: Conv::new(store, rng, &format!("{name}.mix"), dim, dim, 1, 1, 1, true),
            proj: Conv::new(store, rng, &format!("{name}.proj"), dim, dim, 1, 1, 1, true),
            dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let (_, _, h, w) = tape.value(x).dims4()?;
        let q = self.query.forward(tape, p, x)?;
        let k = self.key.forward(tape, p, x)?;
        let s = self.score.forward(tape, p, q)?;
        let s = tape.scale(s, 1.0 / (self.dim as f64).sqrt());
        let alpha = tape.softmax_spatial(s)?;
        let weighted = tape.mul_channel_gate(q, alpha)?;
        let global = tape.gap(weighted)?;
        let global = tape.scale(global, (h * w) as f64);
        let gk = tape.mul_spatial_vec(k, global)?;
        let mixed = self.mix.forward(tape, p, gk)?;
        let mixed = tape.add(mixed, q)?;
        let out = self.proj.forward(tape, p, mixed)?;
        tape.add(x, out)
    }
}

/// Pixel-attention-guided fusion: a per-pixel gate
/// `σ = sigmoid(⟨embed_p(p), embed_q(q)⟩)` blends `p` toward `q`.
#[derive(Clone, Debug)]
pub struct PagFusion {
    pub embed_p: Conv,
    pub embed_q: Conv,
}

impl PagFusion {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize, embed: usize) -> Self {
        PagFusion {
            embed_p: Conv::new(store, rng, &format!("{name}.embed_p"), channels, embed, 1, 1, 1, false),
            embed_q: Conv::new(store, rng, &format!("{name}.embed_q"), channels, embed, 1, 1, 1, false),
        }
    }

    /// Returns `(fused, gate)`.
    pub fn forward_with_gate(&self, tape: &mut Tape, pb: &Bound, p: Var, q: Var) -> Result<(Var, Var)> {
        if tape.shape(p) != tape.shape(q) {
            return Err(Error::contract(format!(
                "pag_fuse shapes differ: {:?} vs {:?}",
                tape.shape(p),
                tape.shape(q)
            )));
        }
        let ep = self.embed_p.forward(tape, pb, p)?;
        let eq = self.embed_q.forward(tape, pb, q)?;
        let sim = tape.mul(ep, eq)?;
        let sim = tape.sum_channels(sim)?;
        let gate = tape.sigmoid(sim);
        let diff = tape.sub(q, p)?;
        let step = tape.mul_channel_gate(diff, gate)?;
        Ok((tape.add(p, step)?, gate))
    }

    pub fn forward(&self, tape: &mut Tape, pb: &Bound, p: Var, q: Var) -> Result<Var> {
        self.forward_with_gate(tape, pb, p, q).map(|(y, _)| y)
    }
}

/// Pag fusion on plain tensors with a standalone parameter store.
pub fn pag_fuse(store: &ParamStore, fusion: &PagFusion, p: &Tensor, q: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let (pv, qv) = (tape.constant(p.clone()), tape.constant(q.clone()));
    let (y, g) = fusion.forward_with_gate(&mut tape, &b, pv, qv)?;
    Ok((tape.value(y).clone(), tape.value(g).clone()))
}

/// Which semantics a detector head reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DetectorRole {
    /// All forgery semantics, binary.
    All = 1,
    /// Unique forgery semantics, real plus one class per method.
    Unique = 2,
    /// Common forgery semantics, binary.
    Common = 3,
}

/// Global average pool followed by a linear layer.
#[derive(Clone, Debug)]
pub struct DetectorHead {
    pub role: DetectorRole,
    pub class_count: usize,
    pub features: usize,
    pub linear: Linear,
}

impl DetectorHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        role: DetectorRole,
        features: usize,
        class_count: usize,
    ) -> Result<Self> {
        if class_count < 2 {
            return Err(Error::contract(format!("detector needs ≥ 2 classes, got {class_count}")));
        }
        Ok(DetectorHead {
            role,
            class_count,
            features,
            linear: Linear::new(store, rng, name, features, class_count),
        })
    }

    /// Unnormalized logits `N×K`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, features: Var) -> Result<Var> {
        let c = tape.shape(features).get(1).copied().unwrap_or(0);
        if c != self.features {
            return Err(Error::contract(format!(
                "detector {:?} expects {} channels, got {c}",
                self.role, self.features
            )));
        }
        let pooled = tape.gap(features)?;
        self.linear.forward(tape, p, pooled)
    }
}

/// Two-layer convolutional stack mapping all forgery semantics onto one of
/// its halves.
#[derive(Clone, Debug)]
pub struct Disentangler {
    pub hidden: ConvNormAct,
    pub out: Conv,
}

impl Disentangler {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        Disentangler {
            hidden: ConvNormAct::new(store, rng, &format!("{name}.hidden"), cin, cin, 3, 1),
            out: Conv::new(store, rng, &format!("{name}.out"), cin, cout, 3, 1, 1, true),
        }
    }

    /// Returns `(hidden activation, output)`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let h = self.hidden.forward(tape, p, x)?;
        let y = self.out.forward(tape, p, h)?;
        Ok((h, y))
    }
}

/// Row-wise softmax of an `N×K` logits tensor.
pub fn softmax_rows(logits: &Tensor) -> Vec<Vec<f32>> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let e: Vec<f32> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f32 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}
