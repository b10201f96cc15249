use rand_chacha::ChaCha8Rng;

use super::blocks::AdditiveAttention;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::gradcore::nn::{Conv, ConvNormAct};
use crate::gradcore::{Bound, ParamStore, Resample, Tape, Var};

/// Image decoder from `(C, Fa)`.
///
/// The content channel is conv + attention, the forgery channel conv only;
/// both are projected to a common width, added, and upsampled twice back to
/// the input resolution. Output values are unbounded.
#[derive(Clone, Debug)]
pub struct Decoder1 {
    content_in: ConvNormAct,
    content_attn: AdditiveAttention,
    content_proj: Conv,
    forgery_in: ConvNormAct,
    forgery_proj: Conv,
    up1: ConvNormAct,
    up2: ConvNormAct,
    out: Conv,
    content_channels: usize,
    forgery_channels: usize,
}

impl Decoder1 {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.decoder_width;
        let half = (d / 2).max(1);
        Decoder1 {
            content_in: ConvNormAct::new(store, rng, "dec1.content.in", cfg.content_channels, d, 3, 1),
            content_attn: AdditiveAttention::new(store, rng, "dec1.content.attn", d),
            content_proj: Conv::new(store, rng, "dec1.content.proj", d, d, 1, 1, 1, true),
            forgery_in: ConvNormAct::new(store, rng, "dec1.forgery.in", cfg.forgery_channels, d, 3, 1),
            forgery_proj: Conv::new(store, rng, "dec1.forgery.proj", d, d, 1, 1, 1, true),
            up1: ConvNormAct::new(store, rng, "dec1.up1", d, half, 3, 1),
            up2: ConvNormAct::new(store, rng, "dec1.up2", half, half, 3, 1),
            out: Conv::new(store, rng, "dec1.out", half, 3, 3, 1, 1, true),
            content_channels: cfg.content_channels,
            forgery_channels: cfg.forgery_channels,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, content: Var, forgery: Var) -> Result<Var> {
        let (cs, fs) = (tape.shape(content).to_vec(), tape.shape(forgery).to_vec());
        if cs.len() != 4 || fs.len() != 4 || cs[0] != fs[0] || cs[2..] != fs[2..] {
            return Err(Error::contract(format!("decoder1 inputs {cs:?} and {fs:?} disagree")));
        }
        if cs[1] != self.content_channels || fs[1] != self.forgery_channels {
            return Err(Error::contract(format!("decoder1 channel mismatch {cs:?} / {fs:?}")));
        }
        let c = self.content_in.forward(tape, p, content)?;
        let c = self.content_attn.forward(tape, p, c)?;
        let c = self.content_proj.forward(tape, p, c)?;
        let f = self.forgery_in.forward(tape, p, forgery)?;
        let f = self.forgery_proj.forward(tape, p, f)?;
        let y = tape.add(c, f)?;
        let y = tape.pool_resize(y, Resample::UpsampleNearest, 2)?;
        let y = self.up1.forward(tape, p, y)?;
        let y = tape.pool_resize(y, Resample::UpsampleNearest, 2)?;
        let y = self.up2.forward(tape, p, y)?;
        self.out.forward(tape, p, y)
    }
}

/// Semantics decoder from `(Fc, Fu)` back to the shape of `Fa`; two
/// conv-only channels merged by concatenation.
#[derive(Clone, Debug)]
pub struct Decoder2 {
    common_in: Conv,
    unique_in: Conv,
    merge: Conv,
    out: Conv,
    half: usize,
}

impl Decoder2 {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let half = cfg.forgery_channels / 2;
        let h = half.max(4);
        Decoder2 {
            common_in: Conv::new(store, rng, "dec2.common", half, h, 3, 1, 1, true),
            unique_in: Conv::new(store, rng, "dec2.unique", half, h, 3, 1, 1, true),
            merge: Conv::new(store, rng, "dec2.merge", 2 * h, h, 3, 1, 1, true),
            out: Conv::new(store, rng, "dec2.out", h, cfg.forgery_channels, 3, 1, 1, true),
            half,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, common: Var, unique: Var) -> Result<Var> {
        for v in [common, unique] {
            if tape.shape(v).get(1) != Some(&self.half) {
                return Err(Error::contract(format!(
                    "decoder2 expects {} channels, got {:?}",
                    self.half,
                    tape.shape(v)
                )));
            }
        }
        let a = self.common_in.forward(tape, p, common)?;
        let a = tape.relu(a);
        let b = self.unique_in.forward(tape, p, unique)?;
        let b = tape.relu(b);
        let y = tape.concat(&[a, b])?;
        let y = self.merge.forward(tape, p, y)?;
        let y = tape.relu(y);
        self.out.forward(tape, p, y)
    }
}
