//! The stage-1 and stage-2 networks as scaled-down analogues: content and
//! forgery encoders, pixel-attention fusion, the two decoders, and the
//! three detector heads.

mod blocks;
mod decoder;
mod encoder;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use blocks::{pag_fuse, softmax_rows, AdditiveAttention, DetectorHead, DetectorRole, Disentangler, PagFusion};
pub use decoder::{Decoder1, Decoder2};
pub use encoder::{ContentBranch, ForgeryBranch, Fusion, FORGERY_PREFIX};

use crate::error::{Error, Result};
use crate::gradcore::{Bound, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub content_channels: usize,
    /// Channels of `Fa`; `Fc` and `Fu` take half each.
    pub forgery_channels: usize,
    pub mhfe_levels: usize,
    pub use_highfreq: bool,
    pub use_mhfe: bool,
    pub use_mhff: bool,
    pub base_width: usize,
    pub decoder_width: usize,
    pub embed_dim: usize,
    pub ahf_size: usize,
    pub ahf_sigma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            content_channels: 32,
            forgery_channels: 32,
            mhfe_levels: 2,
            use_highfreq: true,
            use_mhfe: true,
            use_mhff: true,
            base_width: 8,
            decoder_width: 16,
            embed_dim: 8,
            ahf_size: 3,
            ahf_sigma: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.forgery_channels == 0 || !self.forgery_channels.is_multiple_of(2) {
            return bad(format!("forgery_channels must be even and > 0, got {}", self.forgery_channels));
        }
        if !(1..=3).contains(&self.mhfe_levels) {
            return bad(format!("mhfe_levels must be in 1..=3, got {}", self.mhfe_levels));
        }
        let div = 4usize.max(1 << self.mhfe_levels);
        if self.image_size == 0 || !self.image_size.is_multiple_of(div) {
            return bad(format!("image_size {} must be divisible by {div}", self.image_size));
        }
        if self.ahf_size < 3 || self.ahf_size.is_multiple_of(2) {
            return bad(format!("ahf_size must be odd and ≥ 3, got {}", self.ahf_size));
        }
        if self.ahf_sigma.is_nan() || self.ahf_sigma <= 0.0 {
            return bad("ahf_sigma must be > 0".into());
        }
        for (name, v) in [
            ("content_channels", self.content_channels),
            ("base_width", self.base_width),
            ("decoder_width", self.decoder_width),
            ("embed_dim", self.embed_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be > 0"));
            }
        }
        Ok(())
    }

    /// Spatial size of `C` and `Fa`.
    pub fn semantic_size(&self) -> usize {
        self.image_size / 4
    }
}

/// Stage-1 decoupled semantics.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticBundle1 {
    pub content: Tensor,
    pub forgery: Tensor,
}

/// Stage-2 split of the forgery semantics.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticBundle2 {
    pub unique: Tensor,
    pub common: Tensor,
}

/// Select batch rows of an NCHW (or N×F) tensor on the tape.
pub fn gather_batch(tape: &mut Tape, x: Var, rows: &[usize]) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let inner: usize = shape[1..].iter().product();
    let flat = tape.reshape(x, &[shape[0], inner])?;
    let picked = tape.gather_rows(flat, rows)?;
    let mut out = shape;
    out[0] = rows.len();
    tape.reshape(picked, &out)
}

/// Split `Fa = [Fc, Fu]` along channels.
pub fn split_forgery(fa: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let v = tape.constant(fa.clone());
    let half = fa.shape()[1] / 2;
    let c = tape.slice_channels(v, 0, half)?;
    let u = tape.slice_channels(v, half, fa.shape()[1] - half)?;
    Ok((tape.value(c).clone(), tape.value(u).clone()))
}

/// Channel concatenation `[Fc, Fu]`.
pub fn concat_forgery(common: &Tensor, unique: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let c = tape.constant(common.clone());
    let u = tape.constant(unique.clone());
    let v = tape.concat(&[c, u])?;
    Ok(tape.value(v).clone())
}

fn check_images(tape: &Tape, cfg: &ModelConfig, vars: &[Var]) -> Result<()> {
    let s = cfg.image_size;
    for &v in vars {
        let shape = tape.shape(v);
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::contract(format!("expected N×3×{s}×{s} images, got {shape:?}")));
        }
    }
    if tape.shape(vars[0])[0] != tape.shape(vars[vars.len() - 1])[0] {
        return Err(Error::contract("image batches differ in size"));
    }
    Ok(())
}

/// Encoder1, Decoder1 and Detector1.
#[derive(Clone, Debug)]
pub struct Stage1Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub forgery: ForgeryBranch,
    pub content: ContentBranch,
    pub decoder: Decoder1,
    pub detector: DetectorHead,
}

impl Stage1Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let forgery = ForgeryBranch::new(&mut store, &mut rng, cfg)?;
        let content = ContentBranch::new(&mut store, &mut rng, cfg);
        let decoder = Decoder1::new(&mut store, &mut rng, cfg);
        let detector = DetectorHead::new(&mut store, &mut rng, "det1", DetectorRole::All, cfg.forgery_channels, 2)?;
        Ok(Stage1Model {
            cfg: cfg.clone(),
            store,
            forgery,
            content,
            decoder,
            detector,
        })
    }

    /// `(C, Fa)` on the tape.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, x: Var, xh: Var) -> Result<(Var, Var)> {
        check_images(tape, &self.cfg, &[x, xh])?;
        let fa = self.forgery.forward(tape, p, x, xh)?;
        let c = self.content.forward(tape, p, x)?;
        Ok((c, fa))
    }

    pub fn encoder1_forward(&self, x: &Tensor, xh: &Tensor) -> Result<SemanticBundle1> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let (xv, hv) = (tape.constant(x.clone()), tape.constant(xh.clone()));
        let (c, fa) = self.encode(&mut tape, &p, xv, hv)?;
        Ok(SemanticBundle1 {
            content: tape.value(c).clone(),
            forgery: tape.value(fa).clone(),
        })
    }

    /// `Decoder1(C_{i1}, Fa_{i2})`: self-reconstruction when both come from
    /// the same image, cross-reconstruction otherwise.
    pub fn decoder1_forward(&self, content: &Tensor, forgery: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let (c, f) = (tape.constant(content.clone()), tape.constant(forgery.clone()));
        let y = self.decoder.forward(&mut tape, &p, c, f)?;
        Ok(tape.value(y).clone())
    }

    pub fn detector1_logits(&self, forgery: &Tensor) -> Result<Tensor> {
        detector_forward(&self.store, &self.detector, forgery)
    }
}

/// Named intermediate activations of the stage-2 encoder.
#[derive(Clone, Copy, Debug)]
pub struct Stage2Taps {
    pub fa: Var,
    pub unique_hidden: Var,
    pub unique: Var,
    pub common_hidden: Var,
    pub common: Var,
}

impl Stage2Taps {
    pub const LAYERS: [&'static str; 5] = ["fa", "fu_hidden", "fu_out", "fc_hidden", "fc_out"];

    pub fn layer(&self, name: &str) -> Option<Var> {
        Some(match name {
            "fa" => self.fa,
            "fu_hidden" => self.unique_hidden,
            "fu_out" => self.unique,
            "fc_hidden" => self.common_hidden,
            "fc_out" => self.common,
            _ => return None,
        })
    }
}

/// Encoder2 (embedded forgery branch + disentanglers), Decoder2, Detector2
/// and Detector3.
#[derive(Clone, Debug)]
pub struct Stage2Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub forgery: ForgeryBranch,
    pub unique: Disentangler,
    pub common: Disentangler,
    pub decoder: Decoder2,
    pub detector_unique: DetectorHead,
    pub detector_common: DetectorHead,
    embedded_loaded: bool,
}

impl Stage2Model {
    /// `method_classes` is the number of forgery methods `M`; Detector2
    /// predicts `M + 1` classes.
    pub fn new(cfg: &ModelConfig, method_classes: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
        let mut store = ParamStore::new();
        let forgery = ForgeryBranch::new(&mut store, &mut rng, cfg)?;
        let f = cfg.forgery_channels;
        let unique = Disentangler::new(&mut store, &mut rng, "enc2.unique", f, f / 2);
        let common = Disentangler::new(&mut store, &mut rng, "enc2.common", f, f / 2);
        let decoder = Decoder2::new(&mut store, &mut rng, cfg);
        let detector_unique =
            DetectorHead::new(&mut store, &mut rng, "det2", DetectorRole::Unique, f / 2, method_classes + 1)?;
        let detector_common = DetectorHead::new(&mut store, &mut rng, "det3", DetectorRole::Common, f / 2, 2)?;
        Ok(Stage2Model {
            cfg: cfg.clone(),
            store,
            forgery,
            unique,
            common,
            decoder,
            detector_unique,
            detector_common,
            embedded_loaded: false,
        })
    }

    /// Copy the stage-1 forgery branch into the embedded branch.
    pub fn load_embedded(&mut self, stage1: &ParamStore, freeze: bool) -> Result<()> {
        let n = self.store.copy_matching(stage1, FORGERY_PREFIX)?;
        if n == 0 {
            return Err(Error::Incompatible("stage-1 store has no forgery branch".into()));
        }
        self.store.set_trainable(FORGERY_PREFIX, !freeze);
        self.embedded_loaded = true;
        Ok(())
    }

    /// Mark the embedded branch as loaded (restoring a stage-2 checkpoint).
    pub fn mark_loaded(&mut self, freeze: bool) {
        self.store.set_trainable(FORGERY_PREFIX, !freeze);
        self.embedded_loaded = true;
    }

    pub fn embedded_loaded(&self) -> bool {
        self.embedded_loaded
    }

    pub fn method_classes(&self) -> usize {
        self.detector_unique.class_count - 1
    }

    pub fn encode(&self, tape: &mut Tape, p: &Bound, x: Var, xh: Var) -> Result<Stage2Taps> {
        if !self.embedded_loaded {
            return Err(Error::Precondition("stage-1 weights have not been loaded into Encoder2".into()));
        }
        check_images(tape, &self.cfg, &[x, xh])?;
        let fa = self.forgery.forward(tape, p, x, xh)?;
        let (unique_hidden, unique) = self.unique.forward(tape, p, fa)?;
        let (common_hidden, common) = self.common.forward(tape, p, fa)?;
        Ok(Stage2Taps {
            fa,
            unique_hidden,
            unique,
            common_hidden,
            common,
        })
    }

    /// `(Fu, Fc)` plus the internal `Fa`.
    pub fn encoder2_forward(&self, x: &Tensor, xh: &Tensor) -> Result<(SemanticBundle2, Tensor)> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let (xv, hv) = (tape.constant(x.clone()), tape.constant(xh.clone()));
        let taps = self.encode(&mut tape, &p, xv, hv)?;
        Ok((
            SemanticBundle2 {
                unique: tape.value(taps.unique).clone(),
                common: tape.value(taps.common).clone(),
            },
            tape.value(taps.fa).clone(),
        ))
    }

    /// `Decoder2(Fc, Fu)`, shaped like `Fa`.
    pub fn decoder2_forward(&self, common: &Tensor, unique: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let (c, u) = (tape.constant(common.clone()), tape.constant(unique.clone()));
        let y = self.decoder.forward(&mut tape, &p, c, u)?;
        Ok(tape.value(y).clone())
    }

    pub fn detector2_logits(&self, unique: &Tensor) -> Result<Tensor> {
        detector_forward(&self.store, &self.detector_unique, unique)
    }

    pub fn detector3_logits(&self, common: &Tensor) -> Result<Tensor> {
        detector_forward(&self.store, &self.detector_common, common)
    }
}

/// Logits of a detector head on plain features.
pub fn detector_forward(store: &ParamStore, head: &DetectorHead, features: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let f = tape.constant(features.clone());
    let y = head.forward(&mut tape, &p, f)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let odd = ModelConfig {
            forgery_channels: 31,
            ..Default::default()
        };
        assert!(odd.validate().is_err());
        let size = ModelConfig {
            image_size: 30,
            ..Default::default()
        };
        assert!(size.validate().is_err());
    }

    #[test]
    fn split_concat_roundtrip() {
        let fa = Tensor::from_fn(&[2, 8, 3, 3], |i| i as f32);
        let (c, u) = split_forgery(&fa).unwrap();
        assert_eq!(c.shape(), &[2, 4, 3, 3]);
        assert_eq!(concat_forgery(&c, &u).unwrap(), fa);
    }

    #[test]
    fn stage2_requires_stage1_weights() {
        let cfg = ModelConfig {
            image_size: 16,
            ..Default::default()
        };
        let m = Stage2Model::new(&cfg, 2, 0).unwrap();
        let x = Tensor::zeros(&[1, 3, 16, 16]);
        assert!(matches!(m.encoder2_forward(&x, &x), Err(Error::Precondition(_))));
    }
}
