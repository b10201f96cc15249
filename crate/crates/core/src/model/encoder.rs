use rand_chacha::ChaCha8Rng;

use super::blocks::{AdditiveAttention, PagFusion};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::filters::Mhfe;
use crate::gradcore::nn::{ConvNormAct, SeparableConv};
use crate::gradcore::{Bound, ParamStore, Tape, Var};

/// How high-frequency features enter the RGB stream at one scale.
#[derive(Clone, Debug)]
pub enum Fusion {
    Pag(PagFusion),
    Add,
}

impl Fusion {
    fn forward(&self, tape: &mut Tape, p: &Bound, rgb: Var, hf: Var) -> Result<Var> {
        match self {
            Fusion::Pag(f) => f.forward(tape, p, rgb, hf),
            Fusion::Add => tape.add(rgb, hf),
        }
    }
}

/// RGB and high-frequency branch producing all forgery semantics `Fa`.
///
/// Separable-conv stages run at scales `S/2^ℓ`; the multi-scale extractor
/// supplies one high-frequency map per scale, fused into the RGB stream
/// before the next stage. All parameters live under `forgery.`.
#[derive(Clone, Debug)]
pub struct ForgeryBranch {
    stem: ConvNormAct,
    stages: Vec<SeparableConv>,
    mhfe: Option<Mhfe>,
    fusions: Vec<Fusion>,
    tail: Vec<SeparableConv>,
}

pub const FORGERY_PREFIX: &str = "forgery.";

impl ForgeryBranch {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        let levels = cfg.mhfe_levels;
        let width = |l: usize| cfg.base_width << l;
        let stem = ConvNormAct::new(store, rng, "forgery.stem", 3, width(0), 3, 1);
        let stages = (1..levels)
            .map(|l| SeparableConv::new(store, rng, &format!("forgery.stage{l}"), width(l - 1), width(l), 2))
            .collect();

        let (mhfe, fusions) = if cfg.use_highfreq {
            let hf_levels = if cfg.use_mhfe { levels } else { 1 };
            let widths: Vec<usize> = (0..hf_levels).map(width).collect();
            let mhfe = Mhfe::new(store, rng, "forgery.mhfe", 3, &widths, cfg.ahf_size, cfg.ahf_sigma)?;
            let fusions = (0..hf_levels)
                .map(|l| {
                    if cfg.use_mhff {
                        Fusion::Pag(PagFusion::new(store, rng, &format!("forgery.fuse{l}"), width(l), cfg.embed_dim))
                    } else {
                        Fusion::Add
                    }
                })
                .collect();
            (Some(mhfe), fusions)
        } else {
            (None, Vec::new())
        };

        // Reach scale S/4 with F channels.
        let last = levels - 1;
        let mut tail = Vec::new();
        let mut cin = width(last);
        if last < 2 {
            let steps = 2 - last;
            for j in 0..steps {
                let cout = if j + 1 == steps { cfg.forgery_channels } else { cin * 2 };
                tail.push(SeparableConv::new(store, rng, &format!("forgery.tail{j}"), cin, cout, 2));
                cin = cout;
            }
        } else if last == 2 {
            tail.push(SeparableConv::new(store, rng, "forgery.tail0", cin, cfg.forgery_channels, 1));
        } else {
            return Err(Error::Config(format!("mhfe_levels {levels} exceeds 3")));
        }
        Ok(ForgeryBranch {
            stem,
            stages,
            mhfe,
            fusions,
            tail,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, xh: Var) -> Result<Var> {
        let hf = match &self.mhfe {
            Some(m) => m.forward(tape, p, xh)?,
            None => Vec::new(),
        };
        let mut y = self.stem.forward(tape, p, x)?;
        for l in 0..=self.stages.len() {
            if l > 0 {
                y = self.stages[l - 1].forward(tape, p, y)?;
            }
            if let (Some(&h), Some(f)) = (hf.get(l), self.fusions.get(l)) {
                y = f.forward(tape, p, y, h)?;
            }
        }
        for t in &self.tail {
            y = t.forward(tape, p, y)?;
        }
        Ok(y)
    }
}

/// Content branch producing `C`: a separable-conv stem down to `S/4`
/// followed by one additive-attention block. Parameters under `content.`.
#[derive(Clone, Debug)]
pub struct ContentBranch {
    stem: ConvNormAct,
    down: SeparableConv,
    attention: AdditiveAttention,
}

impl ContentBranch {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let w = cfg.base_width;
        ContentBranch {
            stem: ConvNormAct::new(store, rng, "content.stem", 3, w, 3, 2),
            down: SeparableConv::new(store, rng, "content.down", w, cfg.content_channels, 2),
            attention: AdditiveAttention::new(store, rng, "content.attn", cfg.content_channels),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = self.stem.forward(tape, p, x)?;
        let y = self.down.forward(tape, p, y)?;
        self.attention.forward(tape, p, y)
    }
}
