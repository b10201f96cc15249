//! AUC, the intra-domain / held-out-method protocol, Grad-CAM saliency and
//! report files.

mod auc;
mod cam;
mod report;

pub use auc::auc;
pub use cam::{cam_from_weights, grad_cam, GradCam, DEFAULT_LAYER};
pub use report::{emit_report, AucEntry, EvalReport, ReportFormats, SPLIT_HELD_OUT, SPLIT_INTRA};

use crate::corpus::{CorpusManifest, Dataset, Split, REAL_LABEL};
use crate::error::{Error, Result};
use crate::gradcore::{Tape, Tensor};
use crate::losses::{l1_value, FAKE};
use crate::model::{Stage1Model, Stage2Model};
use crate::train::TrainConfig;

/// Detector names used in reports.
pub const DET_COMMON: &str = "fc_det3";
pub const DET_ALL: &str = "fa_det1";

const CHUNK: usize = 64;

fn fake_probability(logits: &Tensor) -> Result<Vec<f64>> {
    let (n, k) = logits.dims2()?;
    let d = logits.data();
    Ok((0..n)
        .map(|i| {
            let row = &d[i * k..(i + 1) * k];
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let z: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
            (row[FAKE] as f64 - m).exp() / z
        })
        .collect())
}

fn chunks(rows: &[usize]) -> impl Iterator<Item = &[usize]> {
    rows.chunks(CHUNK)
}

/// Fake probability from Detector3 on `Fc`.
pub fn score_common(model: &Stage2Model, data: &Dataset, rows: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows.len());
    for part in chunks(rows) {
        let (bundle, _) = model.encoder2_forward(&data.images.select(part), &data.highpass.select(part))?;
        out.extend(fake_probability(&model.detector3_logits(&bundle.common)?)?);
    }
    Ok(out)
}

/// Fake probability from Detector1 on `Fa`.
pub fn score_all(model: &Stage1Model, data: &Dataset, rows: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows.len());
    for part in chunks(rows) {
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape);
        let x = tape.constant(data.images.select(part));
        let xh = tape.constant(data.highpass.select(part));
        let fa = model.forgery.forward(&mut tape, &p, x, xh)?;
        let logits = model.detector.forward(&mut tape, &p, fa)?;
        out.extend(fake_probability(tape.value(logits))?);
    }
    Ok(out)
}

/// Mean self-reconstruction L1 of Decoder1 over `rows`.
pub fn self_reconstruction_l1(model: &Stage1Model, data: &Dataset, rows: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for part in chunks(rows) {
        let x = data.images.select(part);
        let b = model.encoder1_forward(&x, &data.highpass.select(part))?;
        total += l1_value(&x, &model.decoder1_forward(&b.content, &b.forgery)?)? * part.len() as f64;
    }
    Ok(total / rows.len() as f64)
}

fn auc_of(scores: &[f64], data: &Dataset, rows: &[usize]) -> Result<f64> {
    let positive: Vec<bool> = rows.iter().map(|&i| data.items[i].y == FAKE).collect();
    auc(scores, &positive)
}

/// FNV-1a over the canonical JSON of a config, as 16 hex digits.
pub fn config_hash(cfg: &TrainConfig) -> String {
    let bytes = serde_json::to_vec(cfg).unwrap_or_default();
    let h = bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3));
    format!("{h:016x}")
}

/// Images for the protocol: `intra` holds the test split of the training
/// methods plus test reals; `held_out` holds every image of the held-out
/// method plus the same test reals.
pub struct ProtocolData {
    pub intra: Dataset,
    pub held_out: Option<(String, Dataset)>,
}

impl ProtocolData {
    pub fn load(manifest: &CorpusManifest, train_methods: &[String], held_out: Option<&str>, size: usize) -> Result<Self> {
        let intra_m = manifest.filter(|r| {
            r.split == Split::Test && (r.method == REAL_LABEL || train_methods.contains(&r.method))
        });
        let intra = Dataset::load(&intra_m, None, train_methods, size)?;
        let held_out = match held_out {
            None => None,
            Some(m) => {
                if train_methods.iter().any(|t| t == m) {
                    return Err(Error::Config(format!("held-out method {m} was used for training")));
                }
                let sel = manifest.filter(|r| r.method == m || (r.method == REAL_LABEL && r.split == Split::Test));
                if sel.count(None, false) == 0 {
                    return Err(Error::Precondition(format!("manifest has no images of held-out method {m}")));
                }
                Some((m.to_string(), Dataset::load(&sel, None, train_methods, size)?))
            }
        };
        Ok(ProtocolData { intra, held_out })
    }
}

/// Intra-domain per-method AUC and held-out-method AUC for both detectors.
pub fn run_protocol(stage1: &Stage1Model, stage2: &Stage2Model, data: &ProtocolData, cfg: (&TrainConfig, &TrainConfig)) -> Result<EvalReport> {
    let mut entries = Vec::new();
    let intra = &data.intra;
    let all_rows: Vec<usize> = (0..intra.len()).collect();
    let sc = score_common(stage2, intra, &all_rows)?;
    let sa = score_all(stage1, intra, &all_rows)?;
    for (k, method) in intra.methods.iter().enumerate() {
        let rows = intra.indices(|it| it.y != FAKE || it.method_class == k + 1);
        for (det, scores) in [(DET_COMMON, &sc), (DET_ALL, &sa)] {
            let s: Vec<f64> = rows.iter().map(|&i| scores[i]).collect();
            entries.push(AucEntry {
                detector: det.into(),
                method: method.clone(),
                split: SPLIT_INTRA.into(),
                auc: auc_of(&s, intra, &rows)?,
            });
        }
    }
    if let Some((method, held)) = &data.held_out {
        let rows: Vec<usize> = (0..held.len()).collect();
        for det in [DET_COMMON, DET_ALL] {
            let s = if det == DET_COMMON {
                score_common(stage2, held, &rows)?
            } else {
                score_all(stage1, held, &rows)?
            };
            entries.push(AucEntry {
                detector: det.into(),
                method: method.clone(),
                split: SPLIT_HELD_OUT.into(),
                auc: auc_of(&s, held, &rows)?,
            });
        }
    }
    Ok(EvalReport {
        seed: cfg.1.seed,
        stage1_config: config_hash(cfg.0),
        stage2_config: config_hash(cfg.1),
        train_methods: intra.methods.clone(),
        held_out: data.held_out.as_ref().map(|(m, _)| m.clone()),
        entries,
    })
}
