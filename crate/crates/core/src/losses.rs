//! Classification, reconstruction and contrastive loss terms, and their
//! weighted stage totals.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{Real, Tape, Tensor, Var};

/// Binary label of a fake image.
pub const FAKE: usize = 0;
/// Binary label of a real image; also the method class of real images.
pub const REAL: usize = 1;
pub const REAL_METHOD: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub rho1: f64,
    pub rho2: f64,
    pub rho3: f64,
    pub rho4: f64,
    pub rho5: f64,
    pub rho6: f64,
    /// Contrastive margin `a`.
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rho1: 1.0,
            rho2: 0.3,
            rho3: 0.1,
            rho4: 1.0,
            rho5: 0.05,
            rho6: 0.3,
            margin: 3.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.rho1, self.rho2, self.rho3, self.rho4, self.rho5, self.rho6, self.margin];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and ≥ 0: {self:?}")));
        }
        Ok(())
    }
}

/// Per-image labels: binary `y` and method class `S` (0 = real).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Labels {
    pub y: Vec<usize>,
    pub method: Vec<usize>,
}

impl Labels {
    pub fn new(y: Vec<usize>, method: Vec<usize>) -> Result<Self> {
        if y.len() != method.len() {
            return Err(Error::contract("label vectors differ in length"));
        }
        for (&b, &s) in y.iter().zip(&method) {
            if (b == REAL) != (s == REAL_METHOD) || b > 1 {
                return Err(Error::contract(format!("inconsistent labels y={b}, S={s}")));
            }
        }
        Ok(Labels { y, method })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

pub fn cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Mean absolute difference.
pub fn l1_loss<T: Real>(tape: &mut Tape<T>, target: Var, recon: Var) -> Result<Var> {
    let d = tape.sub(target, recon)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

pub fn cross_entropy_value(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.cast::<f64>());
    let v = tape.cross_entropy(l, labels)?;
    Ok(tape.value(v).item())
}

pub fn l1_value(target: &Tensor, recon: &Tensor) -> Result<f64> {
    if target.shape() != recon.shape() {
        return Err(Error::contract(format!(
            "l1 shape mismatch {:?} vs {:?}",
            target.shape(),
            recon.shape()
        )));
    }
    let s: f64 = target
        .data()
        .iter()
        .zip(recon.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    Ok(s / target.len() as f64)
}

/// Which semantics and which anchor class a contrastive tuple covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    FakeUnique,
    FakeCommon,
    RealUnique,
    RealCommon,
}

impl Role {
    pub fn tag(self) -> &'static str {
        match self {
            Role::FakeUnique => "0u",
            Role::FakeCommon => "0c",
            Role::RealUnique => "1u",
            Role::RealCommon => "1c",
        }
    }

    pub fn is_unique(self) -> bool {
        matches!(self, Role::FakeUnique | Role::RealUnique)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveTuple {
    pub role: Role,
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

/// Batch indices of one sampled tuple.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TupleIndex {
    pub role: Role,
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `max(0, a + ‖f^a − f^+‖ − ‖f^a − f^−‖)`.
pub fn contrastive(t: &ContrastiveTuple, margin: f64) -> f64 {
    (margin + euclid(&t.anchor, &t.positive) - euclid(&t.anchor, &t.negative)).max(0.0)
}

/// Draw one positive and one negative for every anchor and semantics kind.
///
/// Real anchors take positives from other reals and negatives from fakes;
/// fake anchors take positives from other fakes of the same method and
/// negatives from reals. Anchors without a valid partner are skipped.
pub fn sample_tuples<R: Rng>(labels: &Labels, rng: &mut R) -> Vec<TupleIndex> {
    let n = labels.len();
    let reals: Vec<usize> = (0..n).filter(|&i| labels.y[i] == REAL).collect();
    let fakes: Vec<usize> = (0..n).filter(|&i| labels.y[i] != REAL).collect();
    let mut out = Vec::with_capacity(2 * n);
    let mut skipped = 0;
    for i in 0..n {
        let is_real = labels.y[i] == REAL;
        let positives: Vec<usize> = if is_real {
            reals.iter().copied().filter(|&j| j != i).collect()
        } else {
            fakes
                .iter()
                .copied()
                .filter(|&j| j != i && labels.method[j] == labels.method[i])
                .collect()
        };
        let negatives = if is_real { &fakes } else { &reals };
        let roles = if is_real {
            [Role::RealUnique, Role::RealCommon]
        } else {
            [Role::FakeUnique, Role::FakeCommon]
        };
        for role in roles {
            match (positives.choose(rng), negatives.choose(rng)) {
                (Some(&positive), Some(&negative)) => out.push(TupleIndex {
                    role,
                    anchor: i,
                    positive,
                    negative,
                }),
                _ => skipped += 1,
            }
        }
    }
    if skipped > 0 {
        log::debug!("contrastive sampler skipped {skipped} anchor/role pairs without partners");
    }
    out
}

/// Resolve sampled indices against pooled `N×D` unique/common features.
pub fn materialize(tuples: &[TupleIndex], unique: &Tensor, common: &Tensor) -> Vec<ContrastiveTuple> {
    let row = |t: &Tensor, i: usize| -> Vec<f64> {
        let d = t.shape()[1];
        t.data()[i * d..(i + 1) * d].iter().map(|&v| v as f64).collect()
    };
    tuples
        .iter()
        .map(|t| {
            let src = if t.role.is_unique() { unique } else { common };
            ContrastiveTuple {
                role: t.role,
                anchor: row(src, t.anchor),
                positive: row(src, t.positive),
                negative: row(src, t.negative),
            }
        })
        .collect()
}

/// Mean contrastive loss over `tuples`, on the tape. `unique` and `common`
/// are pooled `N×D` features. Returns `None` for an empty tuple list.
pub fn contrastive_batch<T: Real>(
    tape: &mut Tape<T>,
    unique: Var,
    common: Var,
    tuples: &[TupleIndex],
    margin: f64,
) -> Result<Option<Var>> {
    let mut sums = Vec::new();
    for want_unique in [true, false] {
        let sel: Vec<&TupleIndex> = tuples.iter().filter(|t| t.role.is_unique() == want_unique).collect();
        if sel.is_empty() {
            continue;
        }
        let feats = if want_unique { unique } else { common };
        let a = tape.gather_rows(feats, &sel.iter().map(|t| t.anchor).collect::<Vec<_>>())?;
        let p = tape.gather_rows(feats, &sel.iter().map(|t| t.positive).collect::<Vec<_>>())?;
        let n = tape.gather_rows(feats, &sel.iter().map(|t| t.negative).collect::<Vec<_>>())?;
        let dp = tape.sub(a, p)?;
        let dp = tape.row_norm(dp)?;
        let dn = tape.sub(a, n)?;
        let dn = tape.row_norm(dn)?;
        let gap = tape.sub(dp, dn)?;
        let gap = tape.add_scalar(gap, margin);
        let hinge = tape.relu(gap);
        sums.push(tape.sum(hinge));
    }
    let Some(&first) = sums.first() else {
        return Ok(None);
    };
    let mut total = first;
    for &s in &sums[1..] {
        total = tape.add(total, s)?;
    }
    Ok(Some(tape.scale(total, 1.0 / tuples.len() as f64)))
}

/// `Σ wᵢ·termᵢ` on the tape.
pub fn weighted_sum<T: Real>(tape: &mut Tape<T>, terms: &[(Var, f64)]) -> Result<Var> {
    let (&(v0, w0), rest) = terms
        .split_first()
        .ok_or_else(|| Error::contract("weighted sum of no terms"))?;
    let mut acc = tape.scale(v0, w0);
    for &(v, w) in rest {
        let s = tape.scale(v, w);
        acc = tape.add(acc, s)?;
    }
    Ok(acc)
}

/// Stage-1 objective `ρ1·L_cls + ρ2·L_rec`.
pub fn total_stage1(cls: f64, rec: f64, w: &LossWeights) -> f64 {
    ascending_sum([w.rho1 * cls, w.rho2 * rec])
}

/// Stage-2 objective `(ρ3·L_cls1 + ρ4·L_cls2) + ρ5·L_con + ρ6·L_rec`.
pub fn total_stage2(cls_unique: f64, cls_common: f64, con: f64, rec: f64, w: &LossWeights) -> f64 {
    ascending_sum([w.rho3 * cls_unique, w.rho4 * cls_common, w.rho5 * con, w.rho6 * rec])
}

/// Sum smallest magnitudes first.
fn ascending_sum<const N: usize>(mut terms: [f64; N]) -> f64 {
    terms.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    terms.iter().sum()
}
