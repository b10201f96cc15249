use forgesem::gradcore::{Activation, Real, Resample, Tape, Tensor, Var};
use forgesem::losses::{contrastive_batch, cross_entropy, l1_loss, sample_tuples, weighted_sum, Labels, LossWeights};
use forgesem::Result;

use super::{away_from_zero, random_tensor, rng};

type Forward<T> = Box<dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>>;

pub struct Case<T: Real> {
    pub name: &'static str,
    pub inputs: Vec<Tensor<T>>,
    pub f: Forward<T>,
}

fn case<T: Real>(name: &'static str, inputs: Vec<Tensor<T>>, f: impl Fn(&mut Tape<T>, &[Var]) -> Result<Var> + 'static) -> Case<T> {
    Case {
        name,
        inputs,
        f: Box::new(f),
    }
}

/// Offsets bounded away from zero so L1 terms stay off their kink.
fn shifted<T: Real>(r: &mut rand_chacha::ChaCha8Rng, base: &Tensor<T>) -> Tensor<T> {
    let off: Tensor<T> = away_from_zero(r, base.shape());
    base.zip_map(&off, |a, b| a + b).unwrap()
}

/// Every tape primitive.
pub fn primitive_cases<T: Real>() -> Vec<Case<T>> {
    let mut r = rng(11);
    let x4 = |r: &mut _, s: &[usize]| random_tensor::<T>(r, s, -1.0, 1.0);
    let mut v = Vec::new();
    v.push(case(
        "conv2d",
        vec![x4(&mut r, &[2, 3, 5, 5]), x4(&mut r, &[4, 3, 3, 3]), x4(&mut r, &[4])],
        |t, a| t.conv2d(a[0], a[1], Some(a[2]), 1, 1, 1),
    ));
    v.push(case(
        "conv2d_strided_grouped",
        vec![x4(&mut r, &[2, 4, 6, 6]), x4(&mut r, &[4, 1, 3, 3])],
        |t, a| t.conv2d(a[0], a[1], None, 2, 1, 4),
    ));
    v.push(case(
        "conv2d_pointwise_groups2",
        vec![x4(&mut r, &[1, 4, 3, 3]), x4(&mut r, &[6, 2, 1, 1]), x4(&mut r, &[6])],
        |t, a| t.conv2d(a[0], a[1], Some(a[2]), 1, 0, 2),
    ));
    v.push(case("add", vec![x4(&mut r, &[2, 3]), x4(&mut r, &[2, 3])], |t, a| t.add(a[0], a[1])));
    v.push(case("sub", vec![x4(&mut r, &[2, 3]), x4(&mut r, &[2, 3])], |t, a| t.sub(a[0], a[1])));
    v.push(case("mul", vec![x4(&mut r, &[2, 3]), x4(&mut r, &[2, 3])], |t, a| t.mul(a[0], a[1])));
    v.push(case("scale", vec![x4(&mut r, &[7])], |t, a| Ok(t.scale(a[0], -1.7))));
    v.push(case("add_scalar", vec![x4(&mut r, &[7])], |t, a| Ok(t.add_scalar(a[0], 0.3))));
    v.push(case("relu", vec![away_from_zero(&mut r, &[2, 2, 3, 3])], |t, a| Ok(t.relu(a[0]))));
    v.push(case("sigmoid", vec![x4(&mut r, &[2, 9])], |t, a| Ok(t.sigmoid(a[0]))));
    v.push(case("tanh", vec![x4(&mut r, &[2, 9])], |t, a| Ok(t.activation(a[0], Activation::Tanh))));
    v.push(case("abs", vec![away_from_zero(&mut r, &[12])], |t, a| Ok(t.abs(a[0]))));
    v.push(case("gap", vec![x4(&mut r, &[2, 3, 4, 4])], |t, a| t.gap(a[0])));
    v.push(case("upsample_nearest", vec![x4(&mut r, &[1, 2, 3, 3])], |t, a| {
        t.pool_resize(a[0], Resample::UpsampleNearest, 2)
    }));
    v.push(case("upsample_bilinear", vec![x4(&mut r, &[1, 2, 3, 4])], |t, a| {
        t.pool_resize(a[0], Resample::UpsampleBilinear, 4)
    }));
    v.push(case("avg_pool2", vec![x4(&mut r, &[1, 2, 5, 4])], |t, a| t.avg_pool2(a[0])));
    v.push(case(
        "linear",
        vec![x4(&mut r, &[3, 5]), x4(&mut r, &[5, 4]), x4(&mut r, &[4])],
        |t, a| t.linear(a[0], a[1], a[2]),
    ));
    v.push(case("concat", vec![x4(&mut r, &[2, 2, 3, 3]), x4(&mut r, &[2, 3, 3, 3])], |t, a| {
        t.concat(&[a[0], a[1]])
    }));
    v.push(case("slice_channels", vec![x4(&mut r, &[2, 5, 2, 2])], |t, a| t.slice_channels(a[0], 1, 3)));
    v.push(case(
        "group_norm",
        vec![x4(&mut r, &[2, 4, 3, 3]), x4(&mut r, &[4]), x4(&mut r, &[4])],
        |t, a| t.group_norm(a[0], a[1], a[2], 2),
    ));
    v.push(case("mul_channel_gate", vec![x4(&mut r, &[2, 3, 3, 3]), x4(&mut r, &[2, 1, 3, 3])], |t, a| {
        t.mul_channel_gate(a[0], a[1])
    }));
    v.push(case("mul_spatial_vec", vec![x4(&mut r, &[2, 3, 2, 2]), x4(&mut r, &[2, 3])], |t, a| {
        t.mul_spatial_vec(a[0], a[1])
    }));
    v.push(case("sum_channels", vec![x4(&mut r, &[2, 3, 2, 2])], |t, a| t.sum_channels(a[0])));
    v.push(case("softmax_spatial", vec![x4(&mut r, &[2, 2, 3, 3])], |t, a| t.softmax_spatial(a[0])));
    v.push(case("sum", vec![x4(&mut r, &[3, 4])], |t, a| Ok(t.sum(a[0]))));
    v.push(case("mean", vec![x4(&mut r, &[3, 4])], |t, a| Ok(t.mean(a[0]))));
    v.push(case("cross_entropy", vec![random_tensor(&mut r, &[5, 3], -2.0, 2.0)], |t, a| {
        t.cross_entropy(a[0], &[0, 2, 1, 1, 0])
    }));
    v.push(case("gather_rows", vec![x4(&mut r, &[4, 3])], |t, a| t.gather_rows(a[0], &[3, 0, 0, 2, 1])));
    v.push(case("row_norm", vec![away_from_zero(&mut r, &[4, 3])], |t, a| t.row_norm(a[0])));
    v.push(case("reshape", vec![x4(&mut r, &[2, 6])], |t, a| t.reshape(a[0], &[3, 2, 2])));
    v
}

fn batch_labels(methods: usize) -> Labels {
    // 8 fakes spread over the methods, then 8 reals.
    let y: Vec<usize> = (0..16).map(|i| usize::from(i >= 8)).collect();
    let s: Vec<usize> = (0..16).map(|i| if i >= 8 { 0 } else { 1 + i % methods }).collect();
    Labels::new(y, s).unwrap()
}

/// Composed objectives: single terms and both stage totals.
pub fn loss_cases<T: Real>() -> Vec<Case<T>> {
    let mut r = rng(23);
    let w = LossWeights::default();
    let labels = batch_labels(2);
    let mut v = Vec::new();

    let logits = random_tensor::<T>(&mut r, &[16, 2], -2.0, 2.0);
    let y = labels.y.clone();
    v.push(case("ce_binary", vec![logits.clone()], move |t, a| t.cross_entropy(a[0], &y)));

    let x = random_tensor::<T>(&mut r, &[4, 3, 4, 4], 0.0, 1.0);
    let rec = shifted(&mut r, &x);
    v.push(case("l1", vec![x.clone(), rec], |t, a| l1_loss(t, a[0], a[1])));

    let tuples = sample_tuples(&labels, &mut rng(5));
    let feats = |r: &mut _| random_tensor::<T>(r, &[16, 6], -1.0, 1.0);
    let (fu, fc) = (feats(&mut r), feats(&mut r));
    let tcopy = tuples.clone();
    v.push(case("contrastive", vec![fu.clone(), fc.clone()], move |t, a| {
        Ok(contrastive_batch(t, a[0], a[1], &tcopy, 1.0)?.expect("tuples"))
    }));

    // ρ1·CE + ρ2·mean(self, cross)
    let x16 = random_tensor::<T>(&mut r, &[16, 3, 2, 2], 0.0, 1.0);
    let rs = shifted(&mut r, &x16);
    let rc = shifted(&mut r, &x16);
    let y = labels.y.clone();
    v.push(case("stage1_total", vec![logits.clone(), x16, rs, rc], move |t, a| {
        let cls = cross_entropy(t, a[0], &y)?;
        let s = l1_loss(t, a[1], a[2])?;
        let c = l1_loss(t, a[1], a[3])?;
        let rec = weighted_sum(t, &[(s, 0.5), (c, 0.5)])?;
        weighted_sum(t, &[(cls, w.rho1), (rec, w.rho2)])
    }));

    // (ρ3·CE_S + ρ4·CE_y) + ρ5·L_con + ρ6·L_rec
    let logits_u = random_tensor::<T>(&mut r, &[16, 3], -2.0, 2.0);
    let fa = random_tensor::<T>(&mut r, &[16, 4, 2, 2], -1.0, 1.0);
    let fs = shifted(&mut r, &fa);
    let fx = shifted(&mut r, &fa);
    let (y, s) = (labels.y.clone(), labels.method.clone());
    let margin = w.margin * 0.3;
    v.push(case(
        "stage2_total",
        vec![logits_u, logits, fu, fc, fa, fs, fx],
        move |t, a| {
            let cu = cross_entropy(t, a[0], &s)?;
            let cc = cross_entropy(t, a[1], &y)?;
            let con = contrastive_batch(t, a[2], a[3], &tuples, margin)?.expect("tuples");
            let rs = l1_loss(t, a[4], a[5])?;
            let rx = l1_loss(t, a[4], a[6])?;
            let rec = weighted_sum(t, &[(rs, 0.5), (rx, 0.5)])?;
            weighted_sum(t, &[(cu, w.rho3), (cc, w.rho4), (con, w.rho5), (rec, w.rho6)])
        },
    ));
    v
}
