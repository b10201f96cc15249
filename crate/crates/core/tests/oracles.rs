mod common;

use common::{brute_contrastive, naive_conv, naive_dft, pair_count_auc, random_tensor, rng, separable_bilinear};
use forgesem::eval::auc;
use forgesem::filters::{freq_response, AhfKernel};
use forgesem::gradcore::{conv2d, pool_resize, Resample, Tape, Tensor};
use forgesem::losses::{
    contrastive, contrastive_batch, materialize, sample_tuples, total_stage1, total_stage2, Labels, LossWeights,
};
use rand::Rng;

#[test]
fn conv_matches_nested_loops() {
    let mut r = rng(1);
    // (n, cin, h, w, cout, groups, k, stride, pad)
    let configs = [
        (2, 3, 7, 6, 4, 1, 3, 1, 1),
        (1, 4, 8, 8, 4, 4, 3, 2, 1),
        (2, 6, 5, 5, 9, 3, 1, 1, 0),
        (1, 2, 9, 7, 3, 1, 5, 2, 2),
        (3, 4, 4, 4, 2, 2, 3, 1, 0),
    ];
    for (n, cin, h, w, cout, groups, k, stride, pad) in configs {
        let x: Tensor<f64> = random_tensor(&mut r, &[n, cin, h, w], -1.0, 1.0);
        let wt: Tensor<f64> = random_tensor(&mut r, &[cout, cin / groups, k, k], -1.0, 1.0);
        let b: Tensor<f64> = random_tensor(&mut r, &[cout], -1.0, 1.0);
        let got = conv2d(&x, &wt, Some(&b), stride, pad, groups).unwrap();
        let want = naive_conv(&x, &wt, Some(&b), stride, pad, groups);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want) < 1e-12, "config {:?}", (n, cin, h, w, cout, groups, k, stride, pad));
    }
}

#[test]
fn bilinear_matches_separable_passes() {
    let mut r = rng(2);
    for (shape, f) in [([1, 1, 1, 1], 2), ([2, 3, 4, 5], 2), ([1, 2, 3, 3], 4), ([1, 1, 2, 7], 8)] {
        let x: Tensor<f64> = random_tensor(&mut r, &shape, -1.0, 1.0);
        let got = pool_resize(&x, Resample::UpsampleBilinear, f).unwrap();
        let want = separable_bilinear(&x, f);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn freq_response_matches_direct_dft() {
    for (k, sigma, n) in [(3, 1.0, 8), (3, 0.5, 16), (5, 1.5, 16), (7, 2.0, 32)] {
        let kernel = AhfKernel::projected(k, sigma, 2).unwrap();
        let w: Vec<f64> = kernel.channel(1).iter().map(|&v| v as f64).collect();
        let got = freq_response(&kernel, 1, n).unwrap();
        let want = naive_dft(&w, k, n);
        let diff = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-9, "k={k} n={n}: {diff:e}");
        assert!(got[0] < 1e-6, "DC response {}", got[0]);
    }
}

#[test]
fn auc_equals_pair_counting() {
    let mut r = rng(3);
    for trial in 0..1000 {
        let n = r.gen_range(2..60);
        let coarse = trial % 2 == 0;
        let mut scores: Vec<f64> = (0..n)
            .map(|_| if coarse { r.gen_range(0..6) as f64 } else { r.gen_range(-3.0..3.0) })
            .collect();
        let mut positive: Vec<bool> = (0..n).map(|_| r.gen_bool(0.5)).collect();
        positive[0] = true;
        positive[1] = false;
        if trial % 7 == 0 {
            scores.iter_mut().for_each(|s| *s = 1.0);
        }
        let a = auc(&scores, &positive).unwrap();
        assert_eq!(a, pair_count_auc(&scores, &positive), "trial {trial}");
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        let affine: Vec<f64> = scores.iter().map(|s| 3.0 * s + 1.0).collect();
        assert_eq!(auc(&exp, &positive).unwrap(), a, "trial {trial} exp");
        assert_eq!(auc(&affine, &positive).unwrap(), a, "trial {trial} affine");
    }
}

#[test]
fn auc_reference_cases() {
    let pos = [true, true, false, false];
    assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &pos).unwrap(), 1.0);
    assert_eq!(auc(&[0.8, 0.3, 0.5, 0.1], &pos).unwrap(), 0.75);
}

#[test]
fn contrastive_batch_matches_brute_force() {
    let mut r = rng(4);
    let margin = LossWeights::default().margin;
    for trial in 0..100 {
        let half = r.gen_range(2..9);
        let methods = r.gen_range(1..4);
        let y: Vec<usize> = (0..2 * half).map(|i| usize::from(i >= half)).collect();
        let s: Vec<usize> = (0..2 * half)
            .map(|i| if i >= half { 0 } else { r.gen_range(1..=methods) })
            .collect();
        let labels = Labels::new(y, s).unwrap();
        let tuples = sample_tuples(&labels, &mut rng(100 + trial));
        let d = r.gen_range(1..10);
        let fu: Tensor<f64> = random_tensor(&mut r, &[2 * half, d], -1.0, 1.0);
        let fc: Tensor<f64> = random_tensor(&mut r, &[2 * half, d], -1.0, 1.0);

        let mut tape = Tape::new();
        let (u, c) = (tape.constant(fu.clone()), tape.constant(fc.clone()));
        let got = contrastive_batch(&mut tape, u, c, &tuples, margin).unwrap();
        if tuples.is_empty() {
            assert!(got.is_none());
            continue;
        }
        let got = tape.value(got.unwrap()).item();

        let row = |t: &Tensor<f64>, i: usize| t.data()[i * d..(i + 1) * d].to_vec();
        let brute: f64 = tuples
            .iter()
            .map(|t| {
                let src = if t.role.is_unique() { &fu } else { &fc };
                brute_contrastive(&row(src, t.anchor), &row(src, t.positive), &row(src, t.negative), margin)
            })
            .sum::<f64>()
            / tuples.len() as f64;
        assert!((got - brute).abs() < 1e-6, "trial {trial}: {got} vs {brute}");

        let via_values: f64 = materialize(&tuples, &fu.cast(), &fc.cast())
            .iter()
            .map(|t| contrastive(t, margin))
            .sum::<f64>()
            / tuples.len() as f64;
        assert!((via_values - brute).abs() < 1e-5);
    }
}

#[test]
fn stage_totals_reference_cases() {
    let w = LossWeights::default();
    assert_eq!(total_stage1(0.5, 1.0, &w), 0.8);
    assert_eq!(total_stage2(1.0, 1.0, 1.0, 1.0, &w), 1.45);
}
