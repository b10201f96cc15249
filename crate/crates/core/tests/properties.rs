mod common;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use forgesem::corpus::{gen_corpus, render_fake, render_fake_base, render_real, CorpusSpec, Method, StorageFormat};
use forgesem::eval::auc;
use forgesem::filters::{project_weights, AhfKernel};
use forgesem::gradcore::{Tape, Tensor};
use forgesem::losses::{
    contrastive, contrastive_batch, cross_entropy_value, sample_tuples, ContrastiveTuple, Labels, Role,
};
use proptest::prelude::*;
use proptest::sample::subsequence;

fn ahf_invariants(w: &[f32], k: usize) -> std::result::Result<(), String> {
    let center = k * k / 2;
    for (c, kernel) in w.chunks(k * k).enumerate() {
        if kernel[center] != -1.0 {
            return Err(format!("channel {c}: center {}", kernel[center]));
        }
        let others: f64 = kernel.iter().map(|&v| v as f64).sum::<f64>() + 1.0;
        if (others - 1.0).abs() > 1e-6 {
            return Err(format!("channel {c}: non-center sum {others}"));
        }
    }
    Ok(())
}

fn kernel_strategy() -> impl Strategy<Value = (usize, f64, Vec<f32>)> {
    (prop_oneof![Just(3usize), Just(5), Just(7)], 0.2f64..3.0, 1usize..4).prop_flat_map(|(k, sigma, c)| {
        (
            Just(k),
            Just(sigma),
            prop::collection::vec(-0.5f32..0.5, c * k * k),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_restores_ahf_invariants((k, sigma, noise) in kernel_strategy()) {
        let channels = noise.len() / (k * k);
        let mut kernel = AhfKernel::projected(k, sigma, channels).unwrap();
        prop_assert!(ahf_invariants(kernel.weights.data(), k).is_ok());

        // Perturb as a gradient step would, then re-project.
        for (w, n) in kernel.weights.data_mut().iter_mut().zip(&noise) {
            *w += 0.1 * n;
        }
        kernel.project();
        ahf_invariants(kernel.weights.data(), k).map_err(TestCaseError::fail)?;
        let total: f64 = kernel.weights.data().iter().map(|&v| v as f64).sum();
        prop_assert!(total.abs() <= 1e-6 * channels as f64);

        let once = kernel.weights.clone();
        kernel.project();
        prop_assert!(kernel.weights.max_abs_diff(&once) <= 1e-6);

        let size = 2 * k + 3;
        let flat = Tensor::full(&[1, channels, size, size], 0.37);
        let out = kernel.apply(&flat).unwrap();
        let r = k / 2;
        for c in 0..channels {
            for y in r..size - r {
                for x in r..size - r {
                    let v = out.data()[(c * size + y) * size + x];
                    prop_assert!(v.abs() <= 1e-5, "interior response {}", v);
                }
            }
        }
    }

    #[test]
    fn degenerate_kernels_still_project(k in prop_oneof![Just(3usize), Just(5)]) {
        let mut w = vec![0.0f32; k * k];
        project_weights(&mut w, k);
        prop_assert!(ahf_invariants(&w, k).is_ok());
    }

    #[test]
    fn auc_of_flipped_labels_is_complement(
        (scores, positive) in (2usize..80).prop_flat_map(|n| (
            subsequence((0..1000).collect::<Vec<i32>>(), n).prop_shuffle(),
            prop::collection::vec(any::<bool>(), n),
        ))
    ) {
        let scores: Vec<f64> = scores.iter().map(|&s| s as f64 / 7.0).collect();
        prop_assume!(positive.iter().any(|&p| p) && positive.iter().any(|&p| !p));
        let flipped: Vec<bool> = positive.iter().map(|p| !p).collect();
        let a = auc(&scores, &positive).unwrap();
        let b = auc(&scores, &flipped).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn auc_is_permutation_invariant(
        (pairs, perm) in (2usize..60).prop_flat_map(|n| (
            prop::collection::vec((0u8..8, any::<bool>()), n),
            Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
        ))
    ) {
        prop_assume!(pairs.iter().any(|p| p.1) && pairs.iter().any(|p| !p.1));
        let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let positive: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        let ps: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let pp: Vec<bool> = perm.iter().map(|&i| positive[i]).collect();
        prop_assert_eq!(auc(&scores, &positive).unwrap(), auc(&ps, &pp).unwrap());
    }

    #[test]
    fn contrastive_is_nonnegative(
        (a, p, n) in (1usize..12).prop_flat_map(|d| (
            prop::collection::vec(-5.0f64..5.0, d),
            prop::collection::vec(-5.0f64..5.0, d),
            prop::collection::vec(-5.0f64..5.0, d),
        )),
        margin in 0.0f64..4.0,
    ) {
        let t = ContrastiveTuple { role: Role::RealCommon, anchor: a.clone(), positive: a.clone(), negative: n.clone() };
        let same = contrastive(&t, margin);
        prop_assert!(same >= 0.0);
        let t = ContrastiveTuple { positive: p, ..t };
        prop_assert!(contrastive(&t, margin) >= 0.0);
    }

    #[test]
    fn contrastive_batch_ignores_tuple_order(seed in any::<u64>(), half in 2usize..8) {
        let y: Vec<usize> = (0..2 * half).map(|i| usize::from(i >= half)).collect();
        let s: Vec<usize> = (0..2 * half).map(|i| if i >= half { 0 } else { 1 + i % 2 }).collect();
        let labels = Labels::new(y, s).unwrap();
        let tuples = sample_tuples(&labels, &mut common::rng(seed));
        prop_assume!(!tuples.is_empty());
        let mut r = common::rng(seed ^ 1);
        let fu: Tensor<f64> = common::random_tensor(&mut r, &[2 * half, 5], -1.0, 1.0);
        let fc: Tensor<f64> = common::random_tensor(&mut r, &[2 * half, 5], -1.0, 1.0);
        let eval = |ts: &[forgesem::losses::TupleIndex]| {
            let mut tape = Tape::new();
            let (u, c) = (tape.constant(fu.clone()), tape.constant(fc.clone()));
            let v = contrastive_batch(&mut tape, u, c, ts, 1.0).unwrap().unwrap();
            tape.value(v).item()
        };
        let mut reversed = tuples.clone();
        reversed.reverse();
        let value = eval(&tuples);
        prop_assert!(value >= 0.0);
        prop_assert!((value - eval(&reversed)).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_at_uniform_logits_is_log_k(n in 1usize..20, k in 2usize..10, fill in -3.0f32..3.0) {
        let logits = Tensor::full(&[n, k], fill);
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let ce = cross_entropy_value(&logits, &labels).unwrap();
        prop_assert!((ce - (k as f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_ignores_row_order(
        (rows, perm) in (1usize..12).prop_flat_map(|n| (
            prop::collection::vec((prop::collection::vec(-4.0f32..4.0, 3), 0usize..3), n),
            Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
        ))
    ) {
        let build = |order: &[usize]| {
            let data: Vec<f32> = order.iter().flat_map(|&i| rows[i].0.clone()).collect();
            let labels: Vec<usize> = order.iter().map(|&i| rows[i].1).collect();
            cross_entropy_value(&Tensor::new(&[order.len(), 3], data).unwrap(), &labels).unwrap()
        };
        let id: Vec<usize> = (0..rows.len()).collect();
        prop_assert!((build(&id) - build(&perm)).abs() < 1e-9);
    }

    #[test]
    fn renders_are_deterministic(seed in any::<u64>(), m in 0usize..3) {
        let method = Method::ALL[m];
        prop_assert_eq!(render_real(seed, 16).image, render_real(seed, 16).image);
        prop_assert_eq!(render_fake(seed, method, 16).image, render_fake(seed, method, 16).image);
    }

    #[test]
    fn fakes_differ_from_base_along_the_seam(seed in any::<u64>(), m in 0usize..3) {
        let size = 32;
        let fake = render_fake(seed, Method::ALL[m], size);
        let base = render_fake_base(seed, size);
        let plane = size * size;
        let mut seam_diff = 0.0f32;
        for i in 0..plane {
            let a = fake.region.seam_alpha((i % size) as f32, (i / size) as f32);
            if a > 0.0 && a < 1.0 {
                for c in 0..3 {
                    seam_diff = seam_diff.max((fake.image.data()[c * plane + i] - base.image.data()[c * plane + i]).abs());
                }
            }
        }
        prop_assert!(seam_diff > 0.01, "seam difference {}", seam_diff);
    }
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn corpus_generation_is_deterministic_and_disjoint(
        seed in any::<u64>(),
        n_real in 4usize..16,
        n_fake in 2usize..8,
        png in any::<bool>(),
    ) {
        let spec = CorpusSpec {
            n_real,
            n_fake_per_method: n_fake,
            image_size: 16,
            seed,
            format: if png { StorageFormat::Png } else { StorageFormat::Bin },
            ..CorpusSpec::default()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = gen_corpus(&spec, a.path()).unwrap();
        gen_corpus(&spec, b.path()).unwrap();
        prop_assert!(tree(a.path()) == tree(b.path()));

        let paths: HashSet<&str> = ma.records.iter().map(|r| r.path.as_str()).collect();
        prop_assert_eq!(paths.len(), ma.records.len());
        prop_assert_eq!(ma.records.len(), n_real + 3 * n_fake);
        for real in [true, false] {
            let total = ma.count(None, real);
            let by_split: usize = [
                forgesem::corpus::Split::Train,
                forgesem::corpus::Split::Val,
                forgesem::corpus::Split::Test,
            ]
            .into_iter()
            .map(|s| ma.count(Some(s), real))
            .sum();
            prop_assert_eq!(total, by_split);
        }

        // Seam metadata: every fake, no real.
        for r in &ma.records {
            let seam = r.artifacts.iter().any(|a| a == "seam");
            prop_assert_eq!(seam, !r.is_real(), "{}", r.path);
        }
    }
}
