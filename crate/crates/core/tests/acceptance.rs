//! End-to-end acceptance run: one PASS/FAIL line per criterion, non-zero
//! exit if any fails.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use common::gradcases::{loss_cases, primitive_cases, Case};
use common::{brute_contrastive, grad_check, pair_count_auc, random_tensor, rng};
use forgesem::cli::{run, run_experiment, CliConfig};
use forgesem::corpus::{gen_corpus, CorpusManifest, CorpusSpec, Dataset, PairLoader, Split, MANIFEST_FILE, REAL_LABEL};
use forgesem::eval::{auc, self_reconstruction_l1, EvalReport, ProtocolData, DET_ALL, DET_COMMON};
use forgesem::filters::AhfKernel;
use forgesem::gradcore::{ParamStore, Real, Tape, Tensor};
use forgesem::losses::{contrastive_batch, sample_tuples, total_stage1, total_stage2, Labels, LossWeights};
use forgesem::model::Stage1Model;
use forgesem::train::{stage1_from_checkpoint, stage1_step, stage2_from_checkpoint, Checkpoint, DESK_LR};
use rand::Rng;

type Check = std::result::Result<String, String>;

const SEEDS: [u64; 3] = [0, 1, 2];
const HELD_OUT: &str = "splice_hue";

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}

/// Center, non-center sum, total sum and flat-image response of every
/// kernel in a `C×1×k×k` bank.
fn ahf_invariants(weights: &Tensor, sigma: f64) -> std::result::Result<(), String> {
    let k = weights.shape()[2];
    let center = k * k / 2;
    for (c, kernel) in weights.data().chunks(k * k).enumerate() {
        if kernel[center] != -1.0 {
            return Err(format!("channel {c}: center {}", kernel[center]));
        }
        let total: f64 = kernel.iter().map(|&v| v as f64).sum();
        let others = total + 1.0;
        if (others - 1.0).abs() > 1e-6 || total.abs() > 1e-6 {
            return Err(format!("channel {c}: non-center sum {others}, total {total}"));
        }
    }
    let channels = weights.shape()[0];
    let bank = AhfKernel {
        size: k,
        sigma,
        weights: weights.clone(),
    };
    let s = 2 * k + 2;
    let out = bank.apply(&Tensor::full(&[1, channels, s, s], 0.61)).map_err(err)?;
    let r = k / 2;
    for c in 0..channels {
        for y in r..s - r {
            for x in r..s - r {
                let v = out.data()[(c * s + y) * s + x];
                if v.abs() > 1e-5 {
                    return Err(format!("channel {c}: flat response {v:e}"));
                }
            }
        }
    }
    Ok(())
}

fn store_invariants(store: &ParamStore, sigma: f64) -> std::result::Result<usize, String> {
    let mut n = 0;
    for p in store.iter().filter(|p| p.name.ends_with(".ahf")) {
        ahf_invariants(&p.value, sigma).map_err(|e| format!("{}: {e}", p.name))?;
        n += 1;
    }
    if n == 0 {
        return Err("model has no AHF parameters".into());
    }
    Ok(n)
}

fn criterion1(work: &Path) -> Check {
    let start = Instant::now();
    for k in [3, 5, 7] {
        for sigma in [0.5, 1.0, 2.0] {
            let bank = AhfKernel::projected(k, sigma, 3).map_err(err)?;
            ahf_invariants(&bank.weights, sigma).map_err(|e| format!("k={k} σ={sigma}: {e}"))?;
        }
    }

    let manifest = gen_corpus(&CorpusSpec::default(), &work.join("c1")).map_err(err)?;
    let train: Vec<String> = vec!["splice_noise".into(), "splice_block".into()];
    let sel = manifest.filter(|r| r.method == REAL_LABEL || train.contains(&r.method));
    let data = Dataset::load(&sel, Some(Split::Train), &train, 32).map_err(err)?;
    let cfg = CliConfig::default().train;
    let sigma = cfg.model.ahf_sigma;
    let mut model = Stage1Model::new(&cfg.model, cfg.seed).map_err(err)?;
    store_invariants(&model.store, sigma)?;
    let mut loader = PairLoader::new(&data, cfg.batch, 1).map_err(err)?;
    let train_start = Instant::now();
    let mut steps = 0;
    let mut kernels = 0;
    while steps < 200 {
        match loader.next_batch(&data).map_err(err)? {
            Some(batch) => {
                stage1_step(&mut model, &batch, &cfg).map_err(err)?;
                steps += 1;
                kernels = store_invariants(&model.store, sigma).map_err(|e| format!("step {steps}: {e}"))?;
            }
            None => loader.start_epoch(loader.epoch() + 1),
        }
    }
    let train_time = train_start.elapsed();
    if train_time > Duration::from_secs(60) {
        return Err(format!("{steps} steps took {train_time:.1?}"));
    }
    Ok(format!(
        "{steps} steps × {kernels} AHF banks held every invariant; training {train_time:.1?}, total {:.1?}",
        start.elapsed()
    ))
}

fn criterion2() -> Check {
    // Scalar evaluation of the projected k=3, σ=1 kernel: the non-center
    // weights are the Gaussian taps renormalized to sum to one.
    let (edge_g, corner_g) = ((-0.5f64).exp(), (-1.0f64).exp());
    let denom = 4.0 * edge_g + 4.0 * corner_g;
    let (edge, corner) = (edge_g / denom, corner_g / denom);
    if (edge - 0.15561).abs() > 1e-4 || (corner - 0.09439).abs() > 1e-4 {
        return Err(format!("oracle itself off: edge {edge} corner {corner}"));
    }
    let bank = AhfKernel::projected(3, 1.0, 1).map_err(err)?;
    let w = bank.channel(0);
    let want = [corner, edge, corner, edge, -1.0, edge, corner, edge, corner];
    let diff = w.iter().zip(want).map(|(&a, b)| (a as f64 - b).abs()).fold(0.0, f64::max);
    if diff > 1e-4 {
        return Err(format!("kernel {w:?} differs from oracle by {diff:e}"));
    }

    let mut worst = 0.0f64;
    for k in [3, 5, 7] {
        for sigma in [0.3, 1.0, 2.5] {
            let mut bank = AhfKernel::projected(k, sigma, 2).map_err(err)?;
            let once = bank.weights.clone();
            bank.project();
            for (a, b) in once.data().iter().zip(bank.weights.data()) {
                let ulp = f32::EPSILON * a.abs().max(f32::MIN_POSITIVE);
                let d = (a - b).abs();
                if d > ulp {
                    return Err(format!("re-projection moved {a} to {b} (k={k}, σ={sigma})"));
                }
                worst = worst.max(d as f64);
            }
        }
    }
    Ok(format!(
        "edge {:.5} corner {:.5}, max |Δ| vs oracle {diff:.1e}; re-projection max change {worst:.1e}",
        w[1], w[0]
    ))
}

fn grad_suite<T: Real>(cases: Vec<Case<T>>, eps: f64, floor: f64, tol: f64) -> std::result::Result<(usize, f64), String> {
    let mut worst = 0.0f64;
    for (i, c) in cases.iter().enumerate() {
        let r = grad_check(&c.inputs, &*c.f, 100, eps, floor, 7000 + i as u64);
        if r.probes < 100 || r.max_rel > tol {
            return Err(format!("{}: relative error {:.2e} > {tol:e}", c.name, r.max_rel));
        }
        worst = worst.max(r.max_rel);
    }
    Ok((cases.len(), worst))
}

fn criterion3() -> Check {
    let start = Instant::now();
    let (n64, w64) = grad_suite(primitive_cases::<f64>(), 1e-6, 1e-2, 1e-6)?;
    let (l64, lw64) = grad_suite(loss_cases::<f64>(), 1e-6, 1e-2, 1e-6)?;
    let (_, w32) = grad_suite(primitive_cases::<f32>(), 1e-3, 1.0, 1e-3)?;
    let (_, lw32) = grad_suite(loss_cases::<f32>(), 1e-3, 1.0, 1e-3)?;
    let t = start.elapsed();
    if t > Duration::from_secs(300) {
        return Err(format!("took {t:.1?}"));
    }
    Ok(format!(
        "{n64} primitives + {l64} losses in f64 and f32, 100 probes each; max rel f64 {:.1e}, f32 {:.1e}; {t:.1?}",
        w64.max(lw64),
        w32.max(lw32)
    ))
}

fn criterion4() -> Check {
    let mut r = rng(44);
    let mut ties = 0;
    for trial in 0..1000 {
        let n = r.gen_range(2..80);
        let levels = if trial % 2 == 0 { 5 } else { 1_000_000 };
        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0..levels) as f64 / levels as f64 * 8.0 - 4.0).collect();
        let mut positive: Vec<bool> = (0..n).map(|_| r.gen_bool(0.4)).collect();
        positive[0] = true;
        positive[n - 1] = false;
        let a = auc(&scores, &positive).map_err(err)?;
        let want = pair_count_auc(&scores, &positive);
        if a != want {
            return Err(format!("trial {trial}: rank AUC {a} vs pair count {want}"));
        }
        for (name, f) in [
            ("exp", (|s: f64| s.exp()) as fn(f64) -> f64),
            ("affine", |s| 2.5 * s - 3.0),
            ("cube", |s| s * s * s),
        ] {
            let t: Vec<f64> = scores.iter().map(|&s| f(s)).collect();
            if auc(&t, &positive).map_err(err)? != a {
                return Err(format!("trial {trial}: {name} transform changed AUC"));
            }
        }
        let distinct: BTreeSet<u64> = scores.iter().map(|s| s.to_bits()).collect();
        ties += usize::from(distinct.len() < n);
    }
    Ok(format!("1000 instances ({ties} with ties) equal pair counting; exp/affine/cube invariant"))
}

fn criterion5() -> Check {
    let mut r = rng(55);
    let margin = LossWeights::default().margin;
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let half = r.gen_range(2..10);
        let y: Vec<usize> = (0..2 * half).map(|i| usize::from(i >= half)).collect();
        let s: Vec<usize> = (0..2 * half)
            .map(|i| if i >= half { 0 } else { r.gen_range(1..=3) })
            .collect();
        let labels = Labels::new(y, s).map_err(err)?;
        let tuples = sample_tuples(&labels, &mut rng(500 + trial));
        if tuples.is_empty() {
            return Err(format!("trial {trial}: no tuples"));
        }
        let d = r.gen_range(2..16);
        let fu: Tensor<f64> = random_tensor(&mut r, &[2 * half, d], -1.0, 1.0);
        let fc: Tensor<f64> = random_tensor(&mut r, &[2 * half, d], -1.0, 1.0);
        let mut tape = Tape::new();
        let (u, c) = (tape.constant(fu.clone()), tape.constant(fc.clone()));
        let v = contrastive_batch(&mut tape, u, c, &tuples, margin).map_err(err)?.ok_or("no loss")?;
        let got = tape.value(v).item();
        let row = |t: &Tensor<f64>, i: usize| t.data()[i * d..(i + 1) * d].to_vec();
        let brute = tuples
            .iter()
            .map(|t| {
                let src = if t.role.is_unique() { &fu } else { &fc };
                brute_contrastive(&row(src, t.anchor), &row(src, t.positive), &row(src, t.negative), margin)
            })
            .sum::<f64>()
            / tuples.len() as f64;
        worst = worst.max((got - brute).abs());
    }
    if worst > 1e-6 {
        return Err(format!("contrastive off by {worst:e}"));
    }
    let w = LossWeights::default();
    let (t1, t2) = (total_stage1(0.5, 1.0, &w), total_stage2(1.0, 1.0, 1.0, 1.0, &w));
    if t1 != 0.8 || t2 != 1.45 {
        return Err(format!("totals {t1} and {t2}, expected 0.8 and 1.45"));
    }
    Ok(format!("100 batches within {worst:.1e} of brute force; totals 0.8 and 1.45 exact"))
}

fn experiment_config(seed: u64) -> CliConfig {
    let mut cfg = CliConfig::default();
    cfg.corpus.seed = seed;
    cfg.train.seed = seed;
    cfg.train.lr = DESK_LR;
    cfg.eval.hold_out = Some(HELD_OUT.into());
    cfg
}

struct Run {
    report: EvalReport,
    l1_trained: f64,
    l1_fresh: f64,
    elapsed: Duration,
}

fn experiment(cfg: &CliConfig, out: &Path) -> std::result::Result<Run, String> {
    let start = Instant::now();
    let report = run_experiment(cfg, out).map_err(err)?;
    let elapsed = start.elapsed();
    let manifest = CorpusManifest::load(&out.join("corpus").join(MANIFEST_FILE)).map_err(err)?;
    let s1 = Checkpoint::load(&out.join("stage1.fsck")).map_err(err)?;
    let trained = stage1_from_checkpoint(&s1).map_err(err)?;
    let fresh = Stage1Model::new(&cfg.train.model, cfg.train.seed).map_err(err)?;
    let pd = ProtocolData::load(&manifest, &s1.meta.methods, Some(HELD_OUT), cfg.train.model.image_size).map_err(err)?;
    let (_, held) = pd.held_out.as_ref().ok_or("no held-out set")?;
    let rows: Vec<usize> = (0..held.len()).collect();
    Ok(Run {
        report,
        l1_trained: self_reconstruction_l1(&trained, held, &rows).map_err(err)?,
        l1_fresh: self_reconstruction_l1(&fresh, held, &rows).map_err(err)?,
        elapsed,
    })
}

fn criterion6(runs: &[std::result::Result<Run, String>]) -> Check {
    let mut intra = Vec::new();
    let mut held_fc = Vec::new();
    let mut held_fa = Vec::new();
    let mut total = Duration::ZERO;
    for (seed, r) in SEEDS.iter().zip(runs) {
        let r = r.as_ref().map_err(|e| format!("seed {seed}: {e}"))?;
        intra.push(r.report.intra_mean(DET_COMMON).ok_or("no intra AUC")?);
        held_fc.push(r.report.held_out_auc(DET_COMMON).ok_or("no held-out Fc AUC")?);
        held_fa.push(r.report.held_out_auc(DET_ALL).ok_or("no held-out Fa AUC")?);
        total += r.elapsed;
    }
    let (mi, mc, ma) = (median(&intra), median(&held_fc), median(&held_fa));
    let detail = format!(
        "median intra Fc {mi:.3}, held-out Fc {mc:.3}, held-out Fa {ma:.3} (per seed Fc {held_fc:.3?}); {total:.0?} for 3 seeds"
    );
    if mi >= 0.90 && mc >= 0.75 && mc >= ma - 0.02 && total <= Duration::from_secs(1800) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion7(runs: &[std::result::Result<Run, String>]) -> Check {
    let mut parts = Vec::new();
    let mut ok = true;
    for (seed, r) in SEEDS.iter().zip(runs) {
        let r = r.as_ref().map_err(|e| format!("seed {seed}: {e}"))?;
        let ratio = r.l1_trained / r.l1_fresh;
        ok &= ratio <= 0.5;
        parts.push(format!("seed {seed}: {:.4}/{:.4} = {:.0}%", r.l1_trained, r.l1_fresh, 100.0 * ratio));
    }
    let detail = format!("held-out self-reconstruction L1 trained/fresh {}", parts.join(", "));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn same_bytes(a: &Path, b: &Path) -> std::result::Result<(), String> {
    let (x, y) = (fs::read(a).map_err(err)?, fs::read(b).map_err(err)?);
    if x != y {
        return Err(format!("{} differs between runs", a.file_name().unwrap().to_string_lossy()));
    }
    Ok(())
}

fn criterion8(first: &Path, work: &Path) -> Check {
    let again = work.join("rerun0");
    experiment(&experiment_config(SEEDS[0]), &again)?;
    let mut rows = 0;
    for f in ["stage1_metrics.csv", "stage2_metrics.csv"] {
        same_bytes(&first.join(f), &again.join(f))?;
        rows += fs::read_to_string(first.join(f)).map_err(err)?.lines().count() - 1;
    }
    for f in ["report.json", "stage1.fsck", "stage2.fsck"] {
        same_bytes(&first.join(f), &again.join(f))?;
    }

    for (stage, file) in [(1u8, "stage1.fsck"), (2, "stage2.fsck")] {
        let path = first.join(file);
        let bytes = fs::read(&path).map_err(err)?;
        let ckpt = Checkpoint::load(&path).map_err(err)?;
        if ckpt.to_bytes().map_err(err)? != bytes {
            return Err(format!("{file}: re-serialized bytes differ"));
        }
        let store = if stage == 1 {
            stage1_from_checkpoint(&ckpt).map_err(err)?.store
        } else {
            stage2_from_checkpoint(&ckpt).map_err(err)?.store
        };
        let resaved = Checkpoint::from_store(stage, ckpt.meta.clone(), &store);
        let copy = work.join(format!("copy_{file}"));
        resaved.save(&copy).map_err(err)?;
        same_bytes(&path, &copy)?;
        for ((name, t), p) in ckpt.params.iter().zip(store.iter()) {
            let exact = t.data().iter().zip(p.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            if name != &p.name || !exact {
                return Err(format!("{file}: parameter {name} not restored bit-exactly"));
            }
        }
    }
    Ok(format!("seed-0 rerun reproduced {rows} metric rows, report and checkpoints byte-for-byte; save/load bit-exact"))
}

fn param_names(dir: &Path) -> std::result::Result<BTreeSet<String>, String> {
    let mut names = BTreeSet::new();
    for f in ["stage1.fsck", "stage2.fsck"] {
        let ckpt = Checkpoint::load(&dir.join(f)).map_err(err)?;
        names.extend(ckpt.params.iter().map(|(n, _)| format!("{f}:{n}")));
    }
    Ok(names)
}

fn criterion9(full: &Path, work: &Path) -> Check {
    let mut sets = vec![("full".to_string(), param_names(full)?)];
    let mut times = Vec::new();
    for flag in ["--no-highfreq", "--no-mhfe", "--no-mhff"] {
        let out = work.join(flag.trim_start_matches("--"));
        let start = Instant::now();
        let code = run([
            "forgesem",
            "run-experiment",
            "--seed",
            "0",
            "--hold-out",
            HELD_OUT,
            "--lr",
            &DESK_LR.to_string(),
            flag,
            "--out",
            out.to_str().unwrap(),
        ]);
        if code != 0 {
            return Err(format!("run-experiment {flag} exited with {code}"));
        }
        times.push(format!("{flag} {:.0?}", start.elapsed()));
        if !out.join("report.csv").exists() {
            return Err(format!("{flag}: no report written"));
        }
        sets.push((flag.to_string(), param_names(&out)?));
    }
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            if sets[i].1 == sets[j].1 {
                return Err(format!("{} and {} have identical parameter names", sets[i].0, sets[j].0));
            }
        }
    }
    let sizes: Vec<String> = sets.iter().map(|(n, s)| format!("{n} {}", s.len())).collect();
    Ok(format!(
        "4 distinct parameter-name sets ({}); pipelines completed: {}",
        sizes.join(", "),
        times.join(", ")
    ))
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let work = work.path();
    let mut results: Vec<(u8, &str, Check)> = Vec::new();
    let mut report = |n: u8, name: &'static str, r: Check| {
        let (tag, detail) = match &r {
            Ok(d) => ("PASS", d.as_str()),
            Err(d) => ("FAIL", d.as_str()),
        };
        println!("criterion {n} {tag}: {name}: {detail}");
        results.push((n, name, r));
    };

    report(1, "AHF invariants", criterion1(work));
    report(2, "AHF numeric oracle", criterion2());
    report(3, "gradient correctness", criterion3());
    report(4, "AUC oracle", criterion4());
    report(5, "loss oracles", criterion5());

    let dirs: Vec<_> = SEEDS.iter().map(|s| work.join(format!("seed{s}"))).collect();
    let runs: Vec<_> = SEEDS
        .iter()
        .zip(&dirs)
        .map(|(&s, d)| experiment(&experiment_config(s), d))
        .collect();
    report(6, "desk-scale generalization", criterion6(&runs));
    report(7, "reconstruction learning", criterion7(&runs));
    report(8, "determinism", criterion8(&dirs[0], work));
    report(9, "ablation wiring", criterion9(&dirs[0], work));

    let failed: Vec<u8> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
