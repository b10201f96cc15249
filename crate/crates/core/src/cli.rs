//! Command-line front end. `run` parses arguments, validates the merged
//! configuration before touching the filesystem, dispatches, and maps
//! errors to exit codes.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{self, CorpusManifest, CorpusSpec, Dataset, Split, MANIFEST_FILE, REAL_LABEL};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, ProtocolData, ReportFormats, DET_ALL, DET_COMMON};
use crate::filters::{freq_response, freq_response_csv, AhfKernel};
use crate::train::{self, Checkpoint, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub const DEFAULT_HOLD_OUT: &str = "splice_hue";

#[derive(Parser, Debug)]
#[command(name = "forgesem", version, about = "Forgery-semantics decoupling: corpus, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML or JSON config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for corpus generation and training
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (or file, where noted)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Image side length
    #[arg(long)]
    image_size: Option<usize>,
    /// Training epochs per stage
    #[arg(long)]
    epochs: Option<usize>,
    /// Forgery method withheld from training; "none" disables it
    #[arg(long)]
    hold_out: Option<String>,
    /// Drop the high-frequency stream
    #[arg(long)]
    no_highfreq: bool,
    /// Use a single high-frequency scale
    #[arg(long)]
    no_mhfe: bool,
    /// Fuse scales by addition instead of pixel attention
    #[arg(long)]
    no_mhff: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic multi-method corpus
    GenCorpus {
        #[command(flatten)]
        common: Common,
    },
    /// Build a manifest from a <label>/<method>/* image directory
    Import {
        #[command(flatten)]
        common: Common,
        /// Directory to scan; manifest.json is written into it
        #[arg(long)]
        input: PathBuf,
    },
    /// Train stage 1 or stage 2
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Corpus directory holding manifest.json
        #[arg(long)]
        corpus: PathBuf,
        /// Stage-1 checkpoint (required for --stage 2)
        #[arg(long, required_if_eq("stage", "2"))]
        stage1_ckpt: Option<PathBuf>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Intra-domain and held-out AUC for both detectors
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        stage1_ckpt: PathBuf,
        #[arg(long)]
        stage2_ckpt: PathBuf,
    },
    /// DFT magnitude of an AHF kernel as CSV
    FreqResponse {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to read kernels from; the initial kernel otherwise
        #[arg(long)]
        stage1_ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        level: usize,
        #[arg(long, default_value_t = 0)]
        channel: usize,
        /// DFT size
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Grad-CAM heatmap of the common-semantics detector
    Saliency {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage2_ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Target class: 0 fake, 1 real
        #[arg(long, default_value_t = 0)]
        class: usize,
        #[arg(long, default_value = eval::DEFAULT_LAYER)]
        layer: String,
    },
    /// Re-emit CSV and SVG files from a report.json
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// gen-corpus, stage 1, stage 2 and eval in one go
    RunExperiment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        lr: Option<f64>,
    },
}

/// Everything a command can be configured with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CliConfig {
    pub corpus: CorpusSpec,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub hold_out: Option<String>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            hold_out: Some(DEFAULT_HOLD_OUT.into()),
        }
    }
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            corpus: CorpusSpec::default(),
            train: TrainConfig::desk(),
            eval: EvalOptions::default(),
        }
    }
}

impl CliConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.train.validate()?;
        if self.corpus.image_size != self.train.model.image_size {
            return Err(Error::Config(format!(
                "corpus image_size {} differs from model image_size {}",
                self.corpus.image_size, self.train.model.image_size
            )));
        }
        Ok(())
    }

    fn apply(&mut self, c: &Common) {
        if let Some(s) = c.seed {
            self.corpus.seed = s;
            self.train.seed = s;
        }
        if let Some(n) = c.image_size {
            self.corpus.image_size = n;
            self.train.model.image_size = n;
        }
        if let Some(e) = c.epochs {
            self.train.epochs = e;
        }
        if let Some(h) = &c.hold_out {
            self.eval.hold_out = (h != "none").then(|| h.clone());
        }
        let m = &mut self.train.model;
        m.use_highfreq &= !c.no_highfreq;
        m.use_mhfe &= !c.no_mhfe;
        m.use_mhff &= !c.no_mhff;
    }
}

fn load_config(c: &Common, lr: Option<f64>) -> Result<CliConfig> {
    let mut cfg = match &c.config {
        Some(p) => CliConfig::from_file(p)?,
        None => CliConfig::default(),
    };
    cfg.apply(c);
    if let Some(lr) = lr {
        cfg.train.lr = lr;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_out(c: &Common) -> Result<PathBuf> {
    c.out.clone().ok_or_else(|| Error::Config("--out is required".into()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Image { .. } | Error::Format { .. } => EXIT_IO,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

/// Print without panicking when stdout is a closed pipe.
fn write_stdout(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("FORGESEM_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parse `argv` (program name first), run, and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(summary) => {
            write_stdout(&format!("{summary}\n"));
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Methods used for training: every fake method in the manifest except the
/// held-out one.
fn train_methods(manifest: &CorpusManifest, hold_out: Option<&str>) -> Result<Vec<String>> {
    let all = manifest.methods();
    if let Some(h) = hold_out {
        if !all.iter().any(|m| m == h) {
            log::warn!("held-out method {h} is not in the corpus");
        }
    }
    let methods: Vec<String> = all.into_iter().filter(|m| Some(m.as_str()) != hold_out).collect();
    if methods.is_empty() {
        return Err(Error::Precondition("no training methods left after hold-out".into()));
    }
    Ok(methods)
}

fn training_data(manifest: &CorpusManifest, methods: &[String], size: usize) -> Result<Dataset> {
    let sel = manifest.filter(|r| r.method == REAL_LABEL || methods.contains(&r.method));
    Dataset::load(&sel, Some(Split::Train), methods, size)
}

fn load_manifest(dir: &Path) -> Result<CorpusManifest> {
    CorpusManifest::load(&dir.join(MANIFEST_FILE))
}

fn dispatch(cmd: Command) -> Result<serde_json::Value> {
    match cmd {
        Command::GenCorpus { common } => {
            let cfg = load_config(&common, None)?;
            let out = require_out(&common)?;
            let m = corpus::gen_corpus(&cfg.corpus, &out)?;
            Ok(json!({"command": "gen-corpus", "out": out, "records": m.records.len(), "seed": cfg.corpus.seed}))
        }
        Command::Import { common, input } => {
            let cfg = load_config(&common, None)?;
            let imported = corpus::import_images(&input, cfg.corpus.image_size, cfg.corpus.split, cfg.corpus.seed)?;
            imported.manifest.save(&input.join(MANIFEST_FILE))?;
            Ok(json!({"command": "import", "records": imported.manifest.records.len(), "skipped": imported.skipped}))
        }
        Command::Train {
            common,
            stage,
            corpus,
            stage1_ckpt,
            lr,
        } => {
            let cfg = load_config(&common, lr)?;
            let out = require_out(&common)?;
            let manifest = load_manifest(&corpus)?;
            let methods = train_methods(&manifest, cfg.eval.hold_out.as_deref())?;
            let stage1 = match (stage, &stage1_ckpt) {
                (2, Some(p)) => Some(Checkpoint::load(p)?),
                (2, None) => return Err(Error::Precondition("--stage 2 requires --stage1-ckpt".into())),
                _ => None,
            };
            let data = training_data(&manifest, &methods, cfg.train.model.image_size)?;
            create_dir(&out)?;
            let ckpt_path = out.join(format!("stage{stage}.fsck"));
            let failure_path = out.join(format!("stage{stage}.last_good.fsck"));
            let (ckpt, metrics) = match stage1 {
                None => {
                    let r = train::train_stage1(&cfg.train, &data, Some(&failure_path))?;
                    (r.checkpoint, r.metrics)
                }
                Some(s1) => {
                    let r = train::train_stage2(&cfg.train, &data, &s1, Some(&failure_path))?;
                    (r.checkpoint, r.metrics)
                }
            };
            ckpt.save(&ckpt_path)?;
            metrics.save_csv(&out.join(format!("stage{stage}_metrics.csv")))?;
            Ok(json!({
                "command": "train",
                "stage": stage,
                "checkpoint": ckpt_path,
                "steps": ckpt.meta.step,
                "final_total": metrics.epoch_means("total").last(),
            }))
        }
        Command::Eval {
            common,
            corpus,
            stage1_ckpt,
            stage2_ckpt,
        } => {
            let cfg = load_config(&common, None)?;
            let out = require_out(&common)?;
            let s1 = Checkpoint::load(&stage1_ckpt)?;
            let s2 = Checkpoint::load(&stage2_ckpt)?;
            let manifest = load_manifest(&corpus)?;
            let report = evaluate(&manifest, &s1, &s2, cfg.eval.hold_out.as_deref())?;
            eval::emit_report(&report, &out, ReportFormats::ALL)?;
            Ok(report_summary("eval", &report))
        }
        Command::FreqResponse {
            common,
            stage1_ckpt,
            level,
            channel,
            size,
        } => {
            let cfg = load_config(&common, None)?;
            let kernel = match &stage1_ckpt {
                Some(p) => kernel_from_checkpoint(&Checkpoint::load(p)?, level)?,
                None => AhfKernel::projected(cfg.train.model.ahf_size, cfg.train.model.ahf_sigma, 3)?,
            };
            let mags = freq_response(&kernel, channel, size)?;
            let csv = freq_response_csv(&mags, size);
            match &common.out {
                Some(path) => fs::write(path, &csv).map_err(|e| Error::io(path, e))?,
                None => write_stdout(&csv),
            }
            let dc = mags[0];
            Ok(json!({"command": "freq-response", "size": size, "dc": dc, "max": mags.iter().cloned().fold(0.0, f64::max)}))
        }
        Command::Saliency {
            common,
            stage2_ckpt,
            image,
            class,
            layer,
        } => {
            load_config(&common, None)?;
            let out = require_out(&common)?;
            let ckpt = Checkpoint::load(&stage2_ckpt)?;
            let model = train::stage2_from_checkpoint(&ckpt)?;
            let img = corpus::io::load_image(&image, model.cfg.image_size)?;
            let cam = eval::grad_cam(&model, &img, class, &layer)?;
            let s = model.cfg.image_size as u32;
            let pixels: Vec<u8> = cam.heatmap.data().iter().map(|&v| (v * 255.0).round() as u8).collect();
            let gray = image::GrayImage::from_raw(s, s, pixels).expect("heatmap size");
            gray.save(&out).map_err(|e| Error::Image {
                path: out.clone(),
                message: e.to_string(),
            })?;
            Ok(json!({"command": "saliency", "out": out, "layer": layer, "class": class}))
        }
        Command::Report { common, input } => {
            let out = require_out(&common)?;
            let text = fs::read_to_string(&input).map_err(|e| Error::io(&input, e))?;
            let report: EvalReport = serde_json::from_str(&text)?;
            let files = eval::emit_report(
                &report,
                &out,
                ReportFormats {
                    csv: true,
                    json: false,
                    svg: true,
                },
            )?;
            Ok(json!({"command": "report", "files": files}))
        }
        Command::RunExperiment { common, lr } => {
            let cfg = load_config(&common, lr)?;
            let out = require_out(&common)?;
            let report = run_experiment(&cfg, &out)?;
            Ok(report_summary("run-experiment", &report))
        }
    }
}

fn report_summary(command: &str, r: &EvalReport) -> serde_json::Value {
    json!({
        "command": command,
        "seed": r.seed,
        "intra_fc": r.intra_mean(DET_COMMON),
        "intra_fa": r.intra_mean(DET_ALL),
        "held_out_fc": r.held_out_auc(DET_COMMON),
        "held_out_fa": r.held_out_auc(DET_ALL),
    })
}

fn kernel_from_checkpoint(ckpt: &Checkpoint, level: usize) -> Result<AhfKernel> {
    let name = format!("forgery.mhfe.l{level}.ahf");
    let (_, w) = ckpt
        .params
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::Config(format!("checkpoint has no AHF kernel {name}")))?;
    let m = &ckpt.meta.config.model;
    Ok(AhfKernel {
        size: m.ahf_size,
        sigma: m.ahf_sigma,
        weights: w.clone(),
    })
}

/// Evaluate both checkpoints on `manifest` with the standard protocol.
pub fn evaluate(manifest: &CorpusManifest, s1: &Checkpoint, s2: &Checkpoint, hold_out: Option<&str>) -> Result<EvalReport> {
    let m1 = train::stage1_from_checkpoint(s1)?;
    let m2 = train::stage2_from_checkpoint(s2)?;
    let methods = &s2.meta.methods;
    let hold_out = hold_out.filter(|h| manifest.methods().iter().any(|m| m == h));
    let data = ProtocolData::load(manifest, methods, hold_out, m2.cfg.image_size)?;
    eval::run_protocol(&m1, &m2, &data, (&s1.meta.config, &s2.meta.config))
}

/// gen-corpus → stage 1 → stage 2 → eval under `out`.
pub fn run_experiment(cfg: &CliConfig, out: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    create_dir(out)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")
        .map_err(|e| Error::io(out.join("config.json"), e))?;
    let corpus_dir = out.join("corpus");
    let manifest = corpus::gen_corpus(&cfg.corpus, &corpus_dir)?;
    let methods = train_methods(&manifest, cfg.eval.hold_out.as_deref())?;
    let data = training_data(&manifest, &methods, cfg.train.model.image_size)?;

    let s1 = train::train_stage1(&cfg.train, &data, Some(&out.join("stage1.last_good.fsck")))?;
    s1.checkpoint.save(&out.join("stage1.fsck"))?;
    s1.metrics.save_csv(&out.join("stage1_metrics.csv"))?;
    let s2 = train::train_stage2(&cfg.train, &data, &s1.checkpoint, Some(&out.join("stage2.last_good.fsck")))?;
    s2.checkpoint.save(&out.join("stage2.fsck"))?;
    s2.metrics.save_csv(&out.join("stage2_metrics.csv"))?;

    let report = evaluate(&manifest, &s1.checkpoint, &s2.checkpoint, cfg.eval.hold_out.as_deref())?;
    eval::emit_report(&report, out, ReportFormats::ALL)?;
    Ok(report)
}
