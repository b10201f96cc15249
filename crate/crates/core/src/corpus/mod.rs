//! Synthetic multi-method corpus, JSON manifests, directory import and
//! paired real/fake batch loading.

pub mod io;
mod loader;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loader::{Dataset, LoadedImage, PairLoader, PairedBatch};
pub use synth::{mix_seed, render_fake, render_fake_base, render_real, Method};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const GENERATOR: &str = "forgesem-synth/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REAL_LABEL: &str = "real";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StorageFormat {
    #[default]
    Png,
    Bin,
}

impl StorageFormat {
    fn extension(self) -> &'static str {
        match self {
            StorageFormat::Png => "png",
            StorageFormat::Bin => "bin",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub n_real: usize,
    pub n_fake_per_method: usize,
    pub methods: Vec<Method>,
    pub image_size: usize,
    pub seed: u64,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub format: StorageFormat,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_real: 300,
            n_fake_per_method: 150,
            methods: Method::ALL.to_vec(),
            image_size: 32,
            seed: 0,
            split: [0.7, 0.1, 0.2],
            format: StorageFormat::Png,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_real == 0 || self.n_fake_per_method == 0 {
            return Err(Error::Config("corpus counts must be > 0".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("corpus needs at least one method".into()));
        }
        let mut sorted = self.methods.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.methods.len() {
            return Err(Error::Config("duplicate corpus methods".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!("image_size {} too small", self.image_size)));
        }
        if self.split.iter().any(|f| !(0.0..=1.0).contains(f)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {:?} must be in [0,1] and sum to 1", self.split)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    /// Relative to the manifest directory.
    pub path: String,
    /// 0 = fake, 1 = real.
    pub y: u8,
    /// `"real"` or the forgery method name.
    pub method: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub artifacts: Vec<String>,
}

impl Record {
    pub fn is_real(&self) -> bool {
        self.y == 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    #[serde(default)]
    pub generator: String,
    pub spec: Option<CorpusSpec>,
    pub records: Vec<Record>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl CorpusManifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Incompatible(format!("manifest version {} unsupported", self.version)));
        }
        for r in &self.records {
            if r.y > 1 || (r.y == 1) != (r.method == REAL_LABEL) {
                return Err(Error::Config(format!("record {} has inconsistent labels", r.path)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: CorpusManifest = serde_json::from_str(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, record: &Record) -> PathBuf {
        self.root.join(&record.path)
    }

    /// A manifest over the same root keeping only matching records.
    pub fn filter(&self, keep: impl Fn(&Record) -> bool) -> Self {
        CorpusManifest {
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            ..self.clone()
        }
    }

    /// Distinct fake method names in first-seen order.
    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in self.records.iter().filter(|r| !r.is_real()) {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        out
    }

    pub fn count(&self, split: Option<Split>, real: bool) -> usize {
        self.records
            .iter()
            .filter(|r| split.is_none_or(|s| r.split == s) && r.is_real() == real)
            .count()
    }
}

/// Stratified split assignment of `n` items of one group.
fn assign_splits(n: usize, fractions: [f64; 3], seed: u64, group: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 100 + group, 0)));
    let n_train = (n as f64 * fractions[0]).round() as usize;
    let n_val = ((n as f64 * fractions[1]).round() as usize).min(n - n_train);
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

fn method_stream(m: Method) -> u64 {
    2 + Method::ALL.iter().position(|&x| x == m).unwrap() as u64
}

/// Per-image seed of a corpus entry; `None` is a real image.
pub fn image_seed(corpus_seed: u64, method: Option<Method>, index: usize) -> u64 {
    let stream = method.map_or(1, method_stream);
    mix_seed(corpus_seed, stream, index as u64)
}

/// Generate the corpus under `out_dir` and write `manifest.json` there.
pub fn gen_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<CorpusManifest> {
    spec.validate()?;
    let ext = spec.format.extension();
    let encode = |t: &crate::gradcore::Tensor| match spec.format {
        StorageFormat::Png => io::encode_png(t),
        StorageFormat::Bin => io::encode_bin(t),
    };
    let mut records = Vec::with_capacity(spec.n_real + spec.n_fake_per_method * spec.methods.len());

    let mut groups: Vec<(Option<Method>, usize)> = vec![(None, spec.n_real)];
    groups.extend(spec.methods.iter().map(|&m| (Some(m), spec.n_fake_per_method)));
    for (g, &(method, count)) in groups.iter().enumerate() {
        let dir_name = method.map_or(REAL_LABEL, Method::name);
        let dir = out_dir.join(dir_name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let splits = assign_splits(count, spec.split, spec.seed, g as u64);
        for (i, split) in splits.into_iter().enumerate() {
            let seed = image_seed(spec.seed, method, i);
            let synth = match method {
                None => render_real(seed, spec.image_size),
                Some(m) => render_fake(seed, m, spec.image_size),
            };
            let rel = format!("{dir_name}/{i:05}.{ext}");
            let path = out_dir.join(&rel);
            fs::write(&path, encode(&synth.image)?).map_err(|e| Error::io(&path, e))?;
            records.push(Record {
                path: rel,
                y: u8::from(method.is_none()),
                method: dir_name.to_string(),
                split,
                artifacts: method.map(|m| m.artifacts().map(String::from).to_vec()).unwrap_or_default(),
            });
        }
    }
    let manifest = CorpusManifest {
        version: MANIFEST_VERSION,
        generator: GENERATOR.into(),
        spec: Some(spec.clone()),
        records,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Outcome of a directory import.
#[derive(Clone, Debug)]
pub struct Imported {
    pub manifest: CorpusManifest,
    /// Files that could not be decoded as images.
    pub skipped: usize,
}

/// Build a manifest from a `<label>/<method>/*` layout, `label` being
/// `real` or `fake`. Real images conventionally sit under `real/none/`.
pub fn import_images(dir: &Path, size: usize, split: [f64; 3], seed: u64) -> Result<Imported> {
    let mut found: Vec<(u8, String, String)> = Vec::new();
    let mut skipped = 0;
    for label in ["fake", REAL_LABEL] {
        let label_dir = dir.join(label);
        if !label_dir.is_dir() {
            continue;
        }
        let mut method_dirs: Vec<PathBuf> = read_dir_sorted(&label_dir)?.into_iter().filter(|p| p.is_dir()).collect();
        method_dirs.sort();
        for mdir in method_dirs {
            let method_name = mdir.file_name().unwrap().to_string_lossy().to_string();
            for file in read_dir_sorted(&mdir)?.into_iter().filter(|p| p.is_file()) {
                if let Err(e) = io::load_image(&file, size) {
                    log::warn!("skipping {}: {e}", file.display());
                    skipped += 1;
                    continue;
                }
                let rel = file.strip_prefix(dir).unwrap().to_string_lossy().replace('\\', "/");
                let y = u8::from(label == REAL_LABEL);
                let method = if y == 1 { REAL_LABEL.to_string() } else { method_name.clone() };
                found.push((y, method, rel));
            }
        }
    }
    if found.is_empty() {
        return Err(Error::Precondition(format!("no images found under {}", dir.display())));
    }
    let mut groups: Vec<String> = found.iter().map(|f| f.1.clone()).collect();
    groups.sort();
    groups.dedup();
    let mut records = Vec::with_capacity(found.len());
    for (g, name) in groups.iter().enumerate() {
        let members: Vec<&(u8, String, String)> = found.iter().filter(|f| &f.1 == name).collect();
        let splits = assign_splits(members.len(), split, seed, g as u64);
        for (f, s) in members.into_iter().zip(splits) {
            records.push(Record {
                path: f.2.clone(),
                y: f.0,
                method: f.1.clone(),
                split: s,
                artifacts: Vec::new(),
            });
        }
    }
    Ok(Imported {
        manifest: CorpusManifest {
            version: MANIFEST_VERSION,
            generator: "import".into(),
            spec: None,
            records,
            root: dir.to_path_buf(),
        },
        skipped,
    })
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}
