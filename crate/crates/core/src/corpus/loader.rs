use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{io, mix_seed, CorpusManifest, Record, Split};
use crate::error::{Error, Result};
use crate::filters::highpass_stream;
use crate::gradcore::Tensor;
use crate::losses::{Labels, FAKE, REAL, REAL_METHOD};

const HIGHPASS_CHUNK: usize = 64;

#[derive(Clone, Debug)]
pub struct LoadedImage {
    pub record: Record,
    pub y: usize,
    pub method_class: usize,
}

/// Preloaded images of one manifest selection with their high-pass stream.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub items: Vec<LoadedImage>,
    /// `N×3×S×S`.
    pub images: Tensor,
    pub highpass: Tensor,
    pub size: usize,
    pub methods: Vec<String>,
}

impl Dataset {
    /// Load every record of `split` (all splits when `None`). Method class
    /// `k + 1` is `methods[k]`; fakes of unlisted methods get `methods.len() + 1`.
    pub fn load(manifest: &CorpusManifest, split: Option<Split>, methods: &[String], size: usize) -> Result<Self> {
        let records: Vec<&Record> = manifest
            .records
            .iter()
            .filter(|r| split.is_none_or(|s| r.split == s))
            .collect();
        if records.is_empty() {
            return Err(Error::Precondition(format!("no records for split {split:?}")));
        }
        let mut items = Vec::with_capacity(records.len());
        let mut data = Vec::with_capacity(records.len() * 3 * size * size);
        for r in records {
            let img = io::load_image(&manifest.resolve(r), size)?;
            data.extend_from_slice(img.data());
            let method_class = if r.is_real() {
                REAL_METHOD
            } else {
                methods.iter().position(|m| *m == r.method).map_or(methods.len() + 1, |k| k + 1)
            };
            items.push(LoadedImage {
                record: r.clone(),
                y: if r.is_real() { REAL } else { FAKE },
                method_class,
            });
        }
        let images = Tensor::new(&[items.len(), 3, size, size], data)?;
        let highpass = chunked_highpass(&images)?;
        Ok(Dataset {
            items,
            images,
            highpass,
            size,
            methods: methods.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn indices(&self, keep: impl Fn(&LoadedImage) -> bool) -> Vec<usize> {
        (0..self.len()).filter(|&i| keep(&self.items[i])).collect()
    }

    pub fn labels(&self, rows: &[usize]) -> Result<Labels> {
        Labels::new(
            rows.iter().map(|&i| self.items[i].y).collect(),
            rows.iter().map(|&i| self.items[i].method_class).collect(),
        )
    }
}

fn chunked_highpass(images: &Tensor) -> Result<Tensor> {
    let n = images.shape()[0];
    let mut data = Vec::with_capacity(images.len());
    let mut start = 0;
    while start < n {
        let rows: Vec<usize> = (start..(start + HIGHPASS_CHUNK).min(n)).collect();
        data.extend(highpass_stream(&images.select(&rows))?.into_data());
        start += HIGHPASS_CHUNK;
    }
    Tensor::new(images.shape(), data)
}

/// One balanced batch: fakes first, then reals.
#[derive(Clone, Debug)]
pub struct PairedBatch {
    pub rows: Vec<usize>,
    pub images: Tensor,
    pub highpass: Tensor,
    pub labels: Labels,
}

impl PairedBatch {
    pub fn half(&self) -> usize {
        self.rows.len() / 2
    }
}

/// Balanced sampler: each batch holds `batch/2` fakes and `batch/2` reals.
/// An epoch walks the larger pool once without replacement; the smaller pool
/// is reshuffled whenever it runs out. Order depends only on seed and epoch.
#[derive(Clone, Debug)]
pub struct PairLoader {
    fakes: Vec<usize>,
    reals: Vec<usize>,
    half: usize,
    seed: u64,
    epoch: u64,
    step: usize,
    fake_order: Vec<usize>,
    real_order: Vec<usize>,
}

impl PairLoader {
    pub fn new(data: &Dataset, batch: usize, seed: u64) -> Result<Self> {
        if batch < 2 || !batch.is_multiple_of(2) {
            return Err(Error::Config(format!("batch size {batch} must be even and ≥ 2")));
        }
        let half = batch / 2;
        let fakes = data.indices(|it| it.y == FAKE);
        let reals = data.indices(|it| it.y == REAL);
        if fakes.len() < half || reals.len() < half {
            return Err(Error::Precondition(format!(
                "need ≥ {half} real and fake images, found {} real and {} fake",
                reals.len(),
                fakes.len()
            )));
        }
        let mut loader = PairLoader {
            fakes,
            reals,
            half,
            seed,
            epoch: 0,
            step: 0,
            fake_order: Vec::new(),
            real_order: Vec::new(),
        };
        loader.start_epoch(0);
        Ok(loader)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.fakes.len().max(self.reals.len()) / self.half
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn pool_order(&self, pool: &[usize], stream: u64, lap: usize) -> Vec<usize> {
        let mut order = pool.to_vec();
        let seed = mix_seed(self.seed, stream, (self.epoch << 20) | lap as u64);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }

    fn take(&self, pool: &[usize], stream: u64) -> Vec<usize> {
        let laps_needed = (self.steps_per_epoch() * self.half).div_ceil(pool.len());
        let mut order = Vec::with_capacity(laps_needed * pool.len());
        for lap in 0..laps_needed {
            order.extend(self.pool_order(pool, stream, lap));
        }
        order
    }

    pub fn start_epoch(&mut self, epoch: u64) {
        self.epoch = epoch;
        self.step = 0;
        self.fake_order = self.take(&self.fakes, 0xFA4E);
        self.real_order = self.take(&self.reals, 0x4EA1);
    }

    /// Next batch of the current epoch, `None` once it is exhausted.
    pub fn next_batch(&mut self, data: &Dataset) -> Result<Option<PairedBatch>> {
        if self.step >= self.steps_per_epoch() {
            return Ok(None);
        }
        let span = self.step * self.half..(self.step + 1) * self.half;
        self.step += 1;
        let mut rows = self.fake_order[span.clone()].to_vec();
        rows.extend_from_slice(&self.real_order[span]);
        Ok(Some(PairedBatch {
            images: data.images.select(&rows),
            highpass: data.highpass.select(&rows),
            labels: data.labels(&rows)?,
            rows,
        }))
    }
}
