//! Training loops, dataset translation, checkpoints and run logs.
//!
//! Every run writes into its `checkpoint_dir`: an append-only
//! `run_log.jsonl` (the effective config first, then one record per epoch),
//! the two most recent `epoch_NNNN/` checkpoints and `best/`, the epoch
//! with the lowest total loss.

mod checkpoint;
mod config;
mod dan_loop;
mod optim;
mod reid_loop;

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::data::{load_image, ImageBatch};
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, EpochRecord};
pub use config::{DanTrainConfig, DataConfig, DataSource, ReidTrainConfig, Stage, TrainConfig};
pub use dan_loop::{load_dan, train_dan, translate_dataset, translate_with, DanRun, Direction};
pub use optim::{Adam, OptimizerState, Sgd};
pub use reid_loop::{embed_index, load_attnet, train_reid, ReidRun};

const RUN_LOG: &str = "run_log.jsonl";
const KEEP_LAST: usize = 2;

/// Output directory of one training run.
pub(crate) struct RunDir {
    root: PathBuf,
    log: File,
    started: Instant,
    best: Option<f64>,
}

impl RunDir {
    pub(crate) fn create(root: &Path, config: &TrainConfig) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join(RUN_LOG);
        let log = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        let mut run = Self { root: root.to_path_buf(), log, started: Instant::now(), best: None };
        run.log(&json!({ "event": "config", "config_hash": config.hash(), "config": config.to_json() }))?;
        Ok(run)
    }

    pub(crate) fn elapsed(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    pub(crate) fn log(&mut self, record: &Value) -> Result<()> {
        let path = self.root.join(RUN_LOG);
        writeln!(self.log, "{record}").map_err(|e| Error::io(&path, e))?;
        self.log.flush().map_err(|e| Error::io(&path, e))
    }

    pub(crate) fn log_epoch(&mut self, record: &EpochRecord) -> Result<()> {
        let value = serde_json::to_value(record).map_err(|e| Error::json("epoch record", e))?;
        self.log(&value)
    }

    /// Saves `epoch_NNNN/`, prunes older epochs and refreshes `best/`.
    pub(crate) fn save(&mut self, ckpt: &Checkpoint) -> Result<()> {
        save_checkpoint(ckpt, &self.root.join(format!("epoch_{:04}", ckpt.epoch)))?;
        let mut epochs: Vec<PathBuf> = fs::read_dir(&self.root)
            .map_err(|e| Error::io(&self.root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("epoch_")))
            .collect();
        epochs.sort();
        for old in epochs.iter().rev().skip(KEEP_LAST) {
            fs::remove_dir_all(old).map_err(|e| Error::io(old, e))?;
        }
        let total = ckpt.history.last().and_then(|r| r.losses.get("total")).copied();
        if let Some(total) = total {
            if self.best.is_none_or(|b| total < b) {
                self.best = Some(total);
                save_checkpoint(ckpt, &self.root.join("best"))?;
            }
        }
        Ok(())
    }
}

/// Images addressed by position, decoded once when they fit in memory.
pub(crate) struct ImageStore {
    paths: Vec<PathBuf>,
    size: usize,
    cache: Option<Vec<Vec<f32>>>,
}

impl ImageStore {
    const CACHE_BYTES: usize = 1 << 30;

    pub(crate) fn new(paths: Vec<PathBuf>, size: usize) -> Result<Self> {
        let bytes = paths.len() * size * size * 3 * 4;
        let cache = if bytes <= Self::CACHE_BYTES {
            Some(paths.iter().map(|p| load_image(p, size)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        Ok(Self { paths, size, cache })
    }

    pub(crate) fn len(&self) -> usize {
        self.paths.len()
    }

    pub(crate) fn batch(&self, positions: &[usize]) -> Result<ImageBatch> {
        let mut data = Vec::with_capacity(positions.len() * self.size * self.size * 3);
        for &p in positions {
            match &self.cache {
                Some(c) => data.extend_from_slice(&c[p]),
                None => data.extend(load_image(&self.paths[p], self.size)?),
            }
        }
        ImageBatch::new(positions.len(), self.size, self.size, data)
    }
}

pub(crate) fn permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}
