use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{permutation, Adam, Checkpoint, EpochRecord, ImageStore, RunDir, Stage, TrainConfig};
use crate::dan::{dan_total_loss, Dan, DanLossParts, DanLossReport, ImagePool, DISCRIMINATOR_PREFIXES, GENERATOR_PREFIXES};
use crate::data::{DatasetIndex, DatasetRecord, Domain, ImageBatch, UnlabeledImages};
use crate::error::{Error, Result};
use crate::nn::scalar;

pub struct DanRun {
    pub dan: Dan,
    pub checkpoint: Checkpoint,
}

fn report_losses(r: &DanLossReport) -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("l_adv_g".into(), r.l_adv_g),
        ("l_adv_f".into(), r.l_adv_f),
        ("l_disc_s".into(), r.l_disc_s),
        ("l_disc_t".into(), r.l_disc_t),
        ("l_cyc".into(), r.l_cyc),
        ("l_id".into(), r.l_id),
        ("l_style".into(), r.l_style),
        ("total".into(), r.total),
    ])
}

fn snapshot(dan: &Dan, config: &TrainConfig, epoch: usize, history: &[EpochRecord], opts: [&Adam; 2]) -> Result<Checkpoint> {
    Ok(Checkpoint {
        stage: Stage::Dan,
        config: config.clone(),
        config_hash: config.hash(),
        epoch,
        history: history.to_vec(),
        params: dan.store.export()?,
        optimizers: BTreeMap::from([
            ("generator".to_string(), opts[0].state()?),
            ("discriminator".to_string(), opts[1].state()?),
        ]),
    })
}

/// Unsupervised translation training. It only ever sees image paths.
pub fn train_dan(config: &TrainConfig, source: &UnlabeledImages, target: &UnlabeledImages) -> Result<DanRun> {
    config.validate()?;
    if source.paths.is_empty() || target.paths.is_empty() {
        return Err(Error::InsufficientData(format!(
            "translation needs images in both domains, got {} source and {} target",
            source.paths.len(),
            target.paths.len()
        )));
    }
    let cfg = &config.dan;
    let dan = Dan::new(&cfg.model, DType::F32, config.seed)?;
    let mut gen_opt = Adam::new(dan.store.trainable_with_prefix(&GENERATOR_PREFIXES), cfg.lr, cfg.beta1, cfg.beta2);
    let mut disc_opt = Adam::new(dan.store.trainable_with_prefix(&DISCRIMINATOR_PREFIXES), cfg.lr, cfg.beta1, cfg.beta2);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut pool_x = ImagePool::new(cfg.pool_size, config.seed.wrapping_add(2));
    let mut pool_y = ImagePool::new(cfg.pool_size, config.seed.wrapping_add(3));
    let mut run = RunDir::create(&config.checkpoint_dir, config)?;

    let xs = ImageStore::new(source.paths.clone(), config.image_size)?;
    let ys = ImageStore::new(target.paths.clone(), config.image_size)?;
    let b = config.batch_size;
    let steps = xs.len().max(ys.len()).div_ceil(b);
    let device = Device::Cpu;
    let load = |store: &ImageStore, order: &[usize], step: usize| -> Result<Tensor> {
        // the smaller domain wraps around
        let positions: Vec<usize> = (0..b).map(|k| order[(step * b + k) % order.len()]).collect();
        store.batch(&positions)?.to_tensor(DType::F32, &device)
    };

    let mut history = Vec::with_capacity(config.epochs + 1);
    {
        let ident_x: Vec<usize> = (0..xs.len()).collect();
        let ident_y: Vec<usize> = (0..ys.len()).collect();
        let (x, y) = (load(&xs, &ident_x, 0)?, load(&ys, &ident_y, 0)?);
        let terms = dan.generator_terms(&x, &y, &cfg.weights)?;
        let (ds, dt) = dan.discriminator_losses(&x, &y, &terms.fake_x, &terms.fake_y)?;
        let parts = DanLossParts { l_disc_s: scalar(&ds)?, l_disc_t: scalar(&dt)?, ..terms.parts()? };
        let report = dan_total_loss(&parts, &cfg.weights)?;
        history.push(EpochRecord { epoch: 0, losses: report_losses(&report), lr: cfg.lr, wall_time: run.elapsed() });
    }
    run.log_epoch(&history[0])?;
    run.save(&snapshot(&dan, config, 0, &history, [&gen_opt, &disc_opt])?)?;

    for epoch in 1..=config.epochs {
        let order_x = permutation(xs.len(), &mut rng);
        let order_y = permutation(ys.len(), &mut rng);
        let mut reports = Vec::with_capacity(steps);
        for step in 0..steps {
            let (x, y) = (load(&xs, &order_x, step)?, load(&ys, &order_y, step)?);
            let terms = dan.generator_terms(&x, &y, &cfg.weights)?;
            let mut parts = terms.parts()?;
            let abort = |run: &mut RunDir, e: Error| -> Error {
                let _ = run.log(&json!({ "event": "abort", "epoch": epoch, "step": step, "error": e.to_string() }));
                log::error!("aborting DAN training at epoch {epoch} step {step}: {e}");
                e
            };
            if let Err(e) = dan_total_loss(&parts, &cfg.weights) {
                return Err(abort(&mut run, e));
            }
            gen_opt.step(&terms.total.backward()?)?;

            let fake_x = pool_x.query(&terms.fake_x)?;
            let fake_y = pool_y.query(&terms.fake_y)?;
            let (ds, dt) = dan.discriminator_losses(&x, &y, &fake_x, &fake_y)?;
            parts.l_disc_s = scalar(&ds)?;
            parts.l_disc_t = scalar(&dt)?;
            let report = match dan_total_loss(&parts, &cfg.weights) {
                Ok(r) => r,
                Err(e) => return Err(abort(&mut run, e)),
            };
            disc_opt.step(&(ds + dt)?.backward()?)?;
            reports.push(report);
        }
        let mean = DanLossReport::mean(&reports).expect("at least one step per epoch");
        let record = EpochRecord { epoch, losses: report_losses(&mean), lr: cfg.lr, wall_time: run.elapsed() };
        log::info!("dan epoch {epoch}: total {:.4}", mean.total);
        run.log_epoch(&record)?;
        history.push(record);
        run.save(&snapshot(&dan, config, epoch, &history, [&gen_opt, &disc_opt])?)?;
    }
    let checkpoint = snapshot(&dan, config, config.epochs, &history, [&gen_opt, &disc_opt])?;
    Ok(DanRun { dan, checkpoint })
}

pub fn load_dan(ckpt: &Checkpoint) -> Result<Dan> {
    if ckpt.stage != Stage::Dan {
        return Err(Error::InvalidArgument("checkpoint is not a translation (dan) checkpoint".into()));
    }
    let dan = Dan::new(&ckpt.config.dan.model, DType::F32, ckpt.config.seed)?;
    dan.store.import(&ckpt.params)?;
    Ok(dan)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    SourceToTarget,
    TargetToSource,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::SourceToTarget => "source_to_target",
            Direction::TargetToSource => "target_to_source",
        }
    }

    fn destination(self) -> Domain {
        match self {
            Direction::SourceToTarget => Domain::Target,
            Direction::TargetToSource => Domain::Source,
        }
    }
}

/// Translates with the checkpoint's own image size and batch size.
pub fn translate_dataset(ckpt: &Checkpoint, index: &DatasetIndex, direction: Direction, out_root: &Path) -> Result<DatasetIndex> {
    let dan = load_dan(ckpt)?;
    translate_with(&dan, index, direction, ckpt.config.image_size, ckpt.config.batch_size, out_root)
}

/// Writes `out_root/translated/<direction>/NNNNNN.png` per record and the
/// index of the results to `out_root/translated/<direction>.json`.
pub fn translate_with(
    dan: &Dan,
    index: &DatasetIndex,
    direction: Direction,
    image_size: usize,
    batch_size: usize,
    out_root: &Path,
) -> Result<DatasetIndex> {
    let dir = out_root.join("translated").join(direction.as_str());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let generator = match direction {
        Direction::SourceToTarget => &dan.g,
        Direction::TargetToSource => &dan.f,
    };
    let mut records = Vec::with_capacity(index.len());
    for (chunk_no, chunk) in index.records.chunks(batch_size.max(1)).enumerate() {
        let batch = crate::data::load_image_batch(chunk, image_size)?;
        let out = generator.translate(&batch.to_tensor(DType::F32, &Device::Cpu)?)?;
        let images = ImageBatch::from_tensor(&out)?;
        for (k, rec) in chunk.iter().enumerate() {
            let i = chunk_no * batch_size.max(1) + k;
            let path = dir.join(format!("{i:06}.png"));
            images.save_png(k, &path)?;
            records.push(DatasetRecord { image_path: path, domain_tag: direction.destination(), ..rec.clone() });
        }
    }
    let translated = DatasetIndex::new(index.split, records);
    translated.write_json(&out_root.join("translated").join(format!("{}.json", direction.as_str())))?;
    Ok(translated)
}
