use std::collections::BTreeMap;

use candle_core::{DType, Device};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{load_checkpoint, Checkpoint, EpochRecord, ImageStore, RunDir, Sgd, Stage, TrainConfig};
use crate::attnet::{AttNet, Mode};
use crate::data::{load_image_batch, sample_verification_pairs_with, DatasetIndex, PairIndices};
use crate::embedding::Embeddings;
use crate::error::{Error, Result};
use crate::nn::scalar;

pub struct ReidRun {
    pub net: AttNet,
    pub checkpoint: Checkpoint,
}

fn snapshot(net: &AttNet, config: &TrainConfig, epoch: usize, history: &[EpochRecord], opt: &Sgd) -> Result<Checkpoint> {
    Ok(Checkpoint {
        stage: Stage::Reid,
        config: config.clone(),
        config_hash: config.hash(),
        epoch,
        history: history.to_vec(),
        params: net.store.export()?,
        optimizers: BTreeMap::from([("sgd".to_string(), opt.state()?)]),
    })
}

/// The config actually trained: the identity count comes from the data.
fn effective_config(config: &TrainConfig, index: &DatasetIndex) -> TrainConfig {
    let mut cfg = config.clone();
    cfg.reid.model.num_identities = index.num_identities;
    cfg
}

fn losses(id: f64, verif: f64, total: f64) -> BTreeMap<String, f64> {
    BTreeMap::from([("id".into(), id), ("verif".into(), verif), ("total".into(), total)])
}

/// Siamese identification + verification training on a labeled index with
/// dense identities `0..num_identities`.
pub fn train_reid(config: &TrainConfig, train_index: &DatasetIndex) -> Result<ReidRun> {
    if train_index.is_empty() {
        return Err(Error::InsufficientData("re-identification training needs a non-empty index".into()));
    }
    if let Some(r) = train_index.records.iter().find(|r| r.vehicle_id as usize >= train_index.num_identities) {
        return Err(Error::InvalidArgument(format!(
            "identity {} is outside the dense range 0..{}",
            r.vehicle_id, train_index.num_identities
        )));
    }
    let config = effective_config(config, train_index);
    config.validate()?;
    let cfg = &config.reid;
    let net = AttNet::new(&cfg.model, DType::F32, config.seed)?;
    let mut run = RunDir::create(&config.checkpoint_dir, &config)?;
    match &cfg.model.pretrained {
        Some(dir) => {
            let n = net.store.import_subset(&load_checkpoint(dir)?.params, "backbone.")?;
            run.log(&json!({ "event": "backbone_init", "source": dir, "tensors": n }))?;
        }
        None => {
            log::warn!("no pretrained backbone configured; starting from random initialization");
            run.log(&json!({ "event": "backbone_init", "source": "random" }))?;
        }
    }
    let mut opt = Sgd::new(net.store.trainable(), cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let images = ImageStore::new(train_index.records.iter().map(|r| r.image_path.clone()).collect(), config.image_size)?;
    let b = config.batch_size;
    let steps = train_index.len().div_ceil(b);
    let device = Device::Cpu;
    let tensors = |pairs: &PairIndices| -> Result<_> {
        Ok((
            images.batch(&pairs.a)?.to_tensor(DType::F32, &device)?,
            images.batch(&pairs.b)?.to_tensor(DType::F32, &device)?,
        ))
    };

    let mut history = Vec::with_capacity(config.epochs + 1);
    {
        let pairs = sample_verification_pairs_with(train_index, b, cfg.pos_ratio, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
        let (a, bb) = tensors(&pairs)?;
        let t = net.total_loss(&a, &bb, &pairs.ids_a, &pairs.ids_b, &pairs.same_flags, Mode::Eval)?;
        let record = EpochRecord {
            epoch: 0,
            losses: losses(scalar(&t.id)?, scalar(&t.verif)?, scalar(&t.total)?),
            lr: cfg.lr_at(0, config.epochs),
            wall_time: run.elapsed(),
        };
        run.log_epoch(&record)?;
        history.push(record);
    }
    run.save(&snapshot(&net, &config, 0, &history, &opt)?)?;

    for epoch in 1..=config.epochs {
        opt.lr = cfg.lr_at(epoch - 1, config.epochs);
        let (mut id_sum, mut verif_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for step in 0..steps {
            let pairs = sample_verification_pairs_with(train_index, b, cfg.pos_ratio, &mut rng)?;
            let (a, bb) = tensors(&pairs)?;
            let t = net.total_loss(&a, &bb, &pairs.ids_a, &pairs.ids_b, &pairs.same_flags, Mode::Train(&mut dropout_rng))?;
            let (id, verif, total) = (scalar(&t.id)?, scalar(&t.verif)?, scalar(&t.total)?);
            if let Some((term, _)) = [("id", id), ("verif", verif)].into_iter().find(|(_, v)| !v.is_finite()) {
                let e = Error::NonFinite { term: term.to_string() };
                run.log(&json!({ "event": "abort", "epoch": epoch, "step": step, "error": e.to_string() }))?;
                return Err(e);
            }
            opt.step(&t.total.backward()?)?;
            id_sum += id;
            verif_sum += verif;
            total_sum += total;
        }
        let n = steps as f64;
        let record = EpochRecord {
            epoch,
            losses: losses(id_sum / n, verif_sum / n, total_sum / n),
            lr: opt.lr,
            wall_time: run.elapsed(),
        };
        log::info!("reid epoch {epoch}: total {:.4}", total_sum / n);
        run.log_epoch(&record)?;
        history.push(record);
        run.save(&snapshot(&net, &config, epoch, &history, &opt)?)?;
    }
    let checkpoint = snapshot(&net, &config, config.epochs, &history, &opt)?;
    Ok(ReidRun { net, checkpoint })
}

pub fn load_attnet(ckpt: &Checkpoint) -> Result<AttNet> {
    if ckpt.stage != Stage::Reid {
        return Err(Error::InvalidArgument("checkpoint is not a re-identification (reid) checkpoint".into()));
    }
    let net = AttNet::new(&ckpt.config.reid.model, DType::F32, ckpt.config.seed)?;
    net.store.import(&ckpt.params)?;
    Ok(net)
}

/// Evaluation-mode retrieval embeddings of every record, in index order.
pub fn embed_index(net: &AttNet, index: &DatasetIndex, batch_size: usize) -> Result<Embeddings> {
    let mut out = Embeddings::new(0, net.config.embedding_dim(), Vec::new())?;
    for chunk in index.records.chunks(batch_size.max(1)) {
        let batch = load_image_batch(chunk, net.config.input_size)?;
        let rows = net.embed(&batch.to_tensor(DType::F32, &Device::Cpu)?)?;
        out.append(&Embeddings::from_rows(&rows)?)?;
    }
    Ok(out)
}
