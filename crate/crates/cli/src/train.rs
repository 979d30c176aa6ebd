//! Training runs, evaluation and run records.

use crate::config::{ExperimentConfig, SelectBy};
use crate::data::{self, Chunk};
use crate::error::CliError;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seld_core::accdoa::{self, FrameLabels};
use seld_core::dsp::FeatureStats;
use seld_core::metrics::{self, EventList, SeldCounts, SeldScores, DEFAULT_SEGMENT_FRAMES};
use seld_core::model::{mse_loss, ModelConfig, SeldModel};
use seld_core::tensor::{archive, AdamConfig, Tensor};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Chunks per forward pass during evaluation.
const EVAL_BATCH: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean pre-update loss over the epoch's batches.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_scores: SeldScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub train_s: f64,
    pub eval_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub config_id: String,
    pub seed: u64,
    pub params: usize,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    /// Best checkpoint scored on the eval split.
    pub scores: SeldScores,
    pub timings: Timings,
}

/// Predictions and scores of a model over a list of chunks.
pub struct Evaluation {
    pub loss: f64,
    pub counts: SeldCounts,
    pub scores: SeldScores,
    /// Decoded predictions, one per chunk, in input order.
    pub predictions: Vec<FrameLabels>,
}

pub fn evaluate(
    model: &SeldModel,
    chunks: &[Chunk],
    threshold: f64,
    theta_deg: f64,
) -> Result<Evaluation, CliError> {
    if chunks.is_empty() {
        return Err(CliError::Data("no chunks to evaluate".into()));
    }
    let mut counts = SeldCounts::default();
    let mut sq_sum = 0.0;
    let mut n = 0usize;
    let mut predictions = Vec::with_capacity(chunks.len());
    for group in chunks.chunks(EVAL_BATCH) {
        let refs: Vec<&Chunk> = group.iter().collect();
        let (x, y) = data::batch(&refs, model.feature_stats())?;
        let pred = model.predict(&x)?;
        sq_sum += mse_loss(&pred, &y)? * y.numel() as f64;
        n += y.numel();
        let per = pred.numel() / group.len();
        let s = pred.shape().to_vec();
        for (i, c) in group.iter().enumerate() {
            let one = Tensor::new(&s[1..], pred.data()[i * per..(i + 1) * per].to_vec())?;
            let decoded = accdoa::decode(&one, threshold)?;
            let c_counts = metrics::count(
                &EventList::from(&c.labels),
                &EventList::from(&decoded),
                theta_deg,
                DEFAULT_SEGMENT_FRAMES,
            )?;
            counts.merge(&c_counts);
            predictions.push(decoded);
        }
    }
    Ok(Evaluation {
        loss: sq_sum / n as f64,
        counts,
        scores: counts.finalize(),
        predictions,
    })
}

/// Weights after the last epoch and at the selected best epoch, plus the
/// per-epoch log.
pub struct Trained {
    pub best: SeldModel,
    pub last: SeldModel,
    pub best_epoch: usize,
    pub epochs: Vec<EpochLog>,
}

/// Trains one seed. Feature statistics are fitted on `train`; batches are
/// reshuffled every epoch from a stream keyed by `seed`.
pub fn train(
    cfg: &ExperimentConfig,
    seed: u64,
    train: &[Chunk],
    val: &[Chunk],
    mut log: impl FnMut(&EpochLog),
) -> Result<Trained, CliError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(CliError::Data("training split has no chunks".into()));
    }
    if val.is_empty() {
        return Err(CliError::Data("validation split has no chunks".into()));
    }
    let stats = FeatureStats::fit(train.iter().map(|c| &c.features))?;
    let mut model = SeldModel::new(cfg.model.clone(), seed)?;
    model.set_feature_stats(stats);
    let mut opt = model.new_optimizer(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a11_5eed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, SeldModel)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let refs: Vec<&Chunk> = idx.iter().map(|&i| &train[i]).collect();
            let (x, y) = data::batch(&refs, model.feature_stats())?;
            let loss = model.train_step(&mut opt, &x, &y)?;
            if !loss.is_finite() {
                return Err(CliError::Internal(format!(
                    "non-finite training loss at epoch {epoch}"
                )));
            }
            loss_sum += loss;
            batches += 1;
        }
        let v = evaluate(&model, val, cfg.threshold, cfg.theta_deg)?;
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_loss: v.loss,
            val_scores: v.scores,
        };
        log(&entry);
        // lower is better for both keys
        let key = match cfg.select_by {
            SelectBy::Loss => v.loss,
            SelectBy::F20 => -v.scores.f20,
        };
        if best.as_ref().map_or(true, |(k, _, _)| key < *k) {
            best = Some((key, epoch, model.clone()));
        }
        epochs.push(entry);
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(Trained {
        best,
        last: model,
        best_epoch,
        epochs,
    })
}

pub fn save_checkpoint(path: &Path, model: &SeldModel) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    archive::save(path, &model.to_entries())?;
    let cfg_path = model_config_path(path);
    let text = serde_json::to_string_pretty(model.config()).expect("config serializes");
    std::fs::write(cfg_path, text + "\n")?;
    Ok(())
}

/// `<checkpoint>.json`: the model configuration stored beside an archive.
pub fn model_config_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn load_checkpoint(path: &Path, config: Option<&Path>) -> Result<SeldModel, CliError> {
    let cfg_path = config
        .map(Path::to_path_buf)
        .unwrap_or_else(|| model_config_path(path));
    let text = std::fs::read_to_string(&cfg_path)
        .map_err(|e| CliError::Data(format!("model config {}: {e}", cfg_path.display())))?;
    let cfg: ModelConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("model config {}: {e}", cfg_path.display())))?;
    let entries =
        archive::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    SeldModel::from_entries(cfg, entries).map_err(|e| {
        CliError::Data(format!(
            "checkpoint {} does not match its config: {e}",
            path.display()
        ))
    })
}

/// Run directory for one config and seed.
pub fn run_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.out_dir
        .join(cfg.model.id())
        .join(format!("seed_{seed}"))
}

/// Trains every seed of `cfg`, scores the best checkpoint of each on
/// `eval`, and writes checkpoints plus a `record.json` per seed.
pub fn run_seeds(
    cfg: &ExperimentConfig,
    train_chunks: &[Chunk],
    val: &[Chunk],
    eval: &[Chunk],
    mut progress: impl FnMut(u64, &EpochLog),
) -> Result<Vec<RunRecord>, CliError> {
    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        let t0 = Instant::now();
        let trained = train(cfg, seed, train_chunks, val, |e| progress(seed, e))?;
        let train_s = t0.elapsed().as_secs_f64();
        let dir = run_dir(cfg, seed);
        let best_checkpoint = dir.join("best.ckpt");
        let last_checkpoint = dir.join("last.ckpt");
        save_checkpoint(&best_checkpoint, &trained.best)?;
        save_checkpoint(&last_checkpoint, &trained.last)?;
        let t1 = Instant::now();
        let scores = evaluate(&trained.best, eval, cfg.threshold, cfg.theta_deg)?.scores;
        let record = RunRecord {
            config_hash: cfg.hash(),
            config_id: cfg.model.id(),
            seed,
            params: trained.best.param_count(),
            epochs: trained.epochs,
            best_epoch: trained.best_epoch,
            best_checkpoint,
            last_checkpoint,
            scores,
            timings: Timings {
                train_s,
                eval_s: t1.elapsed().as_secs_f64(),
            },
        };
        let text = serde_json::to_string_pretty(&record).expect("record serializes");
        std::fs::write(dir.join("record.json"), text + "\n")?;
        records.push(record);
    }
    Ok(records)
}
