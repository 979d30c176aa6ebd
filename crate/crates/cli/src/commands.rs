//! The command implementations behind the `seld` binary.

use crate::bench::{self, BenchOptions, BenchReport};
use crate::config::ExperimentConfig;
use crate::data::{self, Chunk};
use crate::error::CliError;
use crate::grid::{self, GridRow};
use crate::io::{self, Manifest, Split};
use crate::score;
use crate::train::{self, RunRecord};
use rayon::prelude::*;
use seld_core::accdoa::FrameLabels;
use seld_core::dsp::{self, MelFilterbank};
use seld_core::metrics::{self, AggregateScores, SeldScores};
use seld_core::model::{ModelConfig, SeldModel};
use seld_core::synth::{self, SceneSpec};
use seld_core::tensor::archive;
use std::fs;
use std::path::{Path, PathBuf};

/// Renders the scene and writes `audio/*.wav`, `labels/*.csv` and the
/// manifest with its train/val/eval split.
pub fn synth(spec: &SceneSpec, out: &Path) -> Result<Manifest, CliError> {
    if spec.n_clips == 0 {
        return Err(CliError::Usage("--clips must be at least 1".into()));
    }
    spec.validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let splits = synth::split_dataset(spec.n_clips, spec.seed)?;
    for sub in [io::AUDIO_DIR, io::LABEL_DIR] {
        fs::create_dir_all(out.join(sub))
            .map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    }
    (0..spec.n_clips).into_par_iter().try_for_each(|i| {
        let clip = synth::render_one(spec, i)?;
        io::write_wav(&io::wav_path(out, &clip.id), &clip.audio)?;
        io::write_labels(&io::label_path(out, &clip.id), &clip.labels)
    })?;
    let manifest = Manifest::new(spec, &splits);
    manifest.save(out)?;
    Ok(manifest)
}

/// Extracts unstandardized features of every clip into the dataset's
/// feature cache. Returns the number of clips.
pub fn extract(data_dir: &Path) -> Result<usize, CliError> {
    let manifest = Manifest::load(data_dir)?;
    let ids: Vec<String> = manifest.clips.iter().map(|c| c.id.clone()).collect();
    let fb = MelFilterbank::default();
    let feats: Vec<_> = ids
        .par_iter()
        .map(|id| {
            let clip = io::read_wav(&io::wav_path(data_dir, id))?;
            Ok(dsp::extract_raw_features(&clip, &fb)?)
        })
        .collect::<Result<_, CliError>>()?;
    let entries: Vec<_> = ids
        .iter()
        .zip(feats)
        .map(|(id, t)| (format!("feat/{id}"), t))
        .collect();
    archive::save(data_dir.join(io::FEATURE_CACHE), &entries)?;
    Ok(entries.len())
}

/// Train, validation and evaluation chunks of a dataset.
pub struct Splits {
    pub train: Vec<Chunk>,
    pub val: Vec<Chunk>,
    pub eval: Vec<Chunk>,
}

pub fn load_splits(data_dir: &Path, chunk_frames: usize) -> Result<Splits, CliError> {
    let manifest = Manifest::load(data_dir)?;
    let load = |s| data::load_split(data_dir, &manifest, s, chunk_frames);
    let splits = Splits {
        train: load(Split::Train)?,
        val: load(Split::Val)?,
        eval: load(Split::Eval)?,
    };
    if splits.train.is_empty() || splits.val.is_empty() || splits.eval.is_empty() {
        return Err(CliError::Data(format!(
            "{}: every split needs at least one {chunk_frames}-frame chunk",
            data_dir.display()
        )));
    }
    Ok(splits)
}

/// Trains every seed of `cfg` on its dataset.
pub fn train(
    cfg: &ExperimentConfig,
    mut progress: impl FnMut(u64, &train::EpochLog),
) -> Result<Vec<RunRecord>, CliError> {
    cfg.validate()?;
    let s = load_splits(&cfg.data_dir, cfg.chunk_frames)?;
    train::run_seeds(cfg, &s.train, &s.val, &s.eval, &mut progress)
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct EvalReport {
    pub config_id: String,
    pub params: usize,
    pub split: Split,
    pub chunks: usize,
    pub loss: f64,
    pub scores: SeldScores,
}

/// Scores a checkpoint on one split; optionally writes per-clip prediction
/// CSVs in the label format.
pub fn eval(
    checkpoint: &Path,
    data_dir: &Path,
    split: Split,
    threshold: f64,
    theta_deg: f64,
    pred_dir: Option<&Path>,
) -> Result<EvalReport, CliError> {
    let model = train::load_checkpoint(checkpoint, None)?;
    let manifest = Manifest::load(data_dir)?;
    let chunks = data::load_split(data_dir, &manifest, split, model.config().feature_frames())?;
    let ev = train::evaluate(&model, &chunks, threshold, theta_deg)?;
    if let Some(dir) = pred_dir {
        write_predictions(dir, &chunks, &ev.predictions)?;
    }
    Ok(EvalReport {
        config_id: model.config().id(),
        params: model.param_count(),
        split,
        chunks: chunks.len(),
        loss: ev.loss,
        scores: ev.scores,
    })
}

/// Reassembles chunk predictions into one label CSV per clip.
fn write_predictions(dir: &Path, chunks: &[Chunk], preds: &[FrameLabels]) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let mut start = 0;
    while start < chunks.len() {
        let id = &chunks[start].clip_id;
        let end = start
            + chunks[start..]
                .iter()
                .take_while(|c| &c.clip_id == id)
                .count();
        let len = preds[start].frames();
        let mut clip = FrameLabels::empty(len * (end - start), preds[start].classes());
        for (c, p) in chunks[start..end].iter().zip(&preds[start..end]) {
            for (f, k, d) in p.active_entries() {
                clip.set_active(c.index * len + f, k, d)?;
            }
        }
        io::write_labels(&dir.join(format!("{id}.csv")), &clip)?;
        start = end;
    }
    Ok(())
}

/// One grid row's outcome.
pub struct AblationRow {
    pub row: GridRow,
    pub aggregate: Option<AggregateScores>,
}

/// Trains every grid row over the seed list of `base` and writes the results
/// table to `results`. With `params_only`, only the params column is filled.
pub fn ablate(
    base: &ExperimentConfig,
    rows: &[GridRow],
    results: &Path,
    params_only: bool,
    mut progress: impl FnMut(&ModelConfig, u64, &train::EpochLog),
) -> Result<Vec<AblationRow>, CliError> {
    let splits = if params_only {
        None
    } else {
        base.validate()?;
        Some(load_splits(&base.data_dir, base.chunk_frames)?)
    };
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let aggregate = match &splits {
            None => None,
            Some(s) => {
                let cfg = ExperimentConfig {
                    model: ModelConfig {
                        label_frames: base.model.label_frames,
                        ..row.config.clone()
                    },
                    ..base.clone()
                };
                cfg.validate()?;
                let records = train::run_seeds(&cfg, &s.train, &s.val, &s.eval, |seed, e| {
                    progress(&cfg.model, seed, e)
                })?;
                let scores: Vec<SeldScores> = records.iter().map(|r| r.scores).collect();
                Some(metrics::aggregate_runs(&scores)?)
            }
        };
        out.push(AblationRow {
            row: row.clone(),
            aggregate,
        });
    }
    let table: Vec<Vec<String>> = out
        .iter()
        .map(|r| grid::results_row(&r.row, r.aggregate.as_ref()))
        .collect();
    grid::write_csv(results, &grid::RESULTS_HEADER, &table)?;
    Ok(out)
}

/// Loads a checkpoint, or initializes `fallback` with seed 0 when none is
/// given.
pub fn model_or_fresh(
    checkpoint: Option<&Path>,
    fallback: ModelConfig,
) -> Result<SeldModel, CliError> {
    match checkpoint {
        Some(p) => train::load_checkpoint(p, None),
        None => Ok(SeldModel::new(fallback, 0)?),
    }
}

pub fn bench(
    mhsa: Option<&Path>,
    baseline: Option<&Path>,
    opts: &BenchOptions,
) -> Result<BenchReport, CliError> {
    let m = model_or_fresh(mhsa, ModelConfig::mhsa(2, 8, true, true))?;
    let g = model_or_fresh(baseline, ModelConfig::baseline())?;
    bench::run(&m, &g, opts)
}

pub fn score(
    ref_dir: &Path,
    pred_dir: &Path,
    frames: Option<usize>,
    theta_deg: f64,
) -> Result<SeldScores, CliError> {
    score::score_dirs(ref_dir, pred_dir, frames, theta_deg)
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

/// Default location of an ablation table.
pub fn default_results_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("results.csv")
}
