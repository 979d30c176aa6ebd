//! Scoring prediction CSVs against reference CSVs without a model.

use crate::error::CliError;
use crate::io::{self, LabelRow};
use seld_core::accdoa::{FrameLabels, N_CLASSES};
use seld_core::metrics::{self, EventList, SeldCounts, SeldScores, DEFAULT_SEGMENT_FRAMES};
use seld_core::synth;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// `<id>.csv` files in `dir`, keyed by id.
fn csv_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>, CliError> {
    let entries =
        std::fs::read_dir(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            if let Some(id) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(id.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

fn to_labels(rows: &[LabelRow], frames: usize, path: &Path) -> Result<FrameLabels, CliError> {
    let mut labels = FrameLabels::empty(frames, N_CLASSES);
    for r in rows {
        if r.frame >= frames {
            continue;
        }
        labels
            .set_active(r.frame, r.class, synth::direction(r.azimuth, r.elevation))
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    Ok(labels)
}

/// Scores every reference clip in `ref_dir` against the same-named file in
/// `pred_dir`. A missing prediction file counts as no detections; a
/// prediction without a reference is an error. Without `frames`, each clip
/// spans its last labelled frame rounded up to whole segments; with it,
/// rows past `frames` are ignored, as when loading training labels.
pub fn score_dirs(
    ref_dir: &Path,
    pred_dir: &Path,
    frames: Option<usize>,
    theta_deg: f64,
) -> Result<SeldScores, CliError> {
    let refs = csv_files(ref_dir)?;
    let preds = csv_files(pred_dir)?;
    if refs.is_empty() {
        return Err(CliError::Data(format!(
            "no reference CSVs in {}",
            ref_dir.display()
        )));
    }
    if let Some(extra) = preds.keys().find(|k| !refs.contains_key(*k)) {
        return Err(CliError::Data(format!(
            "prediction {extra:?} has no reference clip"
        )));
    }
    let mut counts = SeldCounts::default();
    for (id, ref_path) in &refs {
        let ref_rows = io::read_label_rows(ref_path)?;
        let pred_rows = match preds.get(id) {
            Some(p) => io::read_label_rows(p)?,
            None => Vec::new(),
        };
        let n = frames.unwrap_or_else(|| {
            let last = ref_rows
                .iter()
                .chain(&pred_rows)
                .map(|r| r.frame + 1)
                .max()
                .unwrap_or(0);
            last.div_ceil(DEFAULT_SEGMENT_FRAMES).max(1) * DEFAULT_SEGMENT_FRAMES
        });
        let r = to_labels(&ref_rows, n, ref_path)?;
        let p = to_labels(&pred_rows, n, preds.get(id).unwrap_or(ref_path))?;
        let c = metrics::count(
            &EventList::from(&r),
            &EventList::from(&p),
            theta_deg,
            DEFAULT_SEGMENT_FRAMES,
        )?;
        counts.merge(&c);
    }
    Ok(counts.finalize())
}
