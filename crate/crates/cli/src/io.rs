//! On-disk formats: 4-channel float WAV, per-clip label CSVs and the dataset
//! manifest.

use crate::error::CliError;
use seld_core::accdoa::{FrameLabels, N_CLASSES};
use seld_core::dsp::{FoaClip, SAMPLE_RATE};
use seld_core::synth::{self, SceneSpec, Splits};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const AUDIO_DIR: &str = "audio";
pub const LABEL_DIR: &str = "labels";
pub const MANIFEST: &str = "manifest.json";
pub const FEATURE_CACHE: &str = "features.ckpt";

fn data_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

pub fn write_wav(path: &Path, clip: &FoaClip) -> Result<(), CliError> {
    let spec = hound::WavSpec {
        channels: 4,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| data_err(path, e))?;
    let ch = clip.channels();
    for i in 0..clip.len() {
        for c in ch.iter() {
            w.write_sample(c[i] as f32).map_err(|e| data_err(path, e))?;
        }
    }
    w.finalize().map_err(|e| data_err(path, e))
}

/// Reads a 24 kHz 4-channel float (or 16/24/32-bit integer) WAV.
pub fn read_wav(path: &Path) -> Result<FoaClip, CliError> {
    let mut r = hound::WavReader::open(path).map_err(|e| data_err(path, e))?;
    let spec = r.spec();
    if spec.channels != 4 {
        return Err(data_err(
            path,
            format!("expected 4 channels, found {}", spec.channels),
        ));
    }
    let samples: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => r
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(|e| data_err(path, e))?,
        hound::SampleFormat::Int => {
            let scale = 2f64.powi(spec.bits_per_sample as i32 - 1);
            r.samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()
                .map_err(|e| data_err(path, e))?
        }
    };
    let mut channels = vec![Vec::with_capacity(samples.len() / 4); 4];
    for frame in samples.chunks_exact(4) {
        for (c, &v) in channels.iter_mut().zip(frame) {
            c.push(v);
        }
    }
    FoaClip::new(channels, spec.sample_rate).map_err(|e| data_err(path, e))
}

fn fmt_angle(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

/// One row per active `(frame, class)`: frame, class, azimuth, elevation in
/// degrees with two decimals.
pub fn write_labels(path: &Path, labels: &FrameLabels) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| data_err(path, e))?;
    for (f, c, d) in labels.active_entries() {
        let (mut az, el) = synth::angles(d);
        if fmt_angle(az) == "180.00" {
            az = -180.0;
        }
        w.write_record([f.to_string(), c.to_string(), fmt_angle(az), fmt_angle(el)])
            .map_err(|e| data_err(path, e))?;
    }
    w.flush().map_err(|e| data_err(path, e))
}

/// Parses a label CSV into `frames` label frames. Rows beyond `frames` are
/// dropped; malformed rows report their line number.
pub fn read_labels(path: &Path, frames: usize) -> Result<FrameLabels, CliError> {
    let rows = read_label_rows(path)?;
    let mut labels = FrameLabels::empty(frames, N_CLASSES);
    for row in rows {
        if row.frame < frames {
            labels
                .set_active(
                    row.frame,
                    row.class,
                    synth::direction(row.azimuth, row.elevation),
                )
                .map_err(|e| data_err(path, e))?;
        }
    }
    Ok(labels)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelRow {
    pub frame: usize,
    pub class: usize,
    pub azimuth: f64,
    pub elevation: f64,
}

pub fn read_label_rows(path: &Path) -> Result<Vec<LabelRow>, CliError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| data_err(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| data_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |m: String| CliError::Data(format!("{} line {line}: {m}", path.display()));
        if rec.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", rec.len())));
        }
        let frame = rec[0]
            .parse::<usize>()
            .map_err(|e| bad(format!("frame index {:?}: {e}", &rec[0])))?;
        let class = rec[1]
            .parse::<usize>()
            .map_err(|e| bad(format!("class index {:?}: {e}", &rec[1])))?;
        let azimuth = rec[2]
            .parse::<f64>()
            .map_err(|e| bad(format!("azimuth {:?}: {e}", &rec[2])))?;
        let elevation = rec[3]
            .parse::<f64>()
            .map_err(|e| bad(format!("elevation {:?}: {e}", &rec[3])))?;
        if class >= N_CLASSES {
            return Err(bad(format!("class {class} outside 0..{N_CLASSES}")));
        }
        if !(-180.0..=180.0).contains(&azimuth) || !(-90.0..=90.0).contains(&elevation) {
            return Err(bad(format!(
                "direction ({azimuth}, {elevation}) out of range"
            )));
        }
        out.push(LabelRow {
            frame,
            class,
            azimuth,
            elevation,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub id: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    /// Label frames per clip.
    pub label_frames: usize,
    pub spec: SceneSpec,
    pub clips: Vec<ClipEntry>,
}

impl Manifest {
    pub fn new(spec: &SceneSpec, splits: &Splits) -> Self {
        let mut clips: Vec<ClipEntry> = (0..spec.n_clips)
            .map(|i| ClipEntry {
                id: synth::clip_id(i),
                split: Split::Train,
            })
            .collect();
        for &i in &splits.val {
            clips[i].split = Split::Val;
        }
        for &i in &splits.eval {
            clips[i].split = Split::Eval;
        }
        Self {
            seed: spec.seed,
            label_frames: spec.label_frames(),
            spec: spec.clone(),
            clips,
        }
    }

    pub fn ids(&self, split: Split) -> Vec<String> {
        self.clips
            .iter()
            .filter(|c| c.split == split)
            .map(|c| c.id.clone())
            .collect()
    }

    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| data_err(&path, e))?;
        serde_json::from_str(&text).map_err(|e| data_err(&path, e))
    }

    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| data_err(&path, e))
    }
}

pub fn wav_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(AUDIO_DIR).join(format!("{id}.wav"))
}

pub fn label_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(LABEL_DIR).join(format!("{id}.csv"))
}
