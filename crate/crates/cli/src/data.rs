//! Loading a synthesized dataset into fixed-length training chunks.

use crate::error::CliError;
use crate::io::{self, Manifest, Split};
use rayon::prelude::*;
use seld_core::accdoa::{self, FrameLabels};
use seld_core::dsp::{self, FeatureStats, MelFilterbank, N_FEATURE_CHANNELS};
use seld_core::tensor::{archive, Tensor};
use std::collections::HashMap;
use std::path::Path;

/// Feature frames per label frame.
pub const FRAMES_PER_LABEL: usize = 5;

/// One fixed-length window of a clip.
#[derive(Clone, Debug)]
pub struct Chunk {
    pub clip_id: String,
    /// Position of the chunk within its clip.
    pub index: usize,
    /// Unstandardized `[7, T, 64]` features.
    pub features: Tensor,
    pub labels: FrameLabels,
}

/// Splits clip features into non-overlapping `chunk_frames` windows, dropping
/// the remainder, with the matching label windows.
pub fn chunk_clip(
    id: &str,
    features: &Tensor,
    labels: &FrameLabels,
    chunk_frames: usize,
) -> Vec<Chunk> {
    let (t, f) = (features.shape()[1], features.shape()[2]);
    let label_len = chunk_frames / FRAMES_PER_LABEL;
    let n = (t / chunk_frames).min(labels.frames() / label_len);
    (0..n)
        .map(|k| {
            let mut data = Vec::with_capacity(N_FEATURE_CHANNELS * chunk_frames * f);
            for ch in 0..N_FEATURE_CHANNELS {
                let start = (ch * t + k * chunk_frames) * f;
                data.extend_from_slice(&features.data()[start..start + chunk_frames * f]);
            }
            Chunk {
                clip_id: id.to_string(),
                index: k,
                features: Tensor::new(&[N_FEATURE_CHANNELS, chunk_frames, f], data)
                    .expect("chunk shape"),
                labels: labels.window(k * label_len, label_len),
            }
        })
        .collect()
}

/// Raw features for every clip, from the cache archive when present.
pub fn clip_features(
    dir: &Path,
    ids: &[String],
    fb: &MelFilterbank,
) -> Result<Vec<Tensor>, CliError> {
    let cache_path = dir.join(io::FEATURE_CACHE);
    let cached: HashMap<String, Tensor> = if cache_path.exists() {
        archive::load(&cache_path)?
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix("feat/").map(|id| (id.to_string(), v)))
            .collect()
    } else {
        HashMap::new()
    };
    ids.par_iter()
        .map(|id| match cached.get(id) {
            Some(t) => Ok(t.clone()),
            None => {
                let clip = io::read_wav(&io::wav_path(dir, id))?;
                Ok(dsp::extract_raw_features(&clip, fb)?)
            }
        })
        .collect()
}

/// Every chunk of the clips in `split`, in manifest order.
pub fn load_split(
    dir: &Path,
    manifest: &Manifest,
    split: Split,
    chunk_frames: usize,
) -> Result<Vec<Chunk>, CliError> {
    let ids = manifest.ids(split);
    load_clips(dir, manifest, &ids, chunk_frames)
}

pub fn load_clips(
    dir: &Path,
    manifest: &Manifest,
    ids: &[String],
    chunk_frames: usize,
) -> Result<Vec<Chunk>, CliError> {
    let fb = MelFilterbank::default();
    let feats = clip_features(dir, ids, &fb)?;
    let mut out = Vec::new();
    for (id, x) in ids.iter().zip(&feats) {
        let labels = io::read_labels(&io::label_path(dir, id), manifest.label_frames)?;
        out.extend(chunk_clip(id, x, &labels, chunk_frames));
    }
    Ok(out)
}

/// Stacks standardized chunk features into `[B, 7, T, 64]` and their targets
/// into `[B, T', classes, 3]`.
pub fn batch(chunks: &[&Chunk], stats: &FeatureStats) -> Result<(Tensor, Tensor), CliError> {
    let first = chunks
        .first()
        .ok_or_else(|| CliError::Internal("empty batch".into()))?;
    let fs = first.features.shape().to_vec();
    let (lt, lc) = (first.labels.frames(), first.labels.classes());
    let mut xs = Vec::with_capacity(chunks.len() * first.features.numel());
    let mut ys = Vec::with_capacity(chunks.len() * lt * lc * 3);
    for c in chunks {
        let mut x = c.features.clone();
        stats.apply(&mut x)?;
        xs.extend(x.into_data());
        ys.extend(accdoa::encode(&c.labels)?.into_data());
    }
    Ok((
        Tensor::new(&[chunks.len(), fs[0], fs[1], fs[2]], xs)?,
        Tensor::new(&[chunks.len(), lt, lc, 3], ys)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunking_consumes_whole_windows_once() {
        let t = 499;
        let x = Tensor::new(&[7, t, 2], (0..7 * t * 2).map(|v| v as f64).collect()).unwrap();
        let mut labels = FrameLabels::empty(100, 12);
        labels.set_active(49, 2, [1.0, 0.0, 0.0]).unwrap();
        labels.set_active(50, 2, [0.0, 1.0, 0.0]).unwrap();
        let chunks = chunk_clip("c", &x, &labels, 250);
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].labels.frames(), 50);
        assert!(chunks[0].labels.is_active(49, 2));
        assert_eq!(chunks[0].labels.count_active(), 1);
        assert_eq!(chunks[0].features.at(&[1, 0, 0]), (t * 2) as f64);

        let x = Tensor::zeros(&[7, 1000, 2]);
        let labels = FrameLabels::empty(200, 12);
        let chunks = chunk_clip("c", &x, &labels, 250);
        assert_eq!(chunks.len(), 4);
        assert_eq!(
            chunks.iter().map(|c| c.labels.frames()).sum::<usize>(),
            50 * (1000 / 250)
        );
    }
}
