//! FOA feature extraction: per-channel log-mel spectrograms plus mel-banded,
//! unit-normalized acoustic intensity vectors, stacked into a `7×T×64` input.

use crate::error::{Result, SeldError};
use crate::tensor::Tensor;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const SAMPLE_RATE: u32 = 24_000;
pub const WIN_LEN: usize = 960;
pub const HOP_LEN: usize = 480;
pub const N_FFT: usize = 1024;
pub const N_BINS: usize = N_FFT / 2 + 1;
pub const N_MELS: usize = 64;
pub const N_FEATURE_CHANNELS: usize = 7;
pub const LOG_FLOOR: f64 = 1e-10;
pub const INTENSITY_EPS: f64 = 1e-10;

/// Four-channel ambisonic recording, ACN order (W, Y, Z, X), SN3D.
#[derive(Clone, Debug, PartialEq)]
pub struct FoaClip {
    channels: [Vec<f64>; 4],
}

impl FoaClip {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(SeldError::Input(format!(
                "expected {SAMPLE_RATE} Hz audio, got {sample_rate} Hz"
            )));
        }
        let channels: [Vec<f64>; 4] = channels.try_into().map_err(|c: Vec<Vec<f64>>| {
            SeldError::Input(format!("FOA clips need 4 channels, got {}", c.len()))
        })?;
        let len = channels[0].len();
        if len == 0 {
            return Err(SeldError::Input("empty clip".into()));
        }
        if channels.iter().any(|c| c.len() != len) {
            return Err(SeldError::Input("channel lengths differ".into()));
        }
        if channels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(SeldError::Input("non-finite sample".into()));
        }
        Ok(Self { channels })
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Channel `i` in ACN order: 0 = W, 1 = Y, 2 = Z, 3 = X.
    pub fn channel(&self, i: usize) -> &[f64] {
        &self.channels[i]
    }

    pub fn channels(&self) -> &[Vec<f64>; 4] {
        &self.channels
    }
}

/// Number of STFT frames for a clip of `len` samples (no centering).
pub fn frame_count(len: usize) -> usize {
    if len < WIN_LEN {
        0
    } else {
        (len - WIN_LEN) / HOP_LEN + 1
    }
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Complex one-sided spectra, laid out `[channel][frame][bin]`.
#[derive(Clone, Debug)]
pub struct Spectra {
    frames: usize,
    data: Vec<Complex<f64>>,
}

impl Spectra {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bin(&self, channel: usize, frame: usize, bin: usize) -> Complex<f64> {
        self.data[(channel * self.frames + frame) * N_BINS + bin]
    }

    pub fn frame(&self, channel: usize, frame: usize) -> &[Complex<f64>] {
        let start = (channel * self.frames + frame) * N_BINS;
        &self.data[start..start + N_BINS]
    }
}

pub fn stft(clip: &FoaClip) -> Result<Spectra> {
    let frames = frame_count(clip.len());
    if frames == 0 {
        return Err(SeldError::Input(format!(
            "clip of {} samples is shorter than one {WIN_LEN}-sample window",
            clip.len()
        )));
    }
    let window = hann_window(WIN_LEN);
    let fft = FftPlanner::new().plan_fft_forward(N_FFT);
    let mut data = Vec::with_capacity(4 * frames * N_BINS);
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    for ch in clip.channels() {
        for t in 0..frames {
            let seg = &ch[t * HOP_LEN..t * HOP_LEN + WIN_LEN];
            for (b, (&x, &w)) in buf.iter_mut().zip(seg.iter().zip(&window)) {
                *b = Complex::new(x * w, 0.0);
            }
            buf[WIN_LEN..].fill(Complex::new(0.0, 0.0));
            fft.process(&mut buf);
            data.extend_from_slice(&buf[..N_BINS]);
        }
    }
    Ok(Spectra { frames, data })
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-mel filters spanning 0 Hz to Nyquist, each summing to 1.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    n_mels: usize,
    n_bins: usize,
    weights: Vec<f64>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, sample_rate: u32, n_fft: usize) -> Self {
        let n_bins = n_fft / 2 + 1;
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let row = &mut weights[m * n_bins..(m + 1) * n_bins];
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                *w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
            }
            if row.iter().all(|&w| w == 0.0) {
                // filter narrower than a bin: fall back to the nearest bin
                let k = ((mid / bin_hz).round() as usize).min(n_bins - 1);
                row[k] = 1.0;
            }
            let area: f64 = row.iter().sum();
            row.iter_mut().for_each(|w| *w /= area);
        }
        Self {
            n_mels,
            n_bins,
            weights,
            centers_hz: edges[1..=n_mels].to_vec(),
        }
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Applies every filter to one linear spectrum of `n_bins` values.
    pub fn apply(&self, spectrum: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate().take(self.n_mels) {
            *o = self.row(m).iter().zip(spectrum).map(|(w, p)| w * p).sum();
        }
    }
}

impl Default for MelFilterbank {
    fn default() -> Self {
        Self::new(N_MELS, SAMPLE_RATE, N_FFT)
    }
}

/// `log(fb · |S|² + 1e-10)` per FOA channel, shape `[4, T, n_mels]`.
pub fn logmel(spectra: &Spectra, fb: &MelFilterbank) -> Tensor {
    let (t_len, nm) = (spectra.frames, fb.n_mels());
    let mut out = Vec::with_capacity(4 * t_len * nm);
    let mut power = vec![0.0; N_BINS];
    let mut band = vec![0.0; nm];
    for ch in 0..4 {
        for t in 0..t_len {
            for (p, s) in power.iter_mut().zip(spectra.frame(ch, t)) {
                *p = s.norm_sqr();
            }
            fb.apply(&power, &mut band);
            out.extend(band.iter().map(|&e| (e + LOG_FLOOR).ln()));
        }
    }
    Tensor::new(&[4, t_len, nm], out).expect("logmel shape")
}

/// Mel-banded active intensity `Re{W*·(X, Y, Z)}`, normalized per
/// (frame, band) to unit length. Shape `[3, T, n_mels]`, axis order x, y, z.
pub fn foa_intensity(spectra: &Spectra, fb: &MelFilterbank) -> Tensor {
    let (t_len, nm) = (spectra.frames, fb.n_mels());
    let mut out = vec![0.0; 3 * t_len * nm];
    // ACN channel index for x, y, z
    const AXES: [usize; 3] = [3, 1, 2];
    let mut comp = vec![vec![0.0; N_BINS]; 3];
    let mut bands = vec![vec![0.0; nm]; 3];
    for t in 0..t_len {
        let w = spectra.frame(0, t);
        for (axis, &ch) in AXES.iter().enumerate() {
            for ((c, wk), sk) in comp[axis].iter_mut().zip(w).zip(spectra.frame(ch, t)) {
                *c = (wk.conj() * sk).re;
            }
            fb.apply(&comp[axis], &mut bands[axis]);
        }
        for m in 0..nm {
            let norm = (0..3)
                .map(|a| bands[a][m] * bands[a][m])
                .sum::<f64>()
                .sqrt();
            for a in 0..3 {
                out[(a * t_len + t) * nm + m] = bands[a][m] / (norm + INTENSITY_EPS);
            }
        }
    }
    Tensor::new(&[3, t_len, nm], out).expect("intensity shape")
}

/// Unstandardized `[7, T, 64]` features: log-mel W, Y, Z, X then intensity
/// x, y, z.
pub fn extract_raw_features(clip: &FoaClip, fb: &MelFilterbank) -> Result<Tensor> {
    let spectra = stft(clip)?;
    let frames = spectra.frames();
    let mut data = logmel(&spectra, fb).into_data();
    data.extend(foa_intensity(&spectra, fb).into_data());
    Tensor::new(&[N_FEATURE_CHANNELS, frames, fb.n_mels()], data)
}

/// Features standardized with training-split statistics.
pub fn extract_features(
    clip: &FoaClip,
    fb: &MelFilterbank,
    stats: &FeatureStats,
) -> Result<Tensor> {
    let mut x = extract_raw_features(clip, fb)?;
    stats.apply(&mut x)?;
    Ok(x)
}

/// Per-channel standardization. Only the log-mel channels are rescaled;
/// intensity channels keep mean 0 / std 1 so they stay inside `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Default for FeatureStats {
    fn default() -> Self {
        Self::identity()
    }
}

impl FeatureStats {
    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; N_FEATURE_CHANNELS],
            std: vec![1.0; N_FEATURE_CHANNELS],
        }
    }

    /// Pools every value of each log-mel channel across `features`.
    pub fn fit<'a>(features: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        let mut count = 0usize;
        for x in features {
            check_feature_shape(x)?;
            let plane = x.shape()[1] * x.shape()[2];
            for ch in 0..4 {
                let vals = &x.data()[ch * plane..(ch + 1) * plane];
                sum[ch] += vals.iter().sum::<f64>();
                sq[ch] += vals.iter().map(|v| v * v).sum::<f64>();
            }
            count += plane;
        }
        if count == 0 {
            return Err(SeldError::Input("no features to fit statistics on".into()));
        }
        let mut stats = Self::identity();
        for ch in 0..4 {
            let mean = sum[ch] / count as f64;
            let var = (sq[ch] / count as f64 - mean * mean).max(0.0);
            stats.mean[ch] = mean;
            stats.std[ch] = if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 };
        }
        Ok(stats)
    }

    pub fn apply(&self, x: &mut Tensor) -> Result<()> {
        check_feature_shape(x)?;
        let plane = x.shape()[1] * x.shape()[2];
        for (ch, vals) in x.data_mut().chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[ch], self.std[ch]);
            vals.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(())
    }

    pub fn to_tensors(&self) -> (Tensor, Tensor) {
        (
            Tensor::new(&[N_FEATURE_CHANNELS], self.mean.clone()).expect("7 values"),
            Tensor::new(&[N_FEATURE_CHANNELS], self.std.clone()).expect("7 values"),
        )
    }

    pub fn from_tensors(mean: &Tensor, std: &Tensor) -> Result<Self> {
        if mean.numel() != N_FEATURE_CHANNELS || std.numel() != N_FEATURE_CHANNELS {
            return Err(SeldError::Input(
                "feature statistics must have 7 entries".into(),
            ));
        }
        Ok(Self {
            mean: mean.data().to_vec(),
            std: std.data().to_vec(),
        })
    }
}

fn check_feature_shape(x: &Tensor) -> Result<()> {
    if x.rank() != 3 || x.shape()[0] != N_FEATURE_CHANNELS {
        return Err(SeldError::Dimension {
            op: "features",
            detail: format!("expected 7×T×F features, got {:?}", x.shape()),
        });
    }
    Ok(())
}
