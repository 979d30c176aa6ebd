//! Deterministic synthetic FOA scenes with frame-level SELD annotations.
//!
//! Each class is a distinct amplitude-modulated harmonic tone. Events are
//! static point sources encoded into first-order ambisonics and mixed over
//! an uncorrelated noise floor. No reverberation is simulated.

use crate::accdoa::{FrameLabels, N_CLASSES};
use crate::dsp::{FoaClip, SAMPLE_RATE};
use crate::error::{Result, SeldError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Label frames per second (0.1 s resolution).
pub const LABEL_RATE: usize = 10;
pub const BASE_FREQ_HZ: f64 = 180.0;
pub const FREQ_RATIO: f64 = 1.31;
const HARMONIC_AMPS: [f64; 3] = [1.0, 0.5, 0.25];
const FADE_S: f64 = 0.01;
const NOISE_FRACTION: f64 = 0.01;
const MAX_CLASS_RETRIES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_clips: usize,
    pub clip_len_s: f64,
    pub max_polyphony: usize,
    pub n_classes: usize,
    /// Event level relative to the diffuse noise floor.
    pub snr_db: f64,
    /// Event duration range in label frames.
    pub min_event_frames: usize,
    pub max_event_frames: usize,
    /// Silence between consecutive events of one track, in label frames.
    pub min_gap_frames: usize,
    pub max_gap_frames: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_clips: 60,
            clip_len_s: 10.0,
            max_polyphony: 2,
            n_classes: N_CLASSES,
            snr_db: 30.0,
            min_event_frames: 10,
            max_event_frames: 30,
            min_gap_frames: 5,
            max_gap_frames: 20,
        }
    }
}

impl SceneSpec {
    pub fn label_frames(&self) -> usize {
        (self.clip_len_s * LABEL_RATE as f64).round() as usize
    }

    pub fn samples(&self) -> usize {
        (self.clip_len_s * SAMPLE_RATE as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SeldError::Input(format!("invalid scene spec: {m}")));
        if self.n_clips == 0 {
            return bad("n_clips must be positive");
        }
        if !(self.clip_len_s > 0.0) || self.label_frames() == 0 {
            return bad("clip length must cover at least one label frame");
        }
        if self.n_classes == 0 || self.n_classes > N_CLASSES {
            return bad("class count must be in 1..=12");
        }
        if self.min_event_frames == 0 || self.min_event_frames > self.max_event_frames {
            return bad("event length range is empty");
        }
        if self.min_gap_frames > self.max_gap_frames {
            return bad("gap range is empty");
        }
        if !self.snr_db.is_finite() {
            return bad("snr must be finite");
        }
        Ok(())
    }
}

/// One static event on the label-frame grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub class: usize,
    pub onset: usize,
    /// Exclusive end frame.
    pub offset: usize,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
}

impl EventSpec {
    pub fn direction(&self) -> [f64; 3] {
        direction(self.azimuth_deg, self.elevation_deg)
    }

    fn overlaps(&self, other: &EventSpec) -> bool {
        self.onset < other.offset && other.onset < self.offset
    }
}

#[derive(Clone, Debug)]
pub struct SynthClip {
    pub id: String,
    pub audio: FoaClip,
    pub labels: FrameLabels,
    pub events: Vec<EventSpec>,
}

pub fn class_frequency(class: usize) -> f64 {
    BASE_FREQ_HZ * FREQ_RATIO.powi(class as i32)
}

fn modulation_rate(class: usize) -> f64 {
    1.5 + 0.75 * class as f64
}

/// `(cos el cos az, cos el sin az, sin el)`.
pub fn direction(azimuth_deg: f64, elevation_deg: f64) -> [f64; 3] {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
}

/// Inverse of [`direction`] for a unit vector.
pub fn angles(d: [f64; 3]) -> (f64, f64) {
    let az = d[1].atan2(d[0]).to_degrees();
    let el = d[2].clamp(-1.0, 1.0).asin().to_degrees();
    (az, el)
}

/// Class-distinctive mono waveform of `n_samples`, RMS 1, with 10 ms
/// raised-cosine fades.
pub fn class_signal(class: usize, n_samples: usize, seed: u64) -> Result<Vec<f64>> {
    if class >= N_CLASSES {
        return Err(SeldError::Input(format!("class {class} out of range")));
    }
    if n_samples == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = SAMPLE_RATE as f64;
    let f0 = class_frequency(class);
    let fm = modulation_rate(class);
    let phases: Vec<f64> = (0..HARMONIC_AMPS.len() + 1)
        .map(|_| rng.gen_range(0.0..2.0 * PI))
        .collect();
    let mut out: Vec<f64> = (0..n_samples)
        .map(|n| {
            let t = n as f64 / sr;
            let env = 1.0 + 0.5 * (2.0 * PI * fm * t + phases[0]).sin();
            let tone: f64 = HARMONIC_AMPS
                .iter()
                .enumerate()
                .map(|(h, a)| a * (2.0 * PI * f0 * (h + 1) as f64 * t + phases[h + 1]).sin())
                .sum();
            env * tone
        })
        .collect();
    let tone_rms = rms(&out);
    for v in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += NOISE_FRACTION * tone_rms * z;
    }
    let r = rms(&out);
    if r > 0.0 {
        out.iter_mut().for_each(|v| *v /= r);
    }
    let fade = ((FADE_S * sr) as usize).min(n_samples / 2);
    for i in 0..fade {
        let g = 0.5 - 0.5 * (PI * i as f64 / fade as f64).cos();
        out[i] *= g;
        out[n_samples - 1 - i] *= g;
    }
    Ok(out)
}

fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// SN3D first-order encoding in ACN order: `(W, Y, Z, X) = s·(1, d_y, d_z, d_x)`.
pub fn encode_foa(mono: &[f64], azimuth_deg: f64, elevation_deg: f64) -> Result<[Vec<f64>; 4]> {
    if !(-180.0..=180.0).contains(&azimuth_deg) || !(-90.0..=90.0).contains(&elevation_deg) {
        return Err(SeldError::Input(format!(
            "direction ({azimuth_deg}, {elevation_deg}) out of range"
        )));
    }
    let d = direction(azimuth_deg, elevation_deg);
    let scaled = |g: f64| mono.iter().map(|s| s * g).collect::<Vec<f64>>();
    Ok([mono.to_vec(), scaled(d[1]), scaled(d[2]), scaled(d[0])])
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn random_direction(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let mut az = round2(rng.gen_range(-180.0..180.0));
    if az >= 180.0 {
        az = -180.0;
    }
    let el = round2(rng.gen_range(-1.0f64..=1.0).asin().to_degrees());
    (az, el)
}

fn clip_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Draws a random event layout: `max_polyphony` independent tracks of
/// events separated by gaps, with no two same-class events overlapping.
pub fn plan_events(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<EventSpec>> {
    let total = spec.label_frames();
    let mut events: Vec<EventSpec> = Vec::new();
    for _ in 0..spec.max_polyphony {
        let mut t = rng.gen_range(0..=spec.max_gap_frames);
        while t + spec.min_event_frames <= total {
            let len = rng.gen_range(spec.min_event_frames..=spec.max_event_frames);
            let offset = (t + len).min(total);
            let (azimuth_deg, elevation_deg) = random_direction(rng);
            let mut placed = None;
            for _ in 0..MAX_CLASS_RETRIES {
                let ev = EventSpec {
                    class: rng.gen_range(0..spec.n_classes),
                    onset: t,
                    offset,
                    azimuth_deg,
                    elevation_deg,
                };
                if !events
                    .iter()
                    .any(|e| e.class == ev.class && e.overlaps(&ev))
                {
                    placed = Some(ev);
                    break;
                }
            }
            let Some(ev) = placed else {
                return Err(SeldError::Input(format!(
                    "could not place a non-overlapping class after {MAX_CLASS_RETRIES} attempts"
                )));
            };
            events.push(ev);
            t = offset
                + rng
                    .gen_range(spec.min_gap_frames..=spec.max_gap_frames)
                    .max(1);
        }
    }
    events.sort_by_key(|e| (e.onset, e.class));
    Ok(events)
}

/// Mixes `events` over the noise floor and builds matching labels.
pub fn render_clip(spec: &SceneSpec, index: usize, events: &[EventSpec]) -> Result<SynthClip> {
    let total_frames = spec.label_frames();
    let n = spec.samples();
    let frame_samples = SAMPLE_RATE as usize / LABEL_RATE;
    let mut rng = clip_rng(spec.seed ^ 0x5eed_a0d10, index);
    let mut mix = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut labels = FrameLabels::empty(total_frames, N_CLASSES);
    for (e_idx, ev) in events.iter().enumerate() {
        for (i, other) in events.iter().enumerate() {
            if i != e_idx && other.class == ev.class && other.overlaps(ev) {
                return Err(SeldError::Input(format!(
                    "class {} overlaps itself",
                    ev.class
                )));
            }
        }
        if ev.offset <= ev.onset || ev.offset > total_frames {
            return Err(SeldError::Input(format!(
                "event frames {}..{} invalid for a {total_frames}-frame clip",
                ev.onset, ev.offset
            )));
        }
        let start = ev.onset * frame_samples;
        let end = (ev.offset * frame_samples).min(n);
        let sig_seed: u64 = rng.gen();
        let mono = class_signal(ev.class, end - start, sig_seed)?;
        let foa = encode_foa(&mono, ev.azimuth_deg, ev.elevation_deg)?;
        for (dst, src) in mix.iter_mut().zip(&foa) {
            for (d, s) in dst[start..end].iter_mut().zip(src) {
                *d += s;
            }
        }
        let doa = ev.direction();
        for f in ev.onset..ev.offset {
            labels.set_active(f, ev.class, doa)?;
        }
    }
    // events are RMS-normalized, so the mean event RMS is 1
    let noise_rms = 10f64.powf(-spec.snr_db / 20.0);
    for ch in mix.iter_mut() {
        for v in ch.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += noise_rms * z;
        }
    }
    Ok(SynthClip {
        id: clip_id(index),
        audio: FoaClip::new(mix.to_vec(), SAMPLE_RATE)?,
        labels,
        events: events.to_vec(),
    })
}

pub fn clip_id(index: usize) -> String {
    format!("clip_{index:04}")
}

/// Renders one clip of the scene.
pub fn render_one(spec: &SceneSpec, index: usize) -> Result<SynthClip> {
    spec.validate()?;
    let mut rng = clip_rng(spec.seed, index);
    let events = plan_events(spec, &mut rng)?;
    render_clip(spec, index, &events)
}

/// Renders every clip; each clip has its own RNG stream so clips can be
/// produced in any order.
pub fn render_scene(spec: &SceneSpec) -> Result<Vec<SynthClip>> {
    spec.validate()?;
    (0..spec.n_clips).map(|i| render_one(spec, i)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub eval: Vec<usize>,
}

/// Seeded 4:1:1 partition of `n` clip indices.
pub fn split_dataset(n: usize, seed: u64) -> Result<Splits> {
    if n < 3 {
        return Err(SeldError::Input(format!(
            "need at least 3 clips to split, got {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let held = (n / 6).max(1);
    let mut val = idx[..held].to_vec();
    let mut eval = idx[held..2 * held].to_vec();
    let mut train = idx[2 * held..].to_vec();
    val.sort_unstable();
    eval.sort_unstable();
    train.sort_unstable();
    Ok(Splits { train, val, eval })
}
