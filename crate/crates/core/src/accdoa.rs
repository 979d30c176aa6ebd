//! Activity-coupled Cartesian DOA targets: one 3-vector per frame and class
//! whose direction is the DOA and whose length is the activity.

use crate::error::{Result, SeldError};
use crate::tensor::Tensor;

pub const N_CLASSES: usize = 12;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
const UNIT_TOL: f64 = 1e-9;

/// Frame-wise reference labels: binary activity and unit DOAs.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameLabels {
    frames: usize,
    classes: usize,
    active: Vec<bool>,
    doa: Vec<[f64; 3]>,
}

impl FrameLabels {
    pub fn empty(frames: usize, classes: usize) -> Self {
        Self {
            frames,
            classes,
            active: vec![false; frames * classes],
            doa: vec![[0.0; 3]; frames * classes],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn is_active(&self, frame: usize, class: usize) -> bool {
        self.active[frame * self.classes + class]
    }

    pub fn doa(&self, frame: usize, class: usize) -> [f64; 3] {
        self.doa[frame * self.classes + class]
    }

    /// Marks `class` active at `frame` with unit direction `doa`.
    pub fn set_active(&mut self, frame: usize, class: usize, doa: [f64; 3]) -> Result<()> {
        let n = norm(doa);
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(SeldError::Input(format!(
                "active DOA at frame {frame}, class {class} has norm {n}"
            )));
        }
        let i = frame * self.classes + class;
        self.active[i] = true;
        self.doa[i] = doa;
        Ok(())
    }

    pub fn clear(&mut self, frame: usize, class: usize) {
        let i = frame * self.classes + class;
        self.active[i] = false;
        self.doa[i] = [0.0; 3];
    }

    /// Frames `[start, start+len)` as a new label set.
    pub fn window(&self, start: usize, len: usize) -> Self {
        let (a, b) = (start * self.classes, (start + len) * self.classes);
        Self {
            frames: len,
            classes: self.classes,
            active: self.active[a..b].to_vec(),
            doa: self.doa[a..b].to_vec(),
        }
    }

    /// Iterates `(frame, class, doa)` over active entries in frame order.
    pub fn active_entries(&self) -> impl Iterator<Item = (usize, usize, [f64; 3])> + '_ {
        self.active
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(i, _)| (i / self.classes, i % self.classes, self.doa[i]))
    }

    pub fn count_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// Encodes labels into a `[T', C, 3]` tensor: unit vectors where active,
/// zeros elsewhere.
pub fn encode(labels: &FrameLabels) -> Result<Tensor> {
    let mut out = Vec::with_capacity(labels.active.len() * 3);
    for (i, (&a, d)) in labels.active.iter().zip(&labels.doa).enumerate() {
        if a {
            let n = norm(*d);
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(SeldError::Input(format!(
                    "entry {i} is active with non-unit DOA (norm {n})"
                )));
            }
            out.extend_from_slice(d);
        } else {
            out.extend_from_slice(&[0.0; 3]);
        }
    }
    Tensor::new(&[labels.frames, labels.classes, 3], out)
}

/// Thresholds vector lengths: active where `‖v‖ > threshold`, DOA = `v/‖v‖`.
pub fn decode(pred: &Tensor, threshold: f64) -> Result<FrameLabels> {
    let s = pred.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(SeldError::Dimension {
            op: "accdoa::decode",
            detail: format!("expected T×C×3, got {s:?}"),
        });
    }
    let mut labels = FrameLabels::empty(s[0], s[1]);
    for (i, v) in pred.data().chunks_exact(3).enumerate() {
        let v = [v[0], v[1], v[2]];
        let n = norm(v);
        if n > threshold {
            labels.active[i] = true;
            labels.doa[i] = [v[0] / n, v[1] / n, v[2] / n];
        }
    }
    Ok(labels)
}

/// True when `decode(encode(labels), threshold)` reproduces `labels`.
pub fn round_trip_check(labels: &FrameLabels, threshold: f64) -> Result<bool> {
    let decoded = decode(&encode(labels)?, threshold)?;
    Ok(decoded.active == labels.active
        && decoded
            .doa
            .iter()
            .zip(&labels.doa)
            .all(|(a, b)| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12)))
}

pub(crate) fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_examples() {
        let mut l = FrameLabels::empty(1, 3);
        l.set_active(0, 0, [0.0, 0.0, 1.0]).unwrap();
        l.set_active(0, 2, [0.6, 0.8, 0.0]).unwrap();
        let y = encode(&l).unwrap();
        assert_eq!(y.data(), &[0., 0., 1., 0., 0., 0., 0.6, 0.8, 0.]);
        assert_eq!(norm([0.6, 0.8, 0.0]), 1.0);
    }

    #[test]
    fn non_unit_doa_is_rejected() {
        let mut l = FrameLabels::empty(1, 1);
        assert!(l.set_active(0, 0, [0.5, 0.0, 0.0]).is_err());
        l.active[0] = true;
        l.doa[0] = [2.0, 0.0, 0.0];
        assert!(encode(&l).is_err());
    }

    #[test]
    fn decode_examples() {
        let pred = Tensor::new(&[1, 3, 3], vec![0., 0., 0., 0.48, 0.64, 0., 0.3, 0., 0.]).unwrap();
        let l = decode(&pred, DEFAULT_THRESHOLD).unwrap();
        assert!(!l.is_active(0, 0));
        assert!(l.is_active(0, 1));
        let d = l.doa(0, 1);
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15 && d[2] == 0.0);
        assert!(!l.is_active(0, 2));
        assert_eq!(l.doa(0, 2), [0.0; 3]);
    }

    #[test]
    fn round_trip_on_small_cases() {
        let mut l = FrameLabels::empty(4, N_CLASSES);
        assert!(round_trip_check(&l, 0.5).unwrap());
        l.set_active(1, 3, [0.0, -1.0, 0.0]).unwrap();
        let s = 1.0 / 3f64.sqrt();
        l.set_active(3, 11, [s, s, s]).unwrap();
        for tau in [0.01, 0.5, 0.99] {
            assert!(round_trip_check(&l, tau).unwrap());
        }
    }

    #[test]
    fn window_slices_frames() {
        let mut l = FrameLabels::empty(5, 2);
        l.set_active(3, 1, [1.0, 0.0, 0.0]).unwrap();
        let w = l.window(2, 2);
        assert_eq!(w.frames(), 2);
        assert!(w.is_active(1, 1));
        assert_eq!(w.count_active(), 1);
    }
}
