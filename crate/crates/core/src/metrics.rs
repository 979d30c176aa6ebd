//! Joint detection and localization scores: location-aware error rate and
//! F-score, class-aware localization error and recall.

use crate::accdoa::{norm, FrameLabels};
use crate::error::{Result, SeldError};
use serde::{Deserialize, Serialize};

pub const DEFAULT_SEGMENT_FRAMES: usize = 10;
pub const DEFAULT_THRESHOLD_DEG: f64 = 20.0;
/// Reported localization error when there are events but no class matches.
pub const NO_MATCH_ERROR_DEG: f64 = 180.0;

/// Great-circle angle between two unit vectors, in degrees.
pub fn angular_error(u: [f64; 3], v: [f64; 3]) -> Result<f64> {
    for w in [u, v] {
        if (norm(w) - 1.0).abs() > 1e-6 {
            return Err(SeldError::Input(format!("{w:?} is not a unit vector")));
        }
    }
    Ok(angle_deg(u, v))
}

fn angle_deg(u: [f64; 3], v: [f64; 3]) -> f64 {
    let dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    dot.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Per-frame event list: `(class, unit DOA)` pairs. A class may appear more
/// than once in a frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventList {
    pub frames: Vec<Vec<(usize, [f64; 3])>>,
    pub classes: usize,
}

impl EventList {
    pub fn new(frames: usize, classes: usize) -> Self {
        Self {
            frames: vec![Vec::new(); frames],
            classes,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn push(&mut self, frame: usize, class: usize, doa: [f64; 3]) {
        self.frames[frame].push((class, doa));
    }

    pub fn event_count(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }
}

impl From<&FrameLabels> for EventList {
    fn from(l: &FrameLabels) -> Self {
        let mut e = EventList::new(l.frames(), l.classes());
        for (f, c, d) in l.active_entries() {
            e.push(f, c, d);
        }
        e
    }
}

/// Per-class representative DOAs of one segment.
pub type Segment = Vec<Vec<[f64; 3]>>;

/// Groups frames into segments of `seg_len`. A class is present in a
/// segment if active in any of its frames; each instance track (the k-th
/// occurrence of the class within a frame) is summarized by the
/// renormalized mean of its frame DOAs. Trailing frames that do not fill a
/// segment are dropped.
pub fn segment_aggregate(events: &EventList, seg_len: usize) -> Vec<Segment> {
    let n_seg = events.len() / seg_len.max(1);
    let mut out = Vec::with_capacity(n_seg);
    for s in 0..n_seg {
        let mut sums: Vec<Vec<[f64; 3]>> = vec![Vec::new(); events.classes];
        for frame in &events.frames[s * seg_len..(s + 1) * seg_len] {
            let mut seen = vec![0usize; events.classes];
            for &(c, d) in frame {
                let k = seen[c];
                seen[c] += 1;
                if sums[c].len() <= k {
                    sums[c].push([0.0; 3]);
                }
                for (a, b) in sums[c][k].iter_mut().zip(d) {
                    *a += b;
                }
            }
        }
        let seg = sums
            .into_iter()
            .map(|tracks| {
                tracks
                    .into_iter()
                    .filter_map(|v| {
                        let n = norm(v);
                        (n > 0.0).then(|| [v[0] / n, v[1] / n, v[2] / n])
                    })
                    .collect()
            })
            .collect();
        out.push(seg);
    }
    out
}

/// Minimum-cost assignment on a `rows × cols` cost matrix (row-major).
/// Returns, for each row, its assigned column; when there are more rows than
/// columns some rows stay unassigned.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Vec<Option<usize>> {
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    if rows > cols {
        let mut t = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = cost[r * cols + c];
            }
        }
        let col_to_row = hungarian(&t, cols, rows);
        let mut out = vec![None; rows];
        for (c, r) in col_to_row.into_iter().enumerate() {
            if let Some(r) = r {
                out[r] = Some(c);
            }
        }
        return out;
    }
    // shortest augmenting paths with potentials; rows <= cols
    let (n, m) = (rows, cols);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut way = vec![0usize; m + 1];
    // p[j] = row (1-based) matched to column j, 0 = free
    let mut p = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

/// Additive counts behind [`SeldScores`]; sums over clips before finalizing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeldCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference: usize,
    pub predicted: usize,
    pub matched: usize,
    pub angle_sum: f64,
}

impl SeldCounts {
    pub fn merge(&mut self, o: &SeldCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.reference += o.reference;
        self.predicted += o.predicted;
        self.matched += o.matched;
        self.angle_sum += o.angle_sum;
    }

    pub fn finalize(&self) -> SeldScores {
        let errors = self.substitutions + self.deletions + self.insertions;
        let er20 = errors as f64 / self.reference.max(1) as f64;
        let denom = 2 * self.tp + self.fp + self.fn_;
        let f20 = if denom == 0 {
            100.0
        } else {
            200.0 * self.tp as f64 / denom as f64
        };
        let le_cd = if self.matched > 0 {
            self.angle_sum / self.matched as f64
        } else if self.reference + self.predicted == 0 {
            0.0
        } else {
            NO_MATCH_ERROR_DEG
        };
        let lr_cd = if self.reference == 0 {
            100.0
        } else {
            100.0 * self.matched as f64 / self.reference as f64
        };
        SeldScores {
            er20,
            f20,
            le_cd,
            lr_cd,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeldScores {
    pub er20: f64,
    pub f20: f64,
    pub le_cd: f64,
    pub lr_cd: f64,
}

/// Accumulates segment counts of `pred` against `reference`.
pub fn count(
    reference: &EventList,
    pred: &EventList,
    threshold_deg: f64,
    seg_len: usize,
) -> Result<SeldCounts> {
    if reference.len() != pred.len() {
        return Err(SeldError::Input(format!(
            "reference has {} frames, prediction {}",
            reference.len(),
            pred.len()
        )));
    }
    let classes = reference.classes.max(pred.classes);
    let rs = segment_aggregate(reference, seg_len);
    let ps = segment_aggregate(pred, seg_len);
    let mut total = SeldCounts::default();
    for (rseg, pseg) in rs.iter().zip(&ps) {
        let (mut seg_fp, mut seg_fn) = (0usize, 0usize);
        for c in 0..classes {
            let empty = Vec::new();
            let r = rseg.get(c).unwrap_or(&empty);
            let p = pseg.get(c).unwrap_or(&empty);
            total.reference += r.len();
            total.predicted += p.len();
            let mut tp = 0;
            if !r.is_empty() && !p.is_empty() {
                let cost: Vec<f64> = r
                    .iter()
                    .flat_map(|a| p.iter().map(move |b| angle_deg(*a, *b)))
                    .collect();
                for (ri, pj) in hungarian(&cost, r.len(), p.len()).into_iter().enumerate() {
                    if let Some(pj) = pj {
                        let err = cost[ri * p.len() + pj];
                        total.matched += 1;
                        total.angle_sum += err;
                        if err <= threshold_deg {
                            tp += 1;
                        }
                    }
                }
            }
            total.tp += tp;
            seg_fp += p.len() - tp;
            seg_fn += r.len() - tp;
        }
        total.fp += seg_fp;
        total.fn_ += seg_fn;
        total.substitutions += seg_fp.min(seg_fn);
        total.deletions += seg_fn.saturating_sub(seg_fp);
        total.insertions += seg_fp.saturating_sub(seg_fn);
    }
    Ok(total)
}

pub fn score(reference: &EventList, pred: &EventList, threshold_deg: f64) -> Result<SeldScores> {
    Ok(count(reference, pred, threshold_deg, DEFAULT_SEGMENT_FRAMES)?.finalize())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateScores {
    pub runs: usize,
    pub er20: MeanStd,
    pub f20: MeanStd,
    pub le_cd: MeanStd,
    pub lr_cd: MeanStd,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MeanStd { mean, std }
}

/// Mean and sample standard deviation of each score across runs.
pub fn aggregate_runs(runs: &[SeldScores]) -> Result<AggregateScores> {
    if runs.is_empty() {
        return Err(SeldError::Input("no runs to aggregate".into()));
    }
    let pick = |f: fn(&SeldScores) -> f64| mean_std(&runs.iter().map(f).collect::<Vec<_>>());
    Ok(AggregateScores {
        runs: runs.len(),
        er20: pick(|s| s.er20),
        f20: pick(|s| s.f20),
        le_cd: pick(|s| s.le_cd),
        lr_cd: pick(|s| s.lr_cd),
    })
}
