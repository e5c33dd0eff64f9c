//! Overlap scores (Dice, Jaccard, conformity) and boundary distances
//! (average and Hausdorff) between binary masks.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::face_neighbors;
use crate::volcore::{write_atomic, BinaryMask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapScores {
    pub dice: f64,
    pub jaccard: f64,
    /// `(3·dice − 2)/dice`; undefined when dice is 0.
    pub conform: Option<f64>,
    /// Both masks empty; scores are 1 by convention.
    pub degenerate: bool,
}

/// Dice, Jaccard and conformity from exact voxel counts.
pub fn overlap_metrics(a: &BinaryMask, b: &BinaryMask) -> Result<OverlapScores> {
    a.ensure_same_geometry(b)?;
    let (mut na, mut nb, mut both) = (0u64, 0u64, 0u64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += x as u64;
        nb += y as u64;
        both += (x && y) as u64;
    }
    Ok(scores_from_counts(na, nb, both))
}

pub fn scores_from_counts(na: u64, nb: u64, both: u64) -> OverlapScores {
    if na + nb == 0 {
        return OverlapScores {
            dice: 1.0,
            jaccard: 1.0,
            conform: Some(1.0),
            degenerate: true,
        };
    }
    let dice = 2.0 * both as f64 / (na + nb) as f64;
    let jaccard = both as f64 / (na + nb - both) as f64;
    OverlapScores {
        dice,
        jaccard,
        conform: conform_from_dice(dice),
        degenerate: false,
    }
}

pub fn conform_from_dice(dice: f64) -> Option<f64> {
    (dice > 0.0).then(|| (3.0 * dice - 2.0) / dice)
}

/// Foreground voxels with at least one face neighbor that is background or
/// outside the grid, in scan order.
pub fn extract_boundary(mask: &BinaryMask) -> Result<Vec<[usize; 3]>> {
    let dims = mask.dims();
    let mut out = Vec::new();
    for (i, &m) in mask.data().iter().enumerate() {
        if !m {
            continue;
        }
        let p = mask.coord(i);
        let on_edge = (0..3).any(|a| p[a] == 0 || p[a] + 1 == dims[a]);
        if on_edge || face_neighbors(p, dims).any(|q| !mask.get(q)) {
            out.push(p);
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyMask("boundary extraction needs a nonempty mask"));
    }
    Ok(out)
}

fn boundary_mask(mask: &BinaryMask) -> Result<BinaryMask> {
    let mut out = BinaryMask::filled(mask.dims(), mask.spacing(), false)?;
    for p in extract_boundary(mask)? {
        out.set(p, true);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryDistances {
    pub adb_mm: f64,
    pub hdb_mm: f64,
}

/// Symmetric average and maximum distance between the boundary voxel sets,
/// in millimeters.
pub fn boundary_distances(a: &BinaryMask, b: &BinaryMask, spacing: [f64; 3]) -> Result<BoundaryDistances> {
    a.ensure_same_geometry(b)?;
    if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::InvalidInput(format!("bad spacing {spacing:?}")));
    }
    let ba = boundary_mask(a)?;
    let bb = boundary_mask(b)?;
    let da = squared_edt(&ba, spacing);
    let db = squared_edt(&bb, spacing);
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    let mut n = 0usize;
    for (bound, dist) in [(&ba, &db), (&bb, &da)] {
        for (i, &m) in bound.data().iter().enumerate() {
            if m {
                let d = dist[i].sqrt();
                sum += d;
                max = max.max(d);
                n += 1;
            }
        }
    }
    Ok(BoundaryDistances {
        adb_mm: sum / n as f64,
        hdb_mm: max,
    })
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest set
/// voxel, by separable lower envelopes of parabolas. Requires a nonempty
/// set.
pub fn squared_edt(set: &BinaryMask, spacing: [f64; 3]) -> Vec<f64> {
    let dims = set.dims();
    let mut f: Vec<f64> = set
        .data()
        .iter()
        .map(|&m| if m { 0.0 } else { f64::INFINITY })
        .collect();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut line = Vec::new();
    let mut out = Vec::new();
    let mut scratch = Envelope::default();
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let w2 = spacing[axis] * spacing[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for j in 0..dims[others[1]] {
            for i in 0..dims[others[0]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                line.clear();
                line.extend((0..n).map(|k| f[base + k * stride]));
                scratch.transform(&line, w2, &mut out);
                for k in 0..n {
                    f[base + k * stride] = out[k];
                }
            }
        }
    }
    f
}

#[derive(Default)]
struct Envelope {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Envelope {
    /// 1D distance transform `out[q] = min_p w2·(q − p)² + f[p]`.
    fn transform(&mut self, f: &[f64], w2: f64, out: &mut Vec<f64>) {
        let n = f.len();
        out.clear();
        out.resize(n, f64::INFINITY);
        self.v.clear();
        self.z.clear();
        for q in 0..n {
            if f[q].is_infinite() {
                continue;
            }
            loop {
                match self.v.last() {
                    None => {
                        self.v.push(q);
                        self.z.push(f64::NEG_INFINITY);
                        break;
                    }
                    Some(&p) => {
                        let (qf, pf) = (q as f64, p as f64);
                        let s = ((f[q] + w2 * qf * qf) - (f[p] + w2 * pf * pf)) / (2.0 * w2 * (qf - pf));
                        if s <= *self.z.last().unwrap() {
                            self.v.pop();
                            self.z.pop();
                        } else {
                            self.v.push(q);
                            self.z.push(s);
                            break;
                        }
                    }
                }
            }
        }
        if self.v.is_empty() {
            return;
        }
        let mut k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            while k + 1 < self.v.len() && self.z[k + 1] < q as f64 {
                k += 1;
            }
            let p = self.v[k];
            let d = q as f64 - p as f64;
            *o = w2 * d * d + f[p];
        }
    }
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dice: f64,
    pub conform: Option<f64>,
    pub jaccard: f64,
    pub adb_mm: Option<f64>,
    pub hdb_mm: Option<f64>,
    pub degenerate: bool,
}

/// Scores one prediction against its ground truth. Empty masks do not
/// error: distances are left undefined and the case is flagged.
pub fn evaluate_case(case_id: &str, pred: &BinaryMask, truth: &BinaryMask) -> Result<CaseMetrics> {
    let o = overlap_metrics(pred, truth)?;
    let dist = if pred.count() > 0 && truth.count() > 0 {
        Some(boundary_distances(pred, truth, truth.spacing())?)
    } else {
        None
    };
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        dice: o.dice,
        conform: o.conform,
        jaccard: o.jaccard,
        adb_mm: dist.map(|d| d.adb_mm),
        hdb_mm: dist.map(|d| d.hdb_mm),
        degenerate: o.degenerate || dist.is_none(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub dice: f64,
    pub conform: Option<f64>,
    pub jaccard: f64,
    pub adb_mm: Option<f64>,
    pub hdb_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub cases: Vec<CaseMetrics>,
    pub mean: Aggregate,
    pub degenerate_cases: usize,
}

fn mean_of(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs.flatten() {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

impl MetricsReport {
    /// Aggregates are means of the defined per-case values.
    pub fn new(label: impl Into<String>, cases: Vec<CaseMetrics>) -> Self {
        let mean = Aggregate {
            dice: mean_of(cases.iter().map(|c| Some(c.dice))).unwrap_or(f64::NAN),
            conform: mean_of(cases.iter().map(|c| c.conform)),
            jaccard: mean_of(cases.iter().map(|c| Some(c.jaccard))).unwrap_or(f64::NAN),
            adb_mm: mean_of(cases.iter().map(|c| c.adb_mm)),
            hdb_mm: mean_of(cases.iter().map(|c| c.hdb_mm)),
        };
        let degenerate_cases = cases.iter().filter(|c| c.degenerate).count();
        Self {
            label: label.into(),
            cases,
            mean,
            degenerate_cases,
        }
    }

    pub const CSV_HEADER: &'static str = "case_id,dice,conform,jaccard,adb_mm,hdb_mm,degenerate";

    /// One row per case plus a final `mean` row. Undefined values are empty.
    pub fn to_csv(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for c in &self.cases {
            let _ = writeln!(
                s,
                "{},{:.6},{},{:.6},{},{},{}",
                c.case_id,
                c.dice,
                opt(c.conform),
                c.jaccard,
                opt(c.adb_mm),
                opt(c.hdb_mm),
                c.degenerate
            );
        }
        let m = &self.mean;
        let _ = writeln!(
            s,
            "mean,{:.6},{},{:.6},{},{},{}",
            m.dice,
            opt(m.conform),
            m.jaccard,
            opt(m.adb_mm),
            opt(m.hdb_mm),
            self.degenerate_cases
        );
        s
    }

    pub fn save(&self, csv: &Path, json: &Path) -> Result<()> {
        write_atomic(csv, self.to_csv().as_bytes())?;
        write_atomic(json, serde_json::to_string_pretty(self)?.as_bytes())
    }
}
