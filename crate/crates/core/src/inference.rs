//! Whole-volume prediction: ROI localization, overlapping sliding windows,
//! threshold-map binarization and connected-component cleanup.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::{filter_components, label_components};
use crate::net3d::Network;
use crate::volcore::{normalize_zscore, BinaryMask, RoiBox, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoiConfig {
    /// Gaussian smoothing sigma in voxels.
    pub smooth_sigma: f64,
    /// Intensity percentile in `(0, 100)` above which voxels count as bright.
    pub percentile: f64,
    /// Dilation of the detected box in voxels.
    pub margin: usize,
}

impl Default for RoiConfig {
    fn default() -> Self {
        Self {
            smooth_sigma: 1.0,
            percentile: 95.0,
            margin: 4,
        }
    }
}

impl RoiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.smooth_sigma >= 0.0 && self.smooth_sigma.is_finite()) {
            return Err(Error::config("roi.smooth_sigma", "must be non-negative"));
        }
        if !(self.percentile > 0.0 && self.percentile < 100.0) {
            return Err(Error::config("roi.percentile", "must lie in (0, 100)"));
        }
        Ok(())
    }
}

/// Separable Gaussian blur with mirrored borders.
pub fn gaussian_smooth(volume: &Volume, sigma: f64) -> Volume {
    if sigma <= 0.0 {
        return volume.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let dims = volume.dims();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut cur: Vec<f64> = volume.data().iter().map(|&v| v as f64).collect();
    let mut next = vec![0.0; cur.len()];
    for axis in 0..3 {
        let n = dims[axis];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = (i / strides[axis]) % n;
            let base = i - pos * strides[axis];
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let j = crate::volcore::reflect_index(pos as isize + k as isize - radius, n);
                acc += w * cur[base + j * strides[axis]];
            }
            *out = acc;
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Volume::new(dims, volume.spacing(), cur.into_iter().map(|v| v as f32).collect()).expect("geometry unchanged")
}

/// Nearest-rank percentile of the data.
pub fn percentile(data: &[f32], q: f64) -> f32 {
    let mut sorted = data.to_vec();
    sorted.sort_by(f32::total_cmp);
    let rank = ((q / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Bounding box of the largest bright blob, dilated by the margin. Falls
/// back to the whole volume when nothing stands out.
pub fn detect_roi(volume: &Volume, cfg: &RoiConfig) -> Result<RoiBox> {
    cfg.validate()?;
    let smooth = gaussian_smooth(volume, cfg.smooth_sigma);
    let t = percentile(smooth.data(), cfg.percentile);
    let bright = smooth.map(|v| v > t);
    let comps = label_components(&bright);
    let Some(largest) = comps.largest() else {
        return Ok(RoiBox::whole(volume.dims()));
    };
    let mut blob = bright;
    for (b, &l) in blob.data_mut().iter_mut().zip(&comps.labels) {
        *b = l == largest;
    }
    match blob.bounding_box() {
        Some(b) => b.expand_clamped(cfg.margin, volume.dims()),
        None => Ok(RoiBox::whole(volume.dims())),
    }
}

// ---------------------------------------------------------------------------
// Sliding windows

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binarize {
    /// Foreground where the probability exceeds the threshold map.
    ThresholdMap,
    /// Foreground where the probability exceeds `scalar_threshold`.
    Scalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TilingConfig {
    /// Fraction of the window shared by neighbors along each axis.
    pub overlap: [f64; 3],
    pub binarize: Binarize,
    pub scalar_threshold: f64,
    /// Keep components of at least this size; `None` keeps the largest only.
    pub min_component_voxels: Option<usize>,
}

impl Default for TilingConfig {
    fn default() -> Self {
        Self {
            overlap: [0.5; 3],
            binarize: Binarize::ThresholdMap,
            scalar_threshold: 0.5,
            min_component_voxels: None,
        }
    }
}

impl TilingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.overlap.iter().any(|o| !(0.0..1.0).contains(o)) {
            return Err(Error::config("tiling.overlap", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Anything that maps a fixed-size window to probability and threshold
/// maps of the same size.
pub trait WindowModel {
    fn window(&self) -> [usize; 3];
    fn predict_window(&self, crop: &Volume) -> Result<(Volume, Volume)>;
}

impl WindowModel for Network {
    fn window(&self) -> [usize; 3] {
        self.config().crop
    }

    fn predict_window(&self, crop: &Volume) -> Result<(Volume, Volume)> {
        let out = self.forward(crop)?;
        Ok((out.main_prob, out.tm))
    }
}

/// Window starts along one axis: regular stride, last window flush with
/// the end.
pub fn window_starts(n: usize, window: usize, overlap: f64) -> Result<Vec<usize>> {
    if window == 0 || window > n {
        return Err(Error::config(
            "tiling.window",
            format!("window {window} does not fit axis of {n} voxels"),
        ));
    }
    let stride = ((window as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let mut starts = Vec::new();
    let mut s = 0;
    while s + window < n {
        starts.push(s);
        s += stride;
    }
    starts.push(n - window);
    Ok(starts)
}

/// Stitched probability and threshold maps over the whole volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Stitched {
    pub prob: Volume,
    pub tm: Volume,
}

/// Averages window predictions over an overlapping tiling. Volumes smaller
/// than the window are mirror-padded first; outputs have the input's
/// geometry. Windows are always accumulated in the same (z, y, x) order,
/// in f64, so the result is reproducible bit for bit.
pub fn sliding_window_predict(model: &impl WindowModel, volume: &Volume, cfg: &TilingConfig) -> Result<Stitched> {
    cfg.validate()?;
    let window = model.window();
    let dims = volume.dims();
    let mut lo = [0; 3];
    let mut hi = [0; 3];
    for a in 0..3 {
        let short = window[a].saturating_sub(dims[a]);
        lo[a] = short / 2;
        hi[a] = short - lo[a];
    }
    let padded = if short_any(lo, hi) {
        volume.pad_reflect(lo, hi)
    } else {
        volume.clone()
    };
    let pd = padded.dims();
    let starts: Vec<Vec<usize>> = (0..3)
        .map(|a| window_starts(pd[a], window[a], cfg.overlap[a]))
        .collect::<Result<_>>()?;

    let n = padded.len();
    let mut acc_p = vec![0f64; n];
    let mut acc_t = vec![0f64; n];
    let mut hits = vec![0u32; n];
    for &z0 in &starts[2] {
        for &y0 in &starts[1] {
            for &x0 in &starts[0] {
                let roi = RoiBox::new([x0, y0, z0], [x0 + window[0], y0 + window[1], z0 + window[2]])?;
                let crop = padded.extract(&roi)?;
                let (p, t) = model.predict_window(&crop)?;
                if p.dims() != window || t.dims() != window {
                    return Err(Error::Shape {
                        op: "window prediction",
                        lhs: p.dims().to_vec(),
                        rhs: window.to_vec(),
                    });
                }
                for (k, (&pv, &tv)) in p.data().iter().zip(t.data()).enumerate() {
                    let c = crop.coord(k);
                    let i = padded.index([x0 + c[0], y0 + c[1], z0 + c[2]]);
                    acc_p[i] += pv as f64;
                    acc_t[i] += tv as f64;
                    hits[i] += 1;
                }
            }
        }
    }
    let avg = |acc: &[f64]| -> Result<Volume> {
        let full = Volume::new(
            pd,
            volume.spacing(),
            acc.iter().zip(&hits).map(|(&s, &h)| (s / h as f64) as f32).collect(),
        )?;
        full.extract(&RoiBox::new(lo, [lo[0] + dims[0], lo[1] + dims[1], lo[2] + dims[2]])?)
    };
    Ok(Stitched {
        prob: avg(&acc_p)?,
        tm: avg(&acc_t)?,
    })
}

fn short_any(lo: [usize; 3], hi: [usize; 3]) -> bool {
    lo.iter().chain(&hi).any(|&v| v > 0)
}

/// Gate each voxel (probability above threshold map or scalar), then drop
/// small components.
pub fn binarize_and_filter(prob: &Volume, tm: &Volume, cfg: &TilingConfig) -> Result<BinaryMask> {
    prob.ensure_same_geometry(tm)?;
    let data = match cfg.binarize {
        Binarize::ThresholdMap => prob.data().iter().zip(tm.data()).map(|(&p, &t)| p > t).collect(),
        Binarize::Scalar => {
            let s = cfg.scalar_threshold as f32;
            prob.data().iter().map(|&p| p > s).collect()
        }
    };
    let raw = BinaryMask::new(prob.dims(), prob.spacing(), data)?;
    Ok(filter_components(&raw, cfg.min_component_voxels))
}

// ---------------------------------------------------------------------------
// Full-case prediction

/// ROI crop of a raw case, normalized, plus where it sits in the source.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedInput {
    pub image: Volume,
    pub roi: RoiBox,
    pub source_dims: [usize; 3],
}

/// Localizes, crops and z-scores a raw volume.
pub fn prepare_input(raw: &Volume, roi_cfg: &RoiConfig) -> Result<PreparedInput> {
    let roi = detect_roi(raw, roi_cfg)?;
    Ok(PreparedInput {
        image: normalize_zscore(&raw.extract(&roi)?)?,
        roi,
        source_dims: raw.dims(),
    })
}

/// Summation join of a normalized intensity crop and a prior probability
/// map.
pub fn join_prior(image: &Volume, prior: &Volume) -> Result<Volume> {
    image.ensure_same_geometry(prior)?;
    let mut out = image.clone();
    for (o, &p) in out.data_mut().iter_mut().zip(prior.data()) {
        *o += p;
    }
    Ok(out)
}

/// Runs a refinement cascade on a prepared input: level 0 sees the image,
/// level k the image joined with level k−1's probability map. Returns the
/// maps of every level.
pub fn predict_cascade(levels: &[Network], input: &Volume, tiling: &TilingConfig) -> Result<Vec<Stitched>> {
    let mut out: Vec<Stitched> = Vec::with_capacity(levels.len());
    for net in levels {
        let x = match out.last() {
            None => input.clone(),
            Some(prev) => join_prior(input, &prev.prob)?,
        };
        out.push(sliding_window_predict(net, &x, tiling)?);
    }
    Ok(out)
}

/// Final mask in source coordinates: ROI-space maps are binarized, filtered
/// and pasted into an empty volume.
pub fn finalize_mask(
    prep: &PreparedInput,
    maps: &Stitched,
    tiling: &TilingConfig,
    spacing: [f64; 3],
) -> Result<BinaryMask> {
    let local = binarize_and_filter(&maps.prob, &maps.tm, tiling)?;
    let mut full = BinaryMask::filled(prep.source_dims, spacing, false)?;
    full.paste(&local, &prep.roi)?;
    Ok(full)
}

/// Pastes ROI-space maps back into source coordinates; probability 0 and
/// threshold 1 outside the box.
pub fn expand_maps(prep: &PreparedInput, maps: &Stitched, spacing: [f64; 3]) -> Result<Stitched> {
    let mut prob = Volume::filled(prep.source_dims, spacing, 0.0)?;
    let mut tm = Volume::filled(prep.source_dims, spacing, 1.0)?;
    prob.paste(&maps.prob, &prep.roi)?;
    tm.paste(&maps.tm, &prep.roi)?;
    Ok(Stitched { prob, tm })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_cover_and_end_flush() {
        assert_eq!(window_starts(32, 32, 0.5).unwrap(), vec![0]);
        assert_eq!(window_starts(48, 32, 0.5).unwrap(), vec![0, 16]);
        assert_eq!(window_starts(50, 32, 0.5).unwrap(), vec![0, 16, 18]);
        assert_eq!(window_starts(40, 16, 0.0).unwrap(), vec![0, 16, 24]);
        assert!(window_starts(8, 16, 0.5).is_err());
    }

    #[test]
    fn percentile_nearest_rank() {
        let d: Vec<f32> = (1..=20).map(|v| v as f32).collect();
        assert_eq!(percentile(&d, 95.0), 19.0);
        assert_eq!(percentile(&d, 50.0), 10.0);
    }

    #[test]
    fn smoothing_preserves_constants() {
        let v = Volume::filled([5, 6, 7], [1.0; 3], 2.5).unwrap();
        let s = gaussian_smooth(&v, 1.3);
        assert!(s.data().iter().all(|&x| (x - 2.5).abs() < 1e-6));
    }
}
