//! Volumetric grids, ROI boxes, the header+raw file pair and intensity
//! normalization.
//!
//! Layout is row-major with x fastest and z slowest:
//! `index = (z * ny + y) * nx + x`, `dims = [nx, ny, nz]`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Dense 3D grid with physical voxel spacing in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<T>,
}

/// Scalar intensities or probability maps.
pub type Volume = Grid<f32>;
/// Ground truth and predicted labels.
pub type BinaryMask = Grid<bool>;

impl<T: Copy> Grid<T> {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<T>) -> Result<Self> {
        validate_geometry(dims, spacing)?;
        let n = dims.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::InvalidInput(format!(
                "data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                dims,
                n
            )));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: T) -> Result<Self> {
        let n = dims.iter().product::<usize>();
        Self::new(dims, spacing, vec![value; n])
    }

    pub fn from_fn(dims: [usize; 3], spacing: [f64; 3], mut f: impl FnMut([usize; 3]) -> T) -> Result<Self> {
        validate_geometry(dims, spacing)?;
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f([x, y, z]));
                }
            }
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, p: [usize; 3]) -> usize {
        (p[2] * self.dims[1] + p[1]) * self.dims[0] + p[0]
    }

    #[inline]
    pub fn coord(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let y = (index / self.dims[0]) % self.dims[1];
        let z = index / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    #[inline]
    pub fn get(&self, p: [usize; 3]) -> T {
        self.data[self.index(p)]
    }

    #[inline]
    pub fn set(&mut self, p: [usize; 3], value: T) {
        let i = self.index(p);
        self.data[i] = value;
    }

    pub fn same_geometry<U>(&self, other: &Grid<U>) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    pub fn ensure_same_geometry<U>(&self, other: &Grid<U>) -> Result<()> {
        if self.same_geometry(other) {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "geometry mismatch: dims {:?} spacing {:?} vs dims {:?} spacing {:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copy of the voxels inside `roi`.
    pub fn extract(&self, roi: &RoiBox) -> Result<Self> {
        roi.validate_within(self.dims)?;
        let out_dims = roi.extent();
        let mut data = Vec::with_capacity(out_dims.iter().product());
        for z in roi.lo[2]..roi.hi[2] {
            for y in roi.lo[1]..roi.hi[1] {
                let start = self.index([roi.lo[0], y, z]);
                data.extend_from_slice(&self.data[start..start + out_dims[0]]);
            }
        }
        Ok(Self {
            dims: out_dims,
            spacing: self.spacing,
            data,
        })
    }

    /// Writes `patch` into this grid with its origin at `roi.lo`.
    pub fn paste(&mut self, patch: &Self, roi: &RoiBox) -> Result<()> {
        roi.validate_within(self.dims)?;
        if roi.extent() != patch.dims {
            return Err(Error::InvalidRoi(format!(
                "patch dims {:?} do not match box extent {:?}",
                patch.dims,
                roi.extent()
            )));
        }
        for z in 0..patch.dims[2] {
            for y in 0..patch.dims[1] {
                let src = patch.index([0, y, z]);
                let dst = self.index([roi.lo[0], roi.lo[1] + y, roi.lo[2] + z]);
                self.data[dst..dst + patch.dims[0]].copy_from_slice(&patch.data[src..src + patch.dims[0]]);
            }
        }
        Ok(())
    }

    /// Mirror padding (edge voxel not repeated). Pads wider than the axis
    /// keep reflecting back and forth.
    pub fn pad_reflect(&self, lo: [usize; 3], hi: [usize; 3]) -> Self {
        let dims = [
            self.dims[0] + lo[0] + hi[0],
            self.dims[1] + lo[1] + hi[1],
            self.dims[2] + lo[2] + hi[2],
        ];
        let mut data = Vec::with_capacity(dims.iter().product());
        let xs: Vec<usize> = (0..dims[0])
            .map(|i| reflect_index(i as isize - lo[0] as isize, self.dims[0]))
            .collect();
        for z in 0..dims[2] {
            let sz = reflect_index(z as isize - lo[2] as isize, self.dims[2]);
            for y in 0..dims[1] {
                let sy = reflect_index(y as isize - lo[1] as isize, self.dims[1]);
                let row = (sz * self.dims[1] + sy) * self.dims[0];
                data.extend(xs.iter().map(|&sx| self.data[row + sx]));
            }
        }
        Self {
            dims,
            spacing: self.spacing,
            data,
        }
    }
}

impl BinaryMask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn to_volume(&self) -> Volume {
        self.map(|b| if b { 1.0 } else { 0.0 })
    }

    /// Tight bounding box of the foreground, `None` when empty.
    pub fn bounding_box(&self) -> Option<RoiBox> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (i, &b) in self.data.iter().enumerate() {
            if b {
                any = true;
                let p = self.coord(i);
                for a in 0..3 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a] + 1);
                }
            }
        }
        any.then_some(RoiBox { lo, hi })
    }
}

/// Mirror-reflects an out-of-range index back into `0..n`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= n as isize {
        r = period - r;
    }
    r as usize
}

fn validate_geometry(dims: [usize; 3], spacing: [f64; 3]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::InvalidInput(format!("dims must be positive, got {dims:?}")));
    }
    if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::InvalidInput(format!(
            "spacing must be positive and finite, got {spacing:?}"
        )));
    }
    Ok(())
}

/// Axis-aligned box: `lo` inclusive, `hi` exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RoiBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl RoiBox {
    pub fn new(lo: [usize; 3], hi: [usize; 3]) -> Result<Self> {
        let b = Self { lo, hi };
        if (0..3).any(|a| lo[a] >= hi[a]) {
            return Err(Error::InvalidRoi(format!("degenerate box lo {lo:?} hi {hi:?}")));
        }
        Ok(b)
    }

    pub fn whole(dims: [usize; 3]) -> Self {
        Self { lo: [0; 3], hi: dims }
    }

    pub fn extent(&self) -> [usize; 3] {
        [
            self.hi[0].saturating_sub(self.lo[0]),
            self.hi[1].saturating_sub(self.lo[1]),
            self.hi[2].saturating_sub(self.lo[2]),
        ]
    }

    pub fn voxel_count(&self) -> usize {
        self.extent().iter().product()
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] < self.hi[a])
    }

    /// Grows by `margin` on every side and clamps to `dims`.
    pub fn expand_clamped(&self, margin: usize, dims: [usize; 3]) -> Result<Self> {
        let mut lo = [0; 3];
        let mut hi = [0; 3];
        for a in 0..3 {
            lo[a] = self.lo[a].saturating_sub(margin).min(dims[a]);
            hi[a] = (self.hi[a] + margin).min(dims[a]);
        }
        Self::new(lo, hi)
    }

    fn validate_within(&self, dims: [usize; 3]) -> Result<()> {
        if (0..3).any(|a| self.lo[a] >= self.hi[a] || self.hi[a] > dims[a]) {
            return Err(Error::InvalidRoi(format!(
                "box lo {:?} hi {:?} invalid for dims {:?}",
                self.lo, self.hi, dims
            )));
        }
        Ok(())
    }
}

/// Crops `roi` grown by `margin` (clamped to the grid). The returned box
/// locates the crop in the source so predictions can be pasted back.
pub fn crop_with_margin<T: Copy>(grid: &Grid<T>, roi: &RoiBox, margin: usize) -> Result<(Grid<T>, RoiBox)> {
    let grown = roi.expand_clamped(margin, grid.dims())?;
    Ok((grid.extract(&grown)?, grown))
}

/// Zero mean, unit population standard deviation. Constant input maps to
/// zeros.
pub fn normalize_zscore(volume: &Volume) -> Result<Volume> {
    let n = volume.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "normalization needs at least 2 voxels, got {n}"
        )));
    }
    let mean = volume.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = volume
        .data()
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    if !mean.is_finite() || !std.is_finite() {
        return Err(Error::InvalidInput("volume holds non-finite values".into()));
    }
    if std <= 1e-12 * mean.abs().max(1.0) {
        return Ok(volume.map(|_| 0.0));
    }
    Ok(volume.map(|v| ((v as f64 - mean) / std) as f32))
}

// ---------------------------------------------------------------------------
// File IO

/// Element kind stored in the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemKind {
    F32,
    U8,
}

impl ElemKind {
    fn as_str(self) -> &'static str {
        match self {
            ElemKind::F32 => "f32",
            ElemKind::U8 => "u8",
        }
    }

    fn size(self) -> usize {
        match self {
            ElemKind::F32 => 4,
            ElemKind::U8 => 1,
        }
    }
}

/// Parsed header of a volume file pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub elem: ElemKind,
}

impl Header {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dims = {} {} {}", self.dims[0], self.dims[1], self.dims[2]);
        let _ = writeln!(
            s,
            "spacing_mm = {} {} {}",
            self.spacing[0], self.spacing[1], self.spacing[2]
        );
        let _ = writeln!(s, "elem = {}", self.elem.as_str());
        let _ = writeln!(s, "order = little");
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut dims = None;
        let mut spacing = None;
        let mut elem = None;
        let mut order = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Format {
                field: line.to_string(),
                reason: "expected `key = value`".into(),
            })?;
            let key = key.trim();
            let value = value.trim();
            match key {
                "dims" => dims = Some(parse_triple::<usize>(key, value)?),
                "spacing_mm" => spacing = Some(parse_triple::<f64>(key, value)?),
                "elem" => {
                    elem = Some(match value {
                        "f32" => ElemKind::F32,
                        "u8" => ElemKind::U8,
                        other => {
                            return Err(Error::Format {
                                field: "elem".into(),
                                reason: format!("unknown element kind `{other}`"),
                            })
                        }
                    })
                }
                "order" => {
                    if value != "little" {
                        return Err(Error::Format {
                            field: "order".into(),
                            reason: format!("unsupported byte order `{value}`"),
                        });
                    }
                    order = Some(());
                }
                other => {
                    return Err(Error::Format {
                        field: other.to_string(),
                        reason: "unknown header field".into(),
                    })
                }
            }
        }
        let missing = |f: &str| Error::Format {
            field: f.to_string(),
            reason: "missing".into(),
        };
        let dims = dims.ok_or_else(|| missing("dims"))?;
        let spacing = spacing.ok_or_else(|| missing("spacing_mm"))?;
        let elem = elem.ok_or_else(|| missing("elem"))?;
        order.ok_or_else(|| missing("order"))?;
        if dims.contains(&0) {
            return Err(Error::Format {
                field: "dims".into(),
                reason: "extents must be positive".into(),
            });
        }
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::Format {
                field: "spacing_mm".into(),
                reason: "spacing must be positive and finite".into(),
            });
        }
        Ok(Self { dims, spacing, elem })
    }

    fn payload_len(&self) -> usize {
        self.dims.iter().product::<usize>() * self.elem.size()
    }
}

fn parse_triple<T: std::str::FromStr>(field: &str, value: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    let bad = |reason: String| Error::Format {
        field: field.to_string(),
        reason,
    };
    if parts.len() != 3 {
        return Err(bad(format!("expected 3 values, got {}", parts.len())));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(p.parse::<T>().map_err(|_| bad(format!("cannot parse `{p}`")))?);
    }
    let mut it = out.into_iter();
    Ok([it.next().unwrap(), it.next().unwrap(), it.next().unwrap()])
}

/// Payload path paired with a header path (`x.hdr` -> `x.raw`).
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

/// Writes via a temporary sibling and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn encode_f32_le(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f32_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn write_pair(header_path: &Path, header: &Header, payload: &[u8]) -> Result<()> {
    write_atomic(&payload_path(header_path), payload)?;
    write_atomic(header_path, header.render().as_bytes())
}

fn read_pair(header_path: &Path, expect: ElemKind) -> Result<(Header, Vec<u8>)> {
    let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let header = Header::parse(&text)?;
    if header.elem != expect {
        return Err(Error::Format {
            field: "elem".into(),
            reason: format!("expected {}, found {}", expect.as_str(), header.elem.as_str()),
        });
    }
    let raw = payload_path(header_path);
    let payload = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let expected = header.payload_len();
    if payload.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: payload.len(),
        });
    }
    Ok((header, payload))
}

pub fn save_volume(path: &Path, volume: &Volume) -> Result<()> {
    let header = Header {
        dims: volume.dims(),
        spacing: volume.spacing(),
        elem: ElemKind::F32,
    };
    write_pair(path, &header, &encode_f32_le(volume.data()))
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let (header, payload) = read_pair(path, ElemKind::F32)?;
    let data = decode_f32_le(&payload);
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "{} holds non-finite values",
            path.display()
        )));
    }
    Volume::new(header.dims, header.spacing, data)
}

pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let header = Header {
        dims: mask.dims(),
        spacing: mask.spacing(),
        elem: ElemKind::U8,
    };
    let bytes: Vec<u8> = mask.data().iter().map(|&b| b as u8).collect();
    write_pair(path, &header, &bytes)
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let (header, payload) = read_pair(path, ElemKind::U8)?;
    if let Some(bad) = payload.iter().find(|&&b| b > 1) {
        return Err(Error::Format {
            field: "payload".into(),
            reason: format!("mask byte {bad} is not 0 or 1"),
        });
    }
    BinaryMask::new(header.dims, header.spacing, payload.iter().map(|&b| b == 1).collect())
}
