//! Synthetic atrium-like phantoms (an ellipsoid body with capsule-shaped
//! vein protrusions) and the spatial augmentations used during training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::label_components;
use crate::volcore::{BinaryMask, Volume};

/// Inclusive `[min, max]` range sampled uniformly.
pub type Range = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Semi-axis lengths of the body in voxels.
    pub body_semi_axes: Range,
    pub vein_count: [usize; 2],
    pub vein_radius: Range,
    pub vein_length: Range,
    pub fg_mean: f64,
    pub bg_mean: f64,
    pub noise_sigma: f64,
    /// Peak relative deviation of the multiplicative bias field.
    pub bias_amplitude: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [48, 48, 48],
            spacing: [1.0; 3],
            body_semi_axes: [7.0, 11.0],
            vein_count: [2, 4],
            vein_radius: [1.5, 2.5],
            vein_length: [5.0, 10.0],
            fg_mean: 1.0,
            bg_mean: 0.3,
            noise_sigma: 0.15,
            bias_amplitude: 0.2,
            seed: 0,
        }
    }
}

fn check_range(key: &str, r: Range) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite()) || r[0] > r[1] {
        return Err(Error::config(key, format!("invalid range {r:?}")));
    }
    Ok(())
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        check_range("body_semi_axes", self.body_semi_axes)?;
        check_range("vein_radius", self.vein_radius)?;
        check_range("vein_length", self.vein_length)?;
        if self.vein_count[0] > self.vein_count[1] {
            return Err(Error::config("vein_count", "min exceeds max"));
        }
        if self.body_semi_axes[0] < 1.0 {
            return Err(Error::config("body_semi_axes", "semi-axes must be at least 1 voxel"));
        }
        if self.vein_radius[0] < 1.0 {
            return Err(Error::config("vein_radius", "radius must be at least 1 voxel"));
        }
        if self.vein_length[0] < 0.0 {
            return Err(Error::config("vein_length", "length must be non-negative"));
        }
        if self.spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::config("spacing", "must be positive and finite"));
        }
        if !(self.noise_sigma >= 0.0 && self.bias_amplitude >= 0.0 && self.bias_amplitude < 1.0) {
            return Err(Error::config(
                "noise_sigma/bias_amplitude",
                "noise must be >= 0 and bias amplitude in [0, 1)",
            ));
        }
        // the body may rotate freely, so its largest semi-axis must fit on
        // every axis with a 2-voxel margin
        let need = 2.0 * (self.body_semi_axes[1] + 2.0) + 1.0;
        for (a, &d) in self.dims.iter().enumerate() {
            if (d as f64) < need {
                return Err(Error::config(
                    "dims",
                    format!("axis {a} has {d} voxels, body needs {need}"),
                ));
            }
        }
        Ok(())
    }
}

type Mat3 = [[f64; 3]; 3];

fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

fn transpose(m: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = m[j][i];
        }
    }
    t
}

/// Rotation by `angles` (radians) about x, then y, then z.
fn rotation(angles: [f64; 3]) -> Mat3 {
    let (sx, cx) = angles[0].sin_cos();
    let (sy, cy) = angles[1].sin_cos();
    let (sz, cz) = angles[2].sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&rz, &mat_mul(&ry, &rx))
}

fn unit_vector(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        ];
        let n = norm(v);
        if n > 1e-3 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn sample(rng: &mut impl Rng, r: Range) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

struct Capsule {
    a: [f64; 3],
    b: [f64; 3],
    radius: f64,
}

impl Capsule {
    fn contains(&self, p: [f64; 3]) -> bool {
        let ab = [self.b[0] - self.a[0], self.b[1] - self.a[1], self.b[2] - self.a[2]];
        let ap = [p[0] - self.a[0], p[1] - self.a[1], p[2] - self.a[2]];
        let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
        let t = if len2 > 0.0 {
            ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let d = [ap[0] - t * ab[0], ap[1] - t * ab[1], ap[2] - t * ab[2]];
        norm(d) <= self.radius
    }
}

/// Draws one labeled phantom. Pure function of the config (seed included).
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<(Volume, BinaryMask)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dims = cfg.dims;

    let axes = [
        sample(&mut rng, cfg.body_semi_axes),
        sample(&mut rng, cfg.body_semi_axes),
        sample(&mut rng, cfg.body_semi_axes),
    ];
    let reach = axes.iter().cloned().fold(0.0, f64::max) + 2.0;
    let mut center = [0.0; 3];
    for a in 0..3 {
        let lo = reach;
        let hi = dims[a] as f64 - 1.0 - reach;
        center[a] = if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            (dims[a] as f64 - 1.0) / 2.0
        };
    }
    let rot = rotation([
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
    ]);
    let rot_t = transpose(&rot);

    let n_veins = rng.random_range(cfg.vein_count[0]..=cfg.vein_count[1]);
    let mut veins = Vec::with_capacity(n_veins);
    for _ in 0..n_veins {
        // point on the surface along a random body-frame direction
        let u = unit_vector(&mut rng);
        let s = 1.0 / ((u[0] / axes[0]).powi(2) + (u[1] / axes[1]).powi(2) + (u[2] / axes[2]).powi(2)).sqrt();
        let surf_local = [u[0] * s, u[1] * s, u[2] * s];
        // outward normal of the ellipsoid at that point, jittered
        let n_local = [
            surf_local[0] / (axes[0] * axes[0]),
            surf_local[1] / (axes[1] * axes[1]),
            surf_local[2] / (axes[2] * axes[2]),
        ];
        let jitter = unit_vector(&mut rng);
        let nn = norm(n_local);
        let dir_local = [
            n_local[0] / nn + 0.3 * jitter[0],
            n_local[1] / nn + 0.3 * jitter[1],
            n_local[2] / nn + 0.3 * jitter[2],
        ];
        let dn = norm(dir_local);
        let dir = mat_vec(&rot, [dir_local[0] / dn, dir_local[1] / dn, dir_local[2] / dn]);
        let surf = mat_vec(&rot, surf_local);
        let radius = sample(&mut rng, cfg.vein_radius);
        let length = sample(&mut rng, cfg.vein_length);
        // start inside the body so the tube is attached
        let start = [
            center[0] + surf[0] - dir[0] * radius,
            center[1] + surf[1] - dir[1] * radius,
            center[2] + surf[2] - dir[2] * radius,
        ];
        let end = [
            center[0] + surf[0] + dir[0] * length,
            center[1] + surf[1] + dir[1] * length,
            center[2] + surf[2] + dir[2] * length,
        ];
        veins.push(Capsule {
            a: start,
            b: end,
            radius,
        });
    }

    let raw = BinaryMask::from_fn(dims, cfg.spacing, |p| {
        let q = [p[0] as f64, p[1] as f64, p[2] as f64];
        let d = [q[0] - center[0], q[1] - center[1], q[2] - center[2]];
        let l = mat_vec(&rot_t, d);
        let inside = (l[0] / axes[0]).powi(2) + (l[1] / axes[1]).powi(2) + (l[2] / axes[2]).powi(2) <= 1.0;
        inside || veins.iter().any(|c| c.contains(q))
    })?;
    // keep the component holding the body center; vein voxels that only
    // touch it diagonally are dropped
    let comps = label_components(&raw);
    let c_idx = raw.index([
        center[0].round() as usize,
        center[1].round() as usize,
        center[2].round() as usize,
    ]);
    let keep = match comps.labels[c_idx] {
        0 => comps.largest().unwrap_or(0),
        l => l,
    };
    let mut mask = raw;
    for (m, &l) in mask.data_mut().iter_mut().zip(&comps.labels) {
        *m = l != 0 && l == keep;
    }

    // quadratic bias field over coordinates normalized to [-1, 1]
    let coeffs: [f64; 9] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::config("noise_sigma", e.to_string()))?;
    let half = [
        (dims[0] as f64 - 1.0).max(1.0) / 2.0,
        (dims[1] as f64 - 1.0).max(1.0) / 2.0,
        (dims[2] as f64 - 1.0).max(1.0) / 2.0,
    ];
    let mut data = Vec::with_capacity(mask.len());
    for (i, &m) in mask.data().iter().enumerate() {
        let p = mask.coord(i);
        let x = p[0] as f64 / half[0] - 1.0;
        let y = p[1] as f64 / half[1] - 1.0;
        let z = p[2] as f64 / half[2] - 1.0;
        let terms = [x, y, z, x * y, y * z, x * z, x * x, y * y, z * z];
        let poly: f64 = coeffs.iter().zip(terms).map(|(c, t)| c * t).sum::<f64>() / 9.0;
        let bias = 1.0 + cfg.bias_amplitude * poly;
        let base = cfg.bg_mean + (cfg.fg_mean - cfg.bg_mean) * m as u8 as f64;
        let n = if cfg.noise_sigma > 0.0 {
            noise.sample(&mut rng)
        } else {
            0.0
        };
        data.push((base * bias + n) as f32);
    }
    Ok((Volume::new(dims, cfg.spacing, data)?, mask))
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Probability of mirroring along x, y, z.
    pub flip_prob: [f64; 3],
    /// Rotation about each axis drawn from `[-max, max]` degrees.
    pub rotation_deg: f64,
    /// Control-point spacing of the elastic displacement grid (voxels).
    pub elastic_grid: usize,
    /// Standard deviation of control-point displacements (voxels).
    pub elastic_sigma: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: [0.5; 3],
            rotation_deg: 15.0,
            elastic_grid: 8,
            elastic_sigma: 2.0,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No-op transform.
    pub fn identity() -> Self {
        Self {
            flip_prob: [0.0; 3],
            rotation_deg: 0.0,
            elastic_grid: 8,
            elastic_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.flip_prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config("flip_prob", "probabilities must lie in [0, 1]"));
        }
        if !(self.rotation_deg >= 0.0 && self.rotation_deg.is_finite()) {
            return Err(Error::config("rotation_deg", "must be non-negative"));
        }
        if !(self.elastic_sigma >= 0.0 && self.elastic_sigma.is_finite()) {
            return Err(Error::config("elastic_sigma", "must be non-negative"));
        }
        if self.elastic_grid == 0 {
            return Err(Error::config("elastic_grid", "must be positive"));
        }
        Ok(())
    }
}

/// Applies one random flip/rotation/elastic draw seeded by `cfg.seed`.
pub fn augment(volume: &Volume, mask: &BinaryMask, cfg: &AugmentConfig) -> Result<(Volume, BinaryMask)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    augment_with(volume, mask, cfg, &mut rng)
}

/// Like [`augment`] but draws from the caller's generator.
pub fn augment_with(
    volume: &Volume,
    mask: &BinaryMask,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(Volume, BinaryMask)> {
    cfg.validate()?;
    volume.ensure_same_geometry(mask)?;
    let dims = volume.dims();
    let flips: [bool; 3] = std::array::from_fn(|a| rng.random::<f64>() < cfg.flip_prob[a]);
    let max = cfg.rotation_deg.to_radians();
    let angles: [f64; 3] = std::array::from_fn(|_| if max > 0.0 { rng.random_range(-max..=max) } else { 0.0 });
    let field = (cfg.elastic_sigma > 0.0).then(|| DisplacementField::random(dims, cfg, rng));

    if angles == [0.0; 3] && field.is_none() {
        // pure index permutation keeps values bit-exact
        let src =
            |p: [usize; 3]| -> [usize; 3] { std::array::from_fn(|a| if flips[a] { dims[a] - 1 - p[a] } else { p[a] }) };
        let v = Volume::from_fn(dims, volume.spacing(), |p| volume.get(src(p)))?;
        let m = BinaryMask::from_fn(dims, mask.spacing(), |p| mask.get(src(p)))?;
        return Ok((v, m));
    }

    let fill = background_mean(volume, mask);
    let c: [f64; 3] = std::array::from_fn(|a| (dims[a] as f64 - 1.0) / 2.0);
    let rot_t = transpose(&rotation(angles));
    let source = |p: [usize; 3]| -> [f64; 3] {
        let q: [f64; 3] = std::array::from_fn(|a| {
            let v = if flips[a] { dims[a] - 1 - p[a] } else { p[a] };
            v as f64 - c[a]
        });
        let r = mat_vec(&rot_t, q);
        let d = field.as_ref().map_or([0.0; 3], |f| f.at(p));
        std::array::from_fn(|a| r[a] + c[a] + d[a])
    };
    let mut out_v = Vec::with_capacity(volume.len());
    let mut out_m = Vec::with_capacity(volume.len());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let s = source([x, y, z]);
                out_v.push(trilinear(volume, s, fill));
                out_m.push(nearest(mask, s));
            }
        }
    }
    Ok((
        Volume::new(dims, volume.spacing(), out_v)?,
        BinaryMask::new(dims, mask.spacing(), out_m)?,
    ))
}

fn background_mean(volume: &Volume, mask: &BinaryMask) -> f32 {
    let (sum, n) = volume
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| !m)
        .fold((0.0f64, 0usize), |(s, n), (&v, _)| (s + v as f64, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64) as f32
    }
}

/// Trilinear sample; points outside the grid read `fill`.
pub fn trilinear(volume: &Volume, p: [f64; 3], fill: f32) -> f32 {
    let dims = volume.dims();
    let mut i0 = [0usize; 3];
    let mut w = [0.0f64; 3];
    for a in 0..3 {
        let max = (dims[a] - 1) as f64;
        if !(p[a] >= 0.0 && p[a] <= max) {
            return fill;
        }
        let f = p[a].floor();
        i0[a] = (f as usize).min(dims[a].saturating_sub(2));
        w[a] = p[a] - i0[a] as f64;
    }
    let mut acc = 0.0f64;
    for corner in 0..8 {
        let mut q = [0usize; 3];
        let mut weight = 1.0;
        for a in 0..3 {
            let hi = (corner >> a) & 1 == 1;
            if dims[a] == 1 {
                if hi {
                    weight = 0.0;
                }
                q[a] = 0;
                continue;
            }
            q[a] = i0[a] + hi as usize;
            weight *= if hi { w[a] } else { 1.0 - w[a] };
        }
        if weight != 0.0 {
            acc += weight * volume.get(q) as f64;
        }
    }
    acc as f32
}

fn nearest(mask: &BinaryMask, p: [f64; 3]) -> bool {
    let dims = mask.dims();
    let mut q = [0usize; 3];
    for a in 0..3 {
        let r = p[a].round();
        if !(r >= 0.0 && r < dims[a] as f64) {
            return false;
        }
        q[a] = r as usize;
    }
    mask.get(q)
}

/// Random displacements on a coarse control grid, spread to every voxel
/// with cubic B-spline weights (free-form deformation).
struct DisplacementField {
    grid: usize,
    nodes: [usize; 3],
    disp: Vec<[f64; 3]>,
}

fn bspline_weights(t: f64) -> [f64; 4] {
    let s = 1.0 - t;
    [
        s * s * s / 6.0,
        (3.0 * t * t * t - 6.0 * t * t + 4.0) / 6.0,
        (-3.0 * t * t * t + 3.0 * t * t + 3.0 * t + 1.0) / 6.0,
        t * t * t / 6.0,
    ]
}

impl DisplacementField {
    fn random(dims: [usize; 3], cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let grid = cfg.elastic_grid;
        // one extra node before the first cell and two after the last
        let nodes: [usize; 3] = std::array::from_fn(|a| (dims[a] - 1) / grid + 4);
        let normal = Normal::new(0.0, cfg.elastic_sigma).expect("validated sigma");
        let n = nodes.iter().product();
        let disp = (0..n).map(|_| std::array::from_fn(|_| normal.sample(rng))).collect();
        Self { grid, nodes, disp }
    }

    fn at(&self, p: [usize; 3]) -> [f64; 3] {
        let mut i0 = [0usize; 3];
        let mut w = [[0.0; 4]; 3];
        for a in 0..3 {
            i0[a] = p[a] / self.grid;
            w[a] = bspline_weights((p[a] % self.grid) as f64 / self.grid as f64);
        }
        let mut out = [0.0; 3];
        for k in 0..4 {
            for j in 0..4 {
                let wjk = w[1][j] * w[2][k];
                let row = ((i0[2] + k) * self.nodes[1] + i0[1] + j) * self.nodes[0] + i0[0];
                for i in 0..4 {
                    let wt = w[0][i] * wjk;
                    let d = self.disp[row + i];
                    for a in 0..3 {
                        out[a] += wt * d[a];
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_is_orthonormal() {
        let r = rotation([0.3, -1.1, 2.0]);
        let i = mat_mul(&r, &transpose(&r));
        for a in 0..3 {
            for b in 0..3 {
                let e = if a == b { 1.0 } else { 0.0 };
                assert!((i[a][b] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trilinear_reproduces_grid_values_and_linear_fields() {
        let v = Volume::from_fn([4, 3, 5], [1.0; 3], |p| (p[0] + 2 * p[1] + 3 * p[2]) as f32).unwrap();
        assert_eq!(trilinear(&v, [2.0, 1.0, 3.0], -1.0), 13.0);
        let got = trilinear(&v, [1.5, 0.25, 2.75], -1.0);
        assert!((got - (1.5 + 0.5 + 8.25)).abs() < 1e-5);
        assert_eq!(trilinear(&v, [-0.1, 0.0, 0.0], -1.0), -1.0);
        assert_eq!(trilinear(&v, [3.0, 2.0, 4.0], -1.0), 3.0 + 4.0 + 12.0);
    }

    #[test]
    fn bspline_weights_partition_unity() {
        for t in [0.0, 0.2, 0.5, 0.9] {
            let w = bspline_weights(t);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn oversized_body_is_rejected() {
        let cfg = PhantomConfig {
            dims: [16, 16, 16],
            body_semi_axes: [6.0, 7.0],
            ..PhantomConfig::default()
        };
        assert!(matches!(generate_phantom(&cfg), Err(Error::Config { .. })));
    }
}
