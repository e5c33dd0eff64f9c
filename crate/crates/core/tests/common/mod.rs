//! Brute-force oracles shared by the metric tests and the acceptance run.
#![allow(dead_code)]

use atrium_core::BinaryMask;
use rand::Rng;

pub fn random_mask(rng: &mut impl Rng, dims: [usize; 3], density: f64) -> BinaryMask {
    let n = dims.iter().product();
    BinaryMask::new(dims, [1.0; 3], (0..n).map(|_| rng.random::<f64>() < density).collect()).unwrap()
}

/// Random pair of congruent masks up to 8³ with at least one voxel each.
pub fn random_pair(rng: &mut impl Rng) -> (BinaryMask, BinaryMask) {
    loop {
        let dims = [
            rng.random_range(1..=8),
            rng.random_range(1..=8),
            rng.random_range(1..=8),
        ];
        let da = rng.random_range(0.02..0.7);
        let db = rng.random_range(0.02..0.7);
        let a = random_mask(rng, dims, da);
        let b = random_mask(rng, dims, db);
        if a.count() > 0 && b.count() > 0 {
            return (a, b);
        }
    }
}

/// (|A|, |B|, |A∩B|) by a voxel loop.
pub fn counts(a: &BinaryMask, b: &BinaryMask) -> (u64, u64, u64) {
    let [nx, ny, nz] = a.dims();
    let (mut na, mut nb, mut both) = (0, 0, 0);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (u, v) = (a.get([x, y, z]), b.get([x, y, z]));
                na += u as u64;
                nb += v as u64;
                both += (u && v) as u64;
            }
        }
    }
    (na, nb, both)
}

/// Foreground voxels with a face neighbor that is background or off-grid.
pub fn boundary_oracle(m: &BinaryMask) -> Vec<[usize; 3]> {
    let d = m.dims();
    let mut out = Vec::new();
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                if !m.get([x, y, z]) {
                    continue;
                }
                let p = [x as i64, y as i64, z as i64];
                let mut exposed = false;
                for (ax, s) in [(0, -1), (0, 1), (1, -1), (1, 1), (2, -1), (2, 1)] {
                    let mut q = p;
                    q[ax] += s;
                    let inside = (0..3).all(|a| q[a] >= 0 && q[a] < d[a] as i64);
                    if !inside || !m.get([q[0] as usize, q[1] as usize, q[2] as usize]) {
                        exposed = true;
                    }
                }
                if exposed {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn dist(p: [usize; 3], q: [usize; 3], s: [f64; 3]) -> f64 {
    (0..3)
        .map(|a| {
            let d = (p[a] as f64 - q[a] as f64) * s[a];
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// (Adb, Hdb) by all-pairs search over the boundary sets.
pub fn distances_oracle(a: &BinaryMask, b: &BinaryMask, s: [f64; 3]) -> (f64, f64) {
    let ba = boundary_oracle(a);
    let bb = boundary_oracle(b);
    let near = |p: [usize; 3], set: &[[usize; 3]]| set.iter().map(|&q| dist(p, q, s)).fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    for &p in &ba {
        let d = near(p, &bb);
        sum += d;
        max = max.max(d);
    }
    for &q in &bb {
        let d = near(q, &ba);
        sum += d;
        max = max.max(d);
    }
    (sum / (ba.len() + bb.len()) as f64, max)
}
