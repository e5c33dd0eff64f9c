//! 6-connected component labeling on binary masks.

use crate::volcore::BinaryMask;

/// Component labels (0 = background, components numbered from 1 in scan
/// order) and the voxel count of each component (`sizes[k - 1]` for
/// label `k`).
#[derive(Debug, Clone)]
pub struct Components {
    pub labels: Vec<u32>,
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    /// Label of the largest component; ties go to the lowest label.
    pub fn largest(&self) -> Option<u32> {
        let mut best: Option<(usize, usize)> = None;
        for (i, &s) in self.sizes.iter().enumerate() {
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some((i, s));
            }
        }
        best.map(|(i, _)| i as u32 + 1)
    }
}

/// Offsets of the six face neighbors that stay inside `dims`.
#[inline]
pub fn face_neighbors(p: [usize; 3], dims: [usize; 3]) -> impl Iterator<Item = [usize; 3]> {
    const STEPS: [(usize, isize); 6] = [(0, -1), (0, 1), (1, -1), (1, 1), (2, -1), (2, 1)];
    STEPS.into_iter().filter_map(move |(axis, d)| {
        let v = p[axis] as isize + d;
        if v < 0 || v >= dims[axis] as isize {
            None
        } else {
            let mut q = p;
            q[axis] = v as usize;
            Some(q)
        }
    })
}

pub fn label_components(mask: &BinaryMask) -> Components {
    let dims = mask.dims();
    let data = mask.data();
    let mut labels = vec![0u32; data.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..data.len() {
        if !data[start] || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels[start] = label;
        stack.push(start);
        let mut size = 0usize;
        while let Some(i) = stack.pop() {
            size += 1;
            for q in face_neighbors(mask.coord(i), dims) {
                let j = mask.index(q);
                if data[j] && labels[j] == 0 {
                    labels[j] = label;
                    stack.push(j);
                }
            }
        }
        sizes.push(size);
    }
    Components { labels, sizes }
}

/// Keeps components with at least `min_voxels` voxels, or only the largest
/// component when `min_voxels` is `None`.
pub fn filter_components(mask: &BinaryMask, min_voxels: Option<usize>) -> BinaryMask {
    let comps = label_components(mask);
    let keep: Vec<bool> = match min_voxels {
        Some(min) => comps.sizes.iter().map(|&s| s >= min).collect(),
        None => {
            let largest = comps.largest();
            (1..=comps.count() as u32).map(|l| Some(l) == largest).collect()
        }
    };
    let mut out = mask.clone();
    for (v, &l) in out.data_mut().iter_mut().zip(&comps.labels) {
        *v = l != 0 && keep[l as usize - 1];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_voxels_are_separate() {
        let mut m = BinaryMask::filled([3, 3, 3], [1.0; 3], false).unwrap();
        m.set([0, 0, 0], true);
        m.set([1, 1, 0], true);
        m.set([1, 0, 0], true);
        m.set([2, 2, 2], true);
        let c = label_components(&m);
        assert_eq!(c.count(), 2);
        assert_eq!(c.sizes, vec![3, 1]);
        assert_eq!(c.largest(), Some(1));
    }

    #[test]
    fn largest_only_and_threshold() {
        let mut m = BinaryMask::filled([10, 10, 10], [1.0; 3], false).unwrap();
        for z in 0..4 {
            for y in 0..5 {
                for x in 0..5 {
                    m.set([x, y, z], true);
                }
            }
        }
        for x in 7..10 {
            m.set([x, 9, 9], true);
        }
        let only = filter_components(&m, None);
        assert_eq!(only.count(), 100);
        assert!(!only.get([8, 9, 9]));
        let both = filter_components(&m, Some(3));
        assert_eq!(both.count(), 103);
        let none = filter_components(&m, Some(101));
        assert_eq!(none.count(), 0);
    }
}
