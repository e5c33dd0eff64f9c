//! Fixtures shared by the benchmarks.

use atrium_core::phantom::{generate_phantom, PhantomConfig};
use atrium_core::{BinaryMask, Volume};

/// A default-sized phantom and its mask.
pub fn phantom(seed: u64) -> (Volume, BinaryMask) {
    generate_phantom(&PhantomConfig {
        seed,
        ..PhantomConfig::default()
    })
    .expect("default phantom config is valid")
}

/// The mask shifted one voxel along x, a stand-in for a close prediction.
pub fn shifted(mask: &BinaryMask) -> BinaryMask {
    let [nx, ..] = mask.dims();
    BinaryMask::from_fn(mask.dims(), mask.spacing(), |[x, y, z]| {
        x + 1 < nx && mask.get([x + 1, y, z])
    })
    .expect("same geometry")
}
