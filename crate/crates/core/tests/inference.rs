use std::collections::VecDeque;

use atrium_core::inference::{
    binarize_and_filter, detect_roi, join_prior, sliding_window_predict, Binarize, RoiConfig, TilingConfig, WindowModel,
};
use atrium_core::net3d::{build_unet, UNetConfig};
use atrium_core::phantom::{generate_phantom, PhantomConfig};
use atrium_core::{BinaryMask, RoiBox, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    Volume::new(dims, [1.0; 3], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn hit_fraction(roi: &RoiBox, m: &BinaryMask) -> f64 {
    let inside = (0..m.len())
        .filter(|&i| m.data()[i] && roi.contains(m.coord(i)))
        .count();
    inside as f64 / m.count() as f64
}

struct Constant([usize; 3], f32);

impl WindowModel for Constant {
    fn window(&self) -> [usize; 3] {
        self.0
    }
    fn predict_window(&self, crop: &Volume) -> atrium_core::Result<(Volume, Volume)> {
        Ok((crop.map(|_| self.1), crop.map(|_| 0.5)))
    }
}

/// Echoes its input, so stitching must reassemble the volume.
struct Echo([usize; 3]);

impl WindowModel for Echo {
    fn window(&self) -> [usize; 3] {
        self.0
    }
    fn predict_window(&self, crop: &Volume) -> atrium_core::Result<(Volume, Volume)> {
        Ok((crop.clone(), crop.map(|v| -v)))
    }
}

#[test]
fn noiseless_phantom_box_holds_the_whole_mask() {
    for seed in 0..5 {
        let cfg = PhantomConfig {
            noise_sigma: 0.0,
            bias_amplitude: 0.0,
            fg_mean: 1.0,
            bg_mean: 0.0,
            seed,
            ..PhantomConfig::default()
        };
        let (v, m) = generate_phantom(&cfg).unwrap();
        let roi = detect_roi(&v, &RoiConfig::default()).unwrap();
        assert_eq!(hit_fraction(&roi, &m), 1.0);
        assert!(roi.voxel_count() < v.len());
    }
}

#[test]
fn uniform_volume_falls_back_to_whole_box() {
    let v = Volume::filled([10, 12, 9], [1.0; 3], 3.0).unwrap();
    assert_eq!(
        detect_roi(&v, &RoiConfig::default()).unwrap(),
        RoiBox::whole([10, 12, 9])
    );
}

#[test]
fn noisy_phantom_boxes_hold_the_foreground() {
    for seed in 0..20 {
        let (v, m) = generate_phantom(&PhantomConfig {
            seed: 500 + seed,
            ..PhantomConfig::default()
        })
        .unwrap();
        let roi = detect_roi(&v, &RoiConfig::default()).unwrap();
        assert!(hit_fraction(&roi, &m) >= 0.99, "seed {seed}");
    }
}

#[test]
fn single_window_equals_one_forward_pass() {
    let cfg = UNetConfig {
        levels: 2,
        base_channels: 2,
        in_channels: 1,
        crop: [8, 8, 8],
    };
    let net = build_unet(&cfg, 3).unwrap();
    let v = random_volume([8, 8, 8], 4);
    let tiling = TilingConfig {
        overlap: [0.0; 3],
        ..TilingConfig::default()
    };
    let s = sliding_window_predict(&net, &v, &tiling).unwrap();
    let f = net.forward(&v).unwrap();
    assert_eq!(s.prob, f.main_prob);
    assert_eq!(s.tm, f.tm);
}

#[test]
fn constant_model_stitches_to_a_constant() {
    for dims in [[8, 8, 8], [13, 9, 21], [5, 8, 3]] {
        let v = random_volume(dims, 1);
        let s = sliding_window_predict(&Constant([8, 8, 8], 0.37), &v, &TilingConfig::default()).unwrap();
        assert_eq!(s.prob.dims(), dims);
        assert!(s.prob.data().iter().all(|&p| p == 0.37));
        assert!(s.tm.data().iter().all(|&p| p == 0.5));
    }
}

#[test]
fn echo_model_reassembles_the_input() {
    for (dims, overlap) in [
        ([19, 8, 11], 0.5),
        ([16, 24, 8], 0.0),
        ([9, 10, 30], 0.75),
        ([6, 8, 8], 0.5),
    ] {
        let v = random_volume(dims, 2);
        let tiling = TilingConfig {
            overlap: [overlap; 3],
            ..TilingConfig::default()
        };
        let s = sliding_window_predict(&Echo([8, 8, 8]), &v, &tiling).unwrap();
        assert_eq!(s.prob, v, "{dims:?}");
        assert_eq!(s.tm, v.map(|x| -x));
    }
}

#[test]
fn invalid_overlap_is_rejected() {
    let v = random_volume([8, 8, 8], 2);
    let tiling = TilingConfig {
        overlap: [1.0, 0.5, 0.5],
        ..TilingConfig::default()
    };
    assert!(sliding_window_predict(&Echo([8, 8, 8]), &v, &tiling).is_err());
}

fn flood_fill_largest(gate: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [nx, ny, nz] = dims;
    let mut label = vec![0usize; gate.len()];
    let mut sizes = vec![0usize];
    for s in 0..gate.len() {
        if !gate[s] || label[s] != 0 {
            continue;
        }
        let l = sizes.len();
        sizes.push(0);
        label[s] = l;
        let mut q = VecDeque::from([s]);
        while let Some(i) = q.pop_front() {
            sizes[l] += 1;
            let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
            let mut nb = vec![];
            if x > 0 {
                nb.push(i - 1)
            }
            if x + 1 < nx {
                nb.push(i + 1)
            }
            if y > 0 {
                nb.push(i - nx)
            }
            if y + 1 < ny {
                nb.push(i + nx)
            }
            if z > 0 {
                nb.push(i - nx * ny)
            }
            if z + 1 < nz {
                nb.push(i + nx * ny)
            }
            for j in nb {
                if gate[j] && label[j] == 0 {
                    label[j] = l;
                    q.push_back(j);
                }
            }
        }
    }
    // first label reaching the maximum size wins ties, as in scan order
    let best = (1..sizes.len()).fold(0, |b, l| if b == 0 || sizes[l] > sizes[b] { l } else { b });
    label.iter().map(|&l| l != 0 && l == best).collect()
}

#[test]
fn binarize_hand_cases() {
    let p = Volume::filled([4, 4, 4], [1.0; 3], 0.9).unwrap();
    let t = Volume::filled([4, 4, 4], [1.0; 3], 0.5).unwrap();
    assert_eq!(
        binarize_and_filter(&p, &t, &TilingConfig::default()).unwrap().count(),
        64
    );

    let mut p = Volume::filled([10, 10, 10], [1.0; 3], 0.0).unwrap();
    for z in 0..4 {
        for y in 0..5 {
            for x in 0..5 {
                p.set([x, y, z], 1.0);
            }
        }
    }
    for x in 7..10 {
        p.set([x, 9, 9], 1.0);
    }
    let t = p.map(|_| 0.5);
    let m = binarize_and_filter(&p, &t, &TilingConfig::default()).unwrap();
    assert_eq!(m.count(), 100);
    let keep_all = TilingConfig {
        min_component_voxels: Some(1),
        ..TilingConfig::default()
    };
    assert_eq!(binarize_and_filter(&p, &t, &keep_all).unwrap().count(), 103);
}

#[test]
fn binarize_matches_voxel_loop_and_flood_fill() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for k in 0..50 {
        let p = Volume::from_fn([8, 8, 8], [1.0; 3], |_| rng.random()).unwrap();
        let t = Volume::from_fn([8, 8, 8], [1.0; 3], |_| rng.random()).unwrap();
        let gate: Vec<bool> = p.data().iter().zip(t.data()).map(|(a, b)| a > b).collect();
        let want = flood_fill_largest(&gate, [8, 8, 8]);
        let got = binarize_and_filter(&p, &t, &TilingConfig::default()).unwrap();
        assert_eq!(got.data(), &want[..], "case {k}");
        // every kept voxel passed the gate; nothing is added
        assert!(got.data().iter().zip(&gate).all(|(&g, &pass)| !g || pass));

        let scalar = TilingConfig {
            binarize: Binarize::Scalar,
            ..TilingConfig::default()
        };
        let gate: Vec<bool> = p.data().iter().map(|&a| a > 0.5).collect();
        let got = binarize_and_filter(&p, &t, &scalar).unwrap();
        assert_eq!(got.data(), &flood_fill_largest(&gate, [8, 8, 8])[..]);
    }
}

#[test]
fn summation_join_adds_elementwise() {
    let a = random_volume([3, 4, 5], 1);
    let b = random_volume([3, 4, 5], 2);
    let j = join_prior(&a, &b).unwrap();
    for i in 0..a.len() {
        assert_eq!(j.data()[i], a.data()[i] + b.data()[i]);
    }
    assert!(join_prior(&a, &random_volume([3, 4, 4], 2)).is_err());
}

#[test]
fn stitching_is_stable_across_overlaps() {
    use atrium_core::dataset::{generate_dataset, DatasetConfig, Split};
    use atrium_core::inference::prepare_input;
    use atrium_core::trainer::{prepare_cases, train, TrainConfig};

    let ds = generate_dataset(&DatasetConfig {
        phantom: PhantomConfig {
            dims: [32, 32, 32],
            ..PhantomConfig::default()
        },
        train_cases: 4,
        test_cases: 1,
        seed: 9,
    })
    .unwrap();
    let roi = RoiConfig::default();
    let cases = prepare_cases(&ds.split(Split::Train), &roi).unwrap();
    let small = UNetConfig {
        levels: 2,
        base_channels: 4,
        in_channels: 1,
        crop: [16, 16, 16],
    };
    let cfg = TrainConfig {
        iterations: 300,
        seed: 2,
        ..TrainConfig::default()
    };
    let (ck, _) = train(build_unet(&small, 4).unwrap(), &cases, &cfg, None).unwrap();
    let image = prepare_input(&ds.split(Split::Test)[0].image, &roi).unwrap().image;
    let at = |o: f64| {
        let t = TilingConfig {
            overlap: [o; 3],
            ..TilingConfig::default()
        };
        sliding_window_predict(&ck.network, &image, &t).unwrap().prob
    };
    let (a, b) = (at(0.5), at(0.25));
    let mad = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() as f64)
        .sum::<f64>()
        / a.len() as f64;
    eprintln!("overlap 0.5 vs 0.25 mean abs difference {mad:.5}");
    assert!(mad < 0.05, "{mad}");
}
