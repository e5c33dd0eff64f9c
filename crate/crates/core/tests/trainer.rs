use atrium_core::autodiff::Tensor;
use atrium_core::dataset::{generate_dataset, DatasetConfig, Split};
use atrium_core::inference::{RoiConfig, TilingConfig};
use atrium_core::net3d::{build_unet, Checkpoint, NamedTensor, OptimizerState, UNetConfig};
use atrium_core::phantom::{AugmentConfig, PhantomConfig};
use atrium_core::trainer::{
    level_priors, prepare_cases, rrs_level, step_rng, train, train_iterations, Adam, CropSampler, LrMultiplier,
    RrsConfig, TrainConfig, TrainingCase,
};
use atrium_core::Volume;

fn small_net() -> UNetConfig {
    UNetConfig {
        levels: 2,
        base_channels: 4,
        in_channels: 1,
        crop: [16, 16, 16],
    }
}

fn small_cases(n: usize) -> Vec<TrainingCase> {
    let ds = generate_dataset(&DatasetConfig {
        phantom: PhantomConfig {
            dims: [32, 32, 32],
            ..PhantomConfig::default()
        },
        train_cases: n,
        test_cases: 0,
        seed: 5,
    })
    .unwrap();
    prepare_cases(&ds.split(Split::Train), &RoiConfig::default()).unwrap()
}

fn quick(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn twin_params() -> Vec<NamedTensor> {
    ["enc0.conv1.weight", "head.logit.weight"]
        .iter()
        .map(|n| NamedTensor {
            name: n.to_string(),
            tensor: Tensor::new(vec![1], vec![0.5f32]).unwrap(),
        })
        .collect()
}

fn zero_state(n: usize) -> OptimizerState {
    OptimizerState {
        m: vec![vec![0.0]; n],
        v: vec![vec![0.0]; n],
    }
}

#[test]
fn adam_zero_gradient() {
    let cfg = TrainConfig::default();
    let adam = Adam::new(&cfg, cfg.lr, &["a", "b"]).unwrap();
    let mut p = twin_params();
    let mut st = zero_state(2);
    adam.step(&mut p, &[vec![0.0], vec![0.0]], &mut st, 1).unwrap();
    assert!(p.iter().all(|t| t.tensor.data()[0] == 0.5));

    // with history, a zero gradient only decays the moments
    let mut st = OptimizerState {
        m: vec![vec![0.2]; 2],
        v: vec![vec![0.04]; 2],
    };
    adam.step(&mut p, &[vec![0.0], vec![0.0]], &mut st, 3).unwrap();
    assert!((st.m[0][0] - 0.2 * 0.9).abs() < 1e-7);
    assert!((st.v[0][0] - 0.04 * 0.999).abs() < 1e-8);
}

#[test]
fn adam_first_step_moves_by_the_learning_rate() {
    let cfg = TrainConfig::default();
    let adam = Adam::new(&cfg, 1e-3, &["w"]).unwrap();
    let mut p = vec![NamedTensor {
        name: "w".into(),
        tensor: Tensor::new(vec![1], vec![0.5f32]).unwrap(),
    }];
    let mut st = zero_state(1);
    adam.step(&mut p, &[vec![1.0]], &mut st, 1).unwrap();
    // m̂ = v̂ = 1, so the step is lr / (1 + eps)
    let moved = 0.5 - p[0].tensor.data()[0] as f64;
    assert!((moved - 1e-3).abs() < 1e-7, "{moved}");
}

#[test]
fn adam_matches_reference_over_several_steps() {
    let cfg = TrainConfig::default();
    let adam = Adam::new(&cfg, 1e-2, &["w"]).unwrap();
    let grads = [0.3, -1.2, 0.05, 2.0, -0.7, 0.0, 0.9];
    let mut p = vec![NamedTensor {
        name: "w".into(),
        tensor: Tensor::new(vec![1], vec![1.0f32]).unwrap(),
    }];
    let mut st = zero_state(1);
    let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for (t, &g) in grads.iter().enumerate() {
        let t = t as i32 + 1;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        w -= 1e-2 * mh / (vh.sqrt() + 1e-8);
        adam.step(&mut p, &[vec![g as f32]], &mut st, t as u64).unwrap();
        assert!((p[0].tensor.data()[0] as f64 - w).abs() < 1e-6, "step {t}");
    }
}

#[test]
fn group_multiplier_scales_the_update() {
    let cfg = TrainConfig {
        lr_multipliers: vec![LrMultiplier {
            pattern: r"^enc0\.".into(),
            factor: 0.01,
        }],
        ..TrainConfig::default()
    };
    let names = ["enc0.conv1.weight", "head.logit.weight"];
    let adam = Adam::new(&cfg, 1e-3, &names).unwrap();
    assert_eq!(adam.lrs(), &[1e-5, 1e-3]);
    let mut p = twin_params();
    let mut st = zero_state(2);
    adam.step(&mut p, &[vec![0.7], vec![0.7]], &mut st, 1).unwrap();
    let d0 = 0.5 - p[0].tensor.data()[0] as f64;
    let d1 = 0.5 - p[1].tensor.data()[0] as f64;
    // first Adam step moves by ~lr; tolerance is one f32 ulp at 0.5
    assert!((d0 - 1e-5).abs() < 6e-8, "{d0}");
    assert!((d1 - 1e-3).abs() < 6e-8, "{d1}");
}

#[test]
fn non_finite_gradient_names_the_parameter() {
    let cfg = TrainConfig::default();
    let adam = Adam::new(&cfg, 1e-3, &["a", "b"]).unwrap();
    let mut p = twin_params();
    let before = p.clone();
    let mut st = zero_state(2);
    let err = adam.step(&mut p, &[vec![0.1], vec![f32::NAN]], &mut st, 1).unwrap_err();
    match err {
        atrium_core::Error::NonFiniteGradient(name) => assert_eq!(name, "head.logit.weight"),
        e => panic!("unexpected {e}"),
    }
    assert_eq!(p, before);
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = TrainConfig {
        lr_multipliers: vec![LrMultiplier {
            pattern: "enc".into(),
            factor: 0.0,
        }],
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = TrainConfig {
        lr_multipliers: vec![LrMultiplier {
            pattern: "(".into(),
            factor: 1.0,
        }],
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
    assert!(TrainConfig {
        iterations: 0,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        lr: -1.0,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let cases = small_cases(2);
    let net = build_unet(&small_net(), 1).unwrap();
    let cfg = TrainConfig { lr: 0.0, ..quick(1) };
    let (ck, log) = train(net.clone(), &cases, &cfg, None).unwrap();
    assert_eq!(ck.network, net);
    assert_eq!(ck.step, 1);
    assert_eq!(log.rows.len(), 1);
}

#[test]
fn fixed_seed_training_is_bit_identical() {
    let cases = small_cases(3);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let net = build_unet(&small_net(), 2).unwrap();
        let path = dir.path().join("ck.json");
        let (_, log) = train(net, &cases, &quick(50), Some(&path)).unwrap();
        (
            std::fs::read(&path).unwrap(),
            std::fs::read(dir.path().join("ck.json.bin")).unwrap(),
            log,
        )
    };
    let (m1, b1, l1) = run();
    let (m2, b2, l2) = run();
    assert_eq!(b1, b2);
    assert_eq!(m1, m2);
    assert_eq!(l1, l2);
}

#[test]
fn resumed_training_equals_one_long_run() {
    let cases = small_cases(3);
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(30);
    let (long, _) = train(build_unet(&small_net(), 4).unwrap(), &cases, &cfg, None).unwrap();

    let path = dir.path().join("half.json");
    let mut ck = Checkpoint::fresh(build_unet(&small_net(), 4).unwrap());
    train_iterations(&mut ck, &cases, None, &cfg, cfg.lr, 12, Some(&path)).unwrap();
    let mut resumed = Checkpoint::load(&path).unwrap();
    assert_eq!(resumed.step, 12);
    train_iterations(&mut resumed, &cases, None, &cfg, cfg.lr, 18, None).unwrap();
    assert_eq!(resumed, long);
}

#[test]
fn checkpoint_cadence_saves_progress() {
    let cases = small_cases(2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    let cfg = TrainConfig {
        checkpoint_every: 2,
        ..quick(3)
    };
    let (ck, log) = train(build_unet(&small_net(), 1).unwrap(), &cases, &cfg, Some(&path)).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    let csv = log.to_csv();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("level,step,lr,case,total,cel,dcl_main"));
}

#[test]
fn at_least_half_of_the_crops_hold_foreground() {
    let cases = small_cases(4);
    let sampler = CropSampler::new(&cases, None, [16, 16, 16], 0.5).unwrap();
    let mut positive = 0;
    for step in 1..=1000 {
        let mut rng = step_rng(9, 0, step);
        let (_, x, y) = sampler.sample(&mut rng).unwrap();
        assert_eq!(x.dims(), [16, 16, 16]);
        positive += (y.count() > 0) as usize;
    }
    assert!(positive >= 500, "{positive}");
}

#[test]
fn short_training_reduces_the_loss() {
    let cases = small_cases(4);
    let cfg = TrainConfig {
        augment: AugmentConfig::identity(),
        ..quick(200)
    };
    let (_, log) = train(build_unet(&small_net(), 6).unwrap(), &cases, &cfg, None).unwrap();
    let (start, end) = log.start_end_means(50).unwrap();
    assert!(end < start, "{start} -> {end}");
}

#[test]
fn zero_iteration_level_with_null_prior_is_an_identity() {
    let cases = small_cases(2);
    let (ck0, _) = train(build_unet(&small_net(), 7).unwrap(), &cases, &quick(5), None).unwrap();
    let zeros: Vec<Volume> = cases.iter().map(|c| c.image.map(|_| 0.0)).collect();
    let rrs = RrsConfig {
        iterations: 0,
        ..RrsConfig::default()
    };
    let (ck1, log) = rrs_level(&ck0, 1, &cases, &zeros, &rrs, &quick(5), None).unwrap();
    assert!(log.rows.is_empty());
    assert_eq!(ck1.level, 1);
    let tiling = TilingConfig::default();
    let p0 = level_priors(&ck0.network, &cases, None, &tiling).unwrap();
    let p1 = level_priors(&ck1.network, &cases, Some(&zeros), &tiling).unwrap();
    for (a, b) in p0.iter().zip(&p1) {
        let bits = |v: &Volume| v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn refinement_levels_must_follow_in_order() {
    let cases = small_cases(2);
    let ck0 = Checkpoint::fresh(build_unet(&small_net(), 1).unwrap());
    let zeros: Vec<Volume> = cases.iter().map(|c| c.image.map(|_| 0.0)).collect();
    let r = rrs_level(&ck0, 2, &cases, &zeros, &RrsConfig::default(), &quick(1), None);
    assert!(matches!(r, Err(atrium_core::Error::Contract(_))));
    let r = rrs_level(&ck0, 1, &cases, &zeros[..1], &RrsConfig::default(), &quick(1), None);
    assert!(matches!(r, Err(atrium_core::Error::Contract(_))));
}

#[test]
fn refinement_training_leaves_cases_untouched() {
    let cases = small_cases(2);
    let before = cases.clone();
    let (ck0, _) = train(build_unet(&small_net(), 7).unwrap(), &cases, &quick(3), None).unwrap();
    let priors = level_priors(&ck0.network, &cases, None, &TilingConfig::default()).unwrap();
    let rrs = RrsConfig {
        iterations: 3,
        ..RrsConfig::default()
    };
    let (ck1, log) = rrs_level(&ck0, 1, &cases, &priors, &rrs, &quick(3), None).unwrap();
    assert_eq!(cases, before);
    assert_eq!(ck1.step, 3);
    assert!(log.rows.iter().all(|r| r.level == 1 && (r.lr - 1e-4).abs() < 1e-15));
    assert_ne!(ck1.network, ck0.network);
}
