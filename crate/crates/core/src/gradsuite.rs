//! The finite-difference suite: every graph operator and every loss checked
//! in `f64` on small random inputs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheckOptions, GradCheckReport, Graph, Tensor, Var};
use crate::error::Result;
use crate::losses::{
    cel, composite_loss, dice_loss, focal_positive_loss, overlap_loss, FplMask, GateMode, LossWeights, Objective,
    OverlapReduction,
};
use crate::net3d::{OutputVars, SIDE_PATHS};

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values bounded away from zero so relu kinks are never straddled.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Distinct values on a 0.01 grid, so pooling maxima never tie.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.5).collect();
    data.shuffle(rng);
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn binary(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Tensor<f64> {
    Tensor::new(
        vec![n],
        (0..n).map(|_| (rng.random::<f64>() < p) as u8 as f64).collect(),
    )
    .expect("shape")
}

/// Reduces a tensor to a scalar with fixed random weights so every output
/// element carries a distinct adjoint.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let w = g.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let m = g.mul(y, w)?;
    Ok(g.sum(m))
}

type Case = (
    &'static str,
    Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>,
    Vec<Tensor<f64>>,
);

/// Runs the whole suite with the standard options (step 1e-4, tolerance
/// 1e-3). Inputs are drawn from `seed`.
pub fn run_gradient_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases: Vec<Case> = Vec::new();

    // structural operators
    cases.push((
        "conv3d k3 stride1",
        Box::new(|g, v| {
            let y = g.conv3d(v[0], v[1], Some(v[2]), 1)?;
            project(g, y, 1)
        }),
        vec![
            uniform(r, &[1, 2, 5, 4, 6], -1.0, 1.0),
            uniform(r, &[3, 2, 3, 3, 3], -0.5, 0.5),
            uniform(r, &[3], -0.5, 0.5),
        ],
    ));
    cases.push((
        "conv3d k3 stride2",
        Box::new(|g, v| {
            let y = g.conv3d(v[0], v[1], None, 2)?;
            project(g, y, 2)
        }),
        vec![
            uniform(r, &[1, 2, 6, 5, 4], -1.0, 1.0),
            uniform(r, &[2, 2, 3, 3, 3], -0.5, 0.5),
        ],
    ));
    cases.push((
        "conv3d k1",
        Box::new(|g, v| {
            let y = g.conv3d(v[0], v[1], Some(v[2]), 1)?;
            project(g, y, 3)
        }),
        vec![
            uniform(r, &[1, 3, 3, 4, 2], -1.0, 1.0),
            uniform(r, &[2, 3, 1, 1, 1], -0.5, 0.5),
            uniform(r, &[2], -0.5, 0.5),
        ],
    ));
    cases.push((
        "upsample2x",
        Box::new(|g, v| {
            let y = g.upsample2x(v[0])?;
            project(g, y, 4)
        }),
        vec![uniform(r, &[1, 2, 3, 2, 3], -1.0, 1.0)],
    ));
    cases.push((
        "max_pool2",
        Box::new(|g, v| {
            let y = g.max_pool2(v[0])?;
            project(g, y, 5)
        }),
        vec![distinct(r, &[1, 2, 4, 4, 6])],
    ));

    // elementwise and reductions
    let shape = [2, 3, 4];
    cases.push((
        "add",
        Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, 6)
        }),
        vec![uniform(r, &shape, -1.0, 1.0), uniform(r, &shape, -1.0, 1.0)],
    ));
    cases.push((
        "sub",
        Box::new(|g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y, 7)
        }),
        vec![uniform(r, &shape, -1.0, 1.0), uniform(r, &shape, -1.0, 1.0)],
    ));
    cases.push((
        "mul",
        Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, 8)
        }),
        vec![uniform(r, &shape, -1.0, 1.0), uniform(r, &shape, -1.0, 1.0)],
    ));
    cases.push((
        "mul broadcast scalar",
        Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, 9)
        }),
        vec![uniform(r, &shape, -1.0, 1.0), uniform(r, &[1], 0.5, 1.5)],
    ));
    cases.push((
        "div",
        Box::new(|g, v| {
            let y = g.div(v[0], v[1])?;
            project(g, y, 10)
        }),
        vec![uniform(r, &shape, -1.0, 1.0), uniform(r, &shape, 0.5, 2.0)],
    ));
    cases.push((
        "relu",
        Box::new(|g, v| {
            let y = g.relu(v[0]);
            project(g, y, 11)
        }),
        vec![off_zero(r, &shape)],
    ));
    cases.push((
        "sigmoid",
        Box::new(|g, v| {
            let y = g.sigmoid(v[0]);
            project(g, y, 12)
        }),
        vec![uniform(r, &shape, -4.0, 4.0)],
    ));
    cases.push((
        "log",
        Box::new(|g, v| {
            let y = g.log(v[0]);
            project(g, y, 13)
        }),
        vec![uniform(r, &shape, 0.2, 3.0)],
    ));
    cases.push((
        "scale",
        Box::new(|g, v| {
            let y = g.scale(v[0], -1.7);
            project(g, y, 14)
        }),
        vec![uniform(r, &shape, -1.0, 1.0)],
    ));
    cases.push((
        "add_scalar",
        Box::new(|g, v| {
            let y = g.add_scalar(v[0], 0.3);
            project(g, y, 15)
        }),
        vec![uniform(r, &shape, -1.0, 1.0)],
    ));
    cases.push((
        "sum",
        Box::new(|g, v| {
            let s = g.sum(v[0]);
            let q = g.mul(s, s)?;
            Ok(q)
        }),
        vec![uniform(r, &shape, -1.0, 1.0)],
    ));
    cases.push((
        "mean",
        Box::new(|g, v| {
            let s = g.mean(v[0]);
            let q = g.mul(s, s)?;
            Ok(q)
        }),
        vec![uniform(r, &shape, -1.0, 1.0)],
    ));
    {
        // the indicator carries no gradient; inputs stay 0.1 away from ties
        let a = uniform(r, &shape, -1.0, 1.0);
        let b_data: Vec<f64> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| if i % 2 == 0 { x + 0.3 } else { x - 0.3 })
            .collect();
        let b = Tensor::new(shape.to_vec(), b_data).expect("shape");
        cases.push((
            "gate",
            Box::new(|g, v| {
                let m = g.gate(v[0], v[1])?;
                let y = g.mul(m, v[2])?;
                project(g, y, 16)
            }),
            vec![a, b, uniform(r, &shape, -1.0, 1.0)],
        ));
    }

    // losses
    let n = 48;
    let y = binary(r, n, 0.35);
    let p = uniform(r, &[n], 0.05, 0.95);
    {
        let y = y.clone();
        cases.push((
            "cel",
            Box::new(move |g, v| {
                let t = g.constant(y.clone());
                cel(g, v[0], t, 1e-7)
            }),
            vec![p.clone()],
        ));
    }
    {
        let y = y.clone();
        cases.push((
            "dice_loss",
            Box::new(move |g, v| {
                let t = g.constant(y.clone());
                dice_loss(g, v[0], t, 1e-5)
            }),
            vec![p.clone()],
        ));
    }
    cases.push((
        "overlap_loss mean",
        Box::new(|g, v| overlap_loss(g, v[0], OverlapReduction::Mean)),
        vec![p.clone()],
    ));
    cases.push((
        "overlap_loss sum",
        Box::new(|g, v| overlap_loss(g, v[0], OverlapReduction::Sum)),
        vec![p.clone()],
    ));
    for (name, form) in [
        ("focal_positive_loss", FplMask::GatedProbability),
        ("focal_positive_loss logistic mask", FplMask::LogisticOfProbability),
    ] {
        let y = y.clone();
        cases.push((
            name,
            Box::new(move |g, v| {
                let t = g.constant(y.clone());
                focal_positive_loss(g, v[0], v[1], t, GateMode::Soft, 0.05, form, 1e-5)
            }),
            vec![uniform(r, &[n], -2.0, 2.0), uniform(r, &[n], 0.2, 0.8)],
        ));
    }
    for (name, objective) in [
        ("composite_loss", Objective::Composite),
        ("composite_loss cross-entropy", Objective::CrossEntropy),
    ] {
        let y = y.clone();
        let w = LossWeights {
            objective,
            beta: [0.3, 0.2, 0.1, 0.25, 0.15],
            lambda_l2: 0.01,
            ..LossWeights::default()
        };
        let mut inputs = vec![uniform(r, &[n], -2.0, 2.0), uniform(r, &[n], 0.2, 0.8)];
        inputs.extend((0..SIDE_PATHS).map(|_| uniform(r, &[n], 0.05, 0.95)));
        inputs.push(uniform(r, &[2, 3], -1.0, 1.0));
        cases.push((
            name,
            Box::new(move |g, v| {
                let prob = g.sigmoid(v[0]);
                let out = OutputVars {
                    logit: v[0],
                    prob,
                    tm: v[1],
                    sides: v[2..2 + SIDE_PATHS].to_vec(),
                };
                let t = g.constant(y.clone());
                Ok(composite_loss(g, &out, t, &v[2 + SIDE_PATHS..], &w, GateMode::Soft)?.total)
            }),
            inputs,
        ));
    }

    cases
        .into_iter()
        .map(|(name, build, inputs)| grad_check(name, build, &inputs, GradCheckOptions::default()))
        .collect()
}
