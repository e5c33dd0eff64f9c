//! Adam training on foreground-biased random crops, the per-iteration log,
//! and recursive refinement levels.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::dataset::Case;
use crate::error::{Error, Result};
use crate::inference::{join_prior, prepare_input, sliding_window_predict, RoiConfig, TilingConfig};
use crate::losses::{composite_loss, GateMode, LossBreakdown, LossWeights};
use crate::net3d::{volume_to_tensor, Checkpoint, NamedTensor, Network, OptimizerState};
use crate::phantom::{augment_with, AugmentConfig};
use crate::volcore::{write_atomic, BinaryMask, RoiBox, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrMultiplier {
    /// Regular expression searched in parameter names.
    pub pattern: String,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// First matching rule sets a parameter's learning-rate factor;
    /// unmatched parameters use 1.
    pub lr_multipliers: Vec<LrMultiplier>,
    pub seed: u64,
    /// Save every this many steps when a checkpoint path is given (0: only
    /// at the end).
    pub checkpoint_every: usize,
    /// Fraction of crops forced to contain a foreground voxel.
    pub positive_crop_fraction: f64,
    pub loss: LossWeights,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_multipliers: Vec::new(),
            seed: 0,
            checkpoint_every: 0,
            positive_crop_fraction: 0.5,
            loss: LossWeights::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("train.iterations", "must be positive"));
        }
        // lr = 0 is accepted as a frozen run
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.beta1/beta2", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("train.eps", "must be positive"));
        }
        if !(0.5..=1.0).contains(&self.positive_crop_fraction) {
            return Err(Error::config("train.positive_crop_fraction", "must lie in [0.5, 1]"));
        }
        for m in &self.lr_multipliers {
            if !(m.factor > 0.0 && m.factor.is_finite()) {
                return Err(Error::config(
                    "train.lr_multipliers",
                    format!("factor for `{}` must be positive", m.pattern),
                ));
            }
            Regex::new(&m.pattern).map_err(|e| Error::config("train.lr_multipliers", e.to_string()))?;
        }
        self.loss.validate()?;
        self.augment.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Join {
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RrsConfig {
    pub levels: usize,
    /// Fine-tuning iterations per level.
    pub iterations: usize,
    /// Learning rate of a refinement level relative to the base rate.
    pub lr_factor: f64,
    pub join: Join,
}

impl Default for RrsConfig {
    fn default() -> Self {
        Self {
            levels: 2,
            iterations: 500,
            lr_factor: 0.1,
            join: Join::Sum,
        }
    }
}

impl RrsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_factor > 0.0 && self.lr_factor.is_finite()) {
            return Err(Error::config("rrs.lr_factor", "must be positive"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Adam

/// Adam with bias correction and a per-parameter learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    lrs: Vec<f64>,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    /// Resolves each parameter's rate as `lr × factor` of the first rule
    /// whose pattern matches its name.
    pub fn new(cfg: &TrainConfig, lr: f64, names: &[&str]) -> Result<Self> {
        let rules = cfg
            .lr_multipliers
            .iter()
            .map(|m| {
                Regex::new(&m.pattern)
                    .map(|r| (r, m.factor))
                    .map_err(|e| Error::config("train.lr_multipliers", e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let lrs = names
            .iter()
            .map(|n| lr * rules.iter().find(|(r, _)| r.is_match(n)).map_or(1.0, |(_, f)| *f))
            .collect();
        Ok(Self {
            lrs,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        })
    }

    pub fn lrs(&self) -> &[f64] {
        &self.lrs
    }

    /// One update at 1-based `step`. A non-finite gradient aborts before
    /// anything is modified.
    pub fn step(
        &self,
        params: &mut [NamedTensor],
        grads: &[Vec<f32>],
        state: &mut OptimizerState,
        step: u64,
    ) -> Result<()> {
        if step == 0 {
            return Err(Error::Contract("adam steps are 1-based".into()));
        }
        if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
            return Err(Error::Contract("parameter, gradient and moment counts differ".into()));
        }
        for (p, g) in params.iter().zip(grads) {
            if g.len() != p.tensor.numel() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: vec![g.len()],
                    rhs: vec![p.tensor.numel()],
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        let c1 = 1.0 - self.beta1.powf(step as f64);
        let c2 = 1.0 - self.beta2.powf(step as f64);
        for (k, p) in params.iter_mut().enumerate() {
            let lr = self.lrs[k];
            let (m, v) = (&mut state.m[k], &mut state.v[k]);
            for (i, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grads[k][i] as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Cases and crops

/// Normalized ROI crop of a labeled case, ready for training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingCase {
    pub id: String,
    pub image: Volume,
    pub mask: BinaryMask,
    pub roi: RoiBox,
}

/// Localizes, crops and normalizes each case exactly as inference does.
pub fn prepare_cases(cases: &[Case], roi: &RoiConfig) -> Result<Vec<TrainingCase>> {
    cases
        .iter()
        .map(|c| {
            let prep = prepare_input(&c.image, roi)?;
            Ok(TrainingCase {
                id: c.id.clone(),
                mask: c.mask.extract(&prep.roi)?,
                image: prep.image,
                roi: prep.roi,
            })
        })
        .collect()
}

/// Draws (optionally foreground-centered) crops from mirror-padded cases.
pub struct CropSampler {
    crop: [usize; 3],
    inputs: Vec<Volume>,
    masks: Vec<BinaryMask>,
    foreground: Vec<Vec<usize>>,
    positive_fraction: f64,
}

impl CropSampler {
    /// `priors`, when given, are summed into the images first.
    pub fn new(
        cases: &[TrainingCase],
        priors: Option<&[Volume]>,
        crop: [usize; 3],
        positive_fraction: f64,
    ) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::InvalidInput("no training cases".into()));
        }
        if let Some(p) = priors {
            if p.len() != cases.len() {
                return Err(Error::Contract(format!("{} priors for {} cases", p.len(), cases.len())));
            }
        }
        let mut inputs = Vec::with_capacity(cases.len());
        let mut masks = Vec::with_capacity(cases.len());
        let mut foreground = Vec::with_capacity(cases.len());
        for (i, c) in cases.iter().enumerate() {
            let x = match priors {
                Some(p) => join_prior(&c.image, &p[i])?,
                None => c.image.clone(),
            };
            let d = x.dims();
            let mut lo = [0; 3];
            let mut hi = [0; 3];
            for a in 0..3 {
                let short = crop[a].saturating_sub(d[a]);
                lo[a] = short / 2;
                hi[a] = short - lo[a];
            }
            let x = x.pad_reflect(lo, hi);
            let m = c.mask.pad_reflect(lo, hi);
            foreground.push(
                m.data()
                    .iter()
                    .enumerate()
                    .filter(|(_, &b)| b)
                    .map(|(i, _)| i)
                    .collect(),
            );
            inputs.push(x);
            masks.push(m);
        }
        Ok(Self {
            crop,
            inputs,
            masks,
            foreground,
            positive_fraction,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<(usize, Volume, BinaryMask)> {
        let ci = rng.random_range(0..self.inputs.len());
        let x = &self.inputs[ci];
        let d = x.dims();
        let positive = rng.random::<f64>() < self.positive_fraction && !self.foreground[ci].is_empty();
        let mut lo = [0usize; 3];
        if positive {
            let fg = self.foreground[ci][rng.random_range(0..self.foreground[ci].len())];
            let p = x.coord(fg);
            for a in 0..3 {
                // origins whose window still holds p
                let min = (p[a] + 1).saturating_sub(self.crop[a]);
                let max = p[a].min(d[a] - self.crop[a]);
                lo[a] = rng.random_range(min..=max);
            }
        } else {
            for a in 0..3 {
                lo[a] = rng.random_range(0..=d[a] - self.crop[a]);
            }
        }
        let roi = RoiBox::new(lo, [lo[0] + self.crop[0], lo[1] + self.crop[1], lo[2] + self.crop[2]])?;
        Ok((ci, x.extract(&roi)?, self.masks[ci].extract(&roi)?))
    }
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub level: usize,
    pub step: u64,
    pub lr: f64,
    pub case: usize,
    pub breakdown: LossBreakdown,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = format!("level,step,lr,case,{}\n", LossBreakdown::csv_header());
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.level,
                r.step,
                r.lr,
                r.case,
                r.breakdown.csv_fields()
            );
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn totals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.breakdown.total).collect()
    }

    /// Mean total loss over the first and the last `window` rows.
    pub fn start_end_means(&self, window: usize) -> Option<(f64, f64)> {
        let t = self.totals();
        if t.len() < window || window == 0 {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&t[..window]), mean(&t[t.len() - window..])))
    }
}

/// Generator for one optimizer step: a pure function of seed, level and
/// step, which makes interrupted and resumed runs identical.
pub fn step_rng(seed: u64, level: usize, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((level as u64) << 48) ^ step);
    rng
}

/// Gradient of the composite loss on one crop, plus its breakdown.
pub fn loss_and_grads(
    net: &Network,
    x: &Volume,
    y: &BinaryMask,
    w: &LossWeights,
) -> Result<(LossBreakdown, Vec<Vec<f32>>)> {
    let mut g = Graph::<f32>::new();
    let params = net.bind(&mut g, true);
    let input = g.constant(volume_to_tensor(x));
    let out = net.forward_graph(&mut g, &params, input)?;
    let yv = g.constant(volume_to_tensor(&y.to_volume()));
    let loss = composite_loss(&mut g, &out, yv, &params, w, GateMode::Soft)?;
    g.backward(loss.total)?;
    let grads = params
        .iter()
        .zip(net.params())
        .map(|(&v, p)| g.take_grad(v).unwrap_or_else(|| vec![0.0; p.tensor.numel()]))
        .collect();
    Ok((loss.breakdown, grads))
}

/// Continues training `ck` for `iterations` steps at rate `lr`. With a
/// checkpoint path, saves every `checkpoint_every` steps and at the end.
pub fn train_iterations(
    ck: &mut Checkpoint,
    cases: &[TrainingCase],
    priors: Option<&[Volume]>,
    cfg: &TrainConfig,
    lr: f64,
    iterations: usize,
    checkpoint: Option<&Path>,
) -> Result<TrainLog> {
    cfg.validate()?;
    let crop = ck.network.config().crop;
    let sampler = CropSampler::new(cases, priors, crop, cfg.positive_crop_fraction)?;
    let names: Vec<&str> = ck.network.params().iter().map(|p| p.name.as_str()).collect();
    let adam = Adam::new(cfg, lr, &names)?;
    ck.train_config = serde_json::to_value(cfg)?;
    let mut log = TrainLog::default();
    for _ in 0..iterations {
        let step = ck.step + 1;
        let mut rng = step_rng(cfg.seed, ck.level, step);
        let (ci, x, y) = sampler.sample(&mut rng)?;
        let (x, y) = augment_with(&x, &y, &cfg.augment, &mut rng)?;
        let (breakdown, grads) = loss_and_grads(&ck.network, &x, &y, &cfg.loss)?;
        adam.step(ck.network.params_mut(), &grads, &mut ck.optimizer, step)?;
        ck.step = step;
        log.rows.push(LogRow {
            level: ck.level,
            step,
            lr,
            case: ci,
            breakdown,
        });
        if let Some(path) = checkpoint {
            if cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every as u64) {
                ck.save(path)?;
            }
        }
    }
    if let Some(path) = checkpoint {
        ck.save(path)?;
    }
    Ok(log)
}

/// Level-0 training from a fresh network for `cfg.iterations` steps.
pub fn train(
    network: Network,
    cases: &[TrainingCase],
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<(Checkpoint, TrainLog)> {
    let mut ck = Checkpoint::fresh(network);
    let log = train_iterations(&mut ck, cases, None, cfg, cfg.lr, cfg.iterations, checkpoint)?;
    Ok((ck, log))
}

// ---------------------------------------------------------------------------
// Recursive refinement

/// Whole-case probability maps of `net`, whose input is each image joined
/// with `priors` (level 0 when `None`). Stored cases are not modified.
pub fn level_priors(
    net: &Network,
    cases: &[TrainingCase],
    priors: Option<&[Volume]>,
    tiling: &TilingConfig,
) -> Result<Vec<Volume>> {
    cases
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let x = match priors {
                Some(p) => join_prior(&c.image, &p[i])?,
                None => c.image.clone(),
            };
            Ok(sliding_window_predict(net, &x, tiling)?.prob)
        })
        .collect()
}

/// Fine-tunes a copy of `prev` as refinement level `level`, training on
/// images joined with `priors` (the previous level's probability maps).
/// The optimizer restarts from zero moments at `lr × rrs.lr_factor`.
pub fn rrs_level(
    prev: &Checkpoint,
    level: usize,
    cases: &[TrainingCase],
    priors: &[Volume],
    rrs: &RrsConfig,
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<(Checkpoint, TrainLog)> {
    rrs.validate()?;
    if level == 0 || prev.level + 1 != level {
        return Err(Error::Contract(format!(
            "refinement level {level} cannot follow a level-{} checkpoint",
            prev.level
        )));
    }
    if priors.len() != cases.len() {
        return Err(Error::Contract(format!(
            "{} priors for {} cases",
            priors.len(),
            cases.len()
        )));
    }
    let mut ck = Checkpoint::fresh(prev.network.clone());
    ck.level = level;
    ck.train_config = prev.train_config.clone();
    let log = if rrs.iterations > 0 {
        train_iterations(
            &mut ck,
            cases,
            Some(priors),
            cfg,
            cfg.lr * rrs.lr_factor,
            rrs.iterations,
            checkpoint,
        )?
    } else {
        if let Some(path) = checkpoint {
            ck.save(path)?;
        }
        TrainLog::default()
    };
    Ok((ck, log))
}

/// Trains `rrs.levels` refinement levels on top of a level-0 checkpoint.
/// Returns the checkpoints of levels 1..=K with their logs.
pub fn refine(
    level0: &Checkpoint,
    cases: &[TrainingCase],
    rrs: &RrsConfig,
    cfg: &TrainConfig,
    tiling: &TilingConfig,
) -> Result<Vec<(Checkpoint, TrainLog)>> {
    let mut out: Vec<(Checkpoint, TrainLog)> = Vec::new();
    let mut priors: Option<Vec<Volume>> = None;
    for level in 1..=rrs.levels {
        let prev = out.last().map_or(level0, |(ck, _)| ck);
        let p = level_priors(&prev.network, cases, priors.as_deref(), tiling)?;
        let next = rrs_level(prev, level, cases, &p, rrs, cfg, None)?;
        priors = Some(p);
        out.push(next);
    }
    Ok(out)
}
