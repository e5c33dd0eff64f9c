//! Segmentation losses built on the autodiff graph: cross entropy, soft
//! Dice, the overlap penalty, the threshold-gated focal positive loss and
//! the deeply supervised composite objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::net3d::{OutputVars, SIDE_PATHS};

/// Which body the main and side terms use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Dice + overlap + focal positive.
    Composite,
    /// Cross-entropy baseline; side weights are ignored.
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapReduction {
    Mean,
    Sum,
}

/// How the gated mask is formed from the foreground probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FplMask {
    /// `mask = p * gate`: the gated probability itself.
    GatedProbability,
    /// `mask = sigmoid(p) * gate`: logistic applied to the probability.
    LogisticOfProbability,
}

/// Soft gate during training, hard comparison during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    Soft,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub beta: [f64; SIDE_PATHS],
    pub lambda_l2: f64,
    pub gamma_ovl: f64,
    pub delta_fpl: f64,
    pub tau_gate: f64,
    pub objective: Objective,
    pub dice_eps: f64,
    pub cel_eps: f64,
    pub overlap_reduction: OverlapReduction,
    pub fpl_mask: FplMask,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: [0.2; SIDE_PATHS],
            lambda_l2: 1e-4,
            gamma_ovl: 0.5,
            delta_fpl: 0.5,
            tau_gate: 0.05,
            objective: Objective::Composite,
            dice_eps: 1e-5,
            cel_eps: 1e-7,
            overlap_reduction: OverlapReduction::Mean,
            fpl_mask: FplMask::GatedProbability,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("loss.lambda_l2", self.lambda_l2),
            ("loss.gamma_ovl", self.gamma_ovl),
            ("loss.delta_fpl", self.delta_fpl),
            ("loss.dice_eps", self.dice_eps),
            ("loss.cel_eps", self.cel_eps),
        ];
        for (k, v) in named {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(k, format!("must be finite and >= 0, got {v}")));
            }
        }
        if let Some(b) = self.beta.iter().find(|b| !(**b >= 0.0 && b.is_finite())) {
            return Err(Error::config("loss.beta", format!("weights must be >= 0, got {b}")));
        }
        if !(self.tau_gate > 0.0 && self.tau_gate.is_finite()) {
            return Err(Error::config("loss.tau_gate", "must be > 0"));
        }
        Ok(())
    }
}

fn ensure_same<T: Scalar>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape {
            op,
            lhs: g.shape(a).to_vec(),
            rhs: g.shape(b).to_vec(),
        });
    }
    Ok(())
}

fn ensure_unit_interval<T: Scalar>(g: &Graph<T>, op: &'static str, v: Var, open: bool) -> Result<()> {
    let bad = g.value(v).data().iter().find(|&&x| {
        let x = x.to_f64();
        if open {
            !(x > 0.0 && x < 1.0)
        } else {
            !(0.0..=1.0).contains(&x)
        }
    });
    match bad {
        Some(x) => Err(Error::Domain {
            op,
            reason: format!("value {:?} outside {}", x, if open { "(0, 1)" } else { "[0, 1]" }),
        }),
        None => Ok(()),
    }
}

fn one_minus<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    let n = g.scale(x, -1.0);
    g.add_scalar(n, 1.0)
}

/// `mean(-[y log(p + eps) + (1 - y) log(1 - p + eps)])`.
pub fn cel<T: Scalar>(g: &mut Graph<T>, p: Var, y: Var, eps: f64) -> Result<Var> {
    ensure_same(g, "cel", p, y)?;
    ensure_unit_interval(g, "cel", p, false)?;
    let pe = g.add_scalar(p, eps);
    let lp = g.log(pe);
    let q = one_minus(g, p);
    let qe = g.add_scalar(q, eps);
    let lq = g.log(qe);
    let ny = one_minus(g, y);
    let a = g.mul(y, lp)?;
    let b = g.mul(ny, lq)?;
    let s = g.add(a, b)?;
    let m = g.mean(s);
    Ok(g.scale(m, -1.0))
}

/// `1 - (2 sum(m y) + eps) / (sum(m) + sum(y) + eps)`.
fn dice_form<T: Scalar>(g: &mut Graph<T>, m: Var, y: Var, eps: f64) -> Result<Var> {
    let my = g.mul(m, y)?;
    let inter = g.sum(my);
    let sm = g.sum(m);
    let sy = g.sum(y);
    let num0 = g.scale(inter, 2.0);
    let num = g.add_scalar(num0, eps);
    let den0 = g.add(sm, sy)?;
    let den = g.add_scalar(den0, eps);
    let ratio = g.div(num, den)?;
    Ok(one_minus(g, ratio))
}

pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, p: Var, y: Var, eps: f64) -> Result<Var> {
    ensure_same(g, "dice_loss", p, y)?;
    ensure_unit_interval(g, "dice_loss", p, false)?;
    dice_form(g, p, y, eps)
}

/// `reduce(p * (1 - p))`: the product of foreground and background
/// probabilities of a single-channel map.
pub fn overlap_loss<T: Scalar>(g: &mut Graph<T>, p: Var, reduction: OverlapReduction) -> Result<Var> {
    ensure_unit_interval(g, "overlap_loss", p, false)?;
    let q = one_minus(g, p);
    let pq = g.mul(p, q)?;
    Ok(match reduction {
        OverlapReduction::Mean => g.mean(pq),
        OverlapReduction::Sum => g.sum(pq),
    })
}

/// Gated mask of the focal positive loss.
pub fn fpl_mask<T: Scalar>(
    g: &mut Graph<T>,
    logit: Var,
    tm: Var,
    mode: GateMode,
    tau: f64,
    form: FplMask,
) -> Result<Var> {
    ensure_same(g, "focal_positive_loss", logit, tm)?;
    ensure_unit_interval(g, "focal_positive_loss", tm, true)?;
    let p = g.sigmoid(logit);
    let gate = match mode {
        GateMode::Soft => {
            let d = g.sub(p, tm)?;
            let s = g.scale(d, 1.0 / tau);
            g.sigmoid(s)
        }
        GateMode::Hard => g.gate(p, tm)?,
    };
    let base = match form {
        FplMask::GatedProbability => p,
        FplMask::LogisticOfProbability => g.sigmoid(p),
    };
    g.mul(base, gate)
}

#[allow(clippy::too_many_arguments)]
pub fn focal_positive_loss<T: Scalar>(
    g: &mut Graph<T>,
    logit: Var,
    tm: Var,
    y: Var,
    mode: GateMode,
    tau: f64,
    form: FplMask,
    eps: f64,
) -> Result<Var> {
    ensure_same(g, "focal_positive_loss", logit, y)?;
    let m = fpl_mask(g, logit, tm, mode, tau, form)?;
    dice_form(g, m, y, eps)
}

/// Scalar components of one composite loss evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cel: f64,
    pub dcl_main: f64,
    pub ovl_main: f64,
    pub fpl: f64,
    pub side_dcl: [f64; SIDE_PATHS],
    pub side_ovl: [f64; SIDE_PATHS],
    pub l2: f64,
}

impl LossBreakdown {
    /// Weighted sum of the components, recomputed in `f64`.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        let mut total = match w.objective {
            Objective::CrossEntropy => self.cel,
            Objective::Composite => {
                let mut t = self.dcl_main + w.gamma_ovl * self.ovl_main + w.delta_fpl * self.fpl;
                for s in 0..SIDE_PATHS {
                    t += w.beta[s] * (self.side_dcl[s] + w.gamma_ovl * self.side_ovl[s]);
                }
                t
            }
        };
        total += w.lambda_l2 * self.l2;
        total
    }

    pub fn csv_header() -> String {
        let mut cols = vec![
            "total".to_string(),
            "cel".into(),
            "dcl_main".into(),
            "ovl_main".into(),
            "fpl".into(),
        ];
        for s in 0..SIDE_PATHS {
            cols.push(format!("side{s}_dcl"));
            cols.push(format!("side{s}_ovl"));
        }
        cols.push("l2".into());
        cols.join(",")
    }

    pub fn csv_fields(&self) -> String {
        let mut vals = vec![self.total, self.cel, self.dcl_main, self.ovl_main, self.fpl];
        for s in 0..SIDE_PATHS {
            vals.push(self.side_dcl[s]);
            vals.push(self.side_ovl[s]);
        }
        vals.push(self.l2);
        vals.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")
    }
}

pub struct CompositeLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Dense deep supervision objective: main term, weighted side terms and
/// an L2 penalty over `params`. Unweighted components are still reported
/// but kept out of the differentiated total; the focal positive term is
/// only evaluated (and otherwise reported as 0) when `delta_fpl > 0`.
pub fn composite_loss<T: Scalar>(
    g: &mut Graph<T>,
    out: &OutputVars,
    y: Var,
    params: &[Var],
    w: &LossWeights,
    mode: GateMode,
) -> Result<CompositeLoss> {
    ensure_same(g, "composite_loss", out.prob, y)?;
    let item = |g: &Graph<T>, v: Var| g.value(v).data()[0].to_f64();
    let mut terms: Vec<(Var, f64)> = Vec::new();
    let mut bd = LossBreakdown {
        total: 0.0,
        cel: 0.0,
        dcl_main: 0.0,
        ovl_main: 0.0,
        fpl: 0.0,
        side_dcl: [0.0; SIDE_PATHS],
        side_ovl: [0.0; SIDE_PATHS],
        l2: 0.0,
    };

    let cel_v = cel(g, out.prob, y, w.cel_eps)?;
    bd.cel = item(g, cel_v);
    let dcl_v = dice_loss(g, out.prob, y, w.dice_eps)?;
    bd.dcl_main = item(g, dcl_v);
    let ovl_v = overlap_loss(g, out.prob, w.overlap_reduction)?;
    bd.ovl_main = item(g, ovl_v);

    match w.objective {
        Objective::CrossEntropy => terms.push((cel_v, 1.0)),
        Objective::Composite => {
            terms.push((dcl_v, 1.0));
            terms.push((ovl_v, w.gamma_ovl));
            // an untrained threshold head is never consulted
            if w.delta_fpl > 0.0 {
                let fpl_v = focal_positive_loss(g, out.logit, out.tm, y, mode, w.tau_gate, w.fpl_mask, w.dice_eps)?;
                bd.fpl = item(g, fpl_v);
                terms.push((fpl_v, w.delta_fpl));
            }
        }
    }
    for (s, &side) in out.sides.iter().enumerate() {
        ensure_same(g, "composite_loss side", side, y)?;
        let d = dice_loss(g, side, y, w.dice_eps)?;
        let o = overlap_loss(g, side, w.overlap_reduction)?;
        bd.side_dcl[s] = item(g, d);
        bd.side_ovl[s] = item(g, o);
        if w.objective == Objective::Composite {
            terms.push((d, w.beta[s]));
            terms.push((o, w.beta[s] * w.gamma_ovl));
        }
    }

    let mut l2_terms = Vec::with_capacity(params.len());
    for &p in params {
        let sq = g.mul(p, p)?;
        l2_terms.push(g.sum(sq));
    }
    if let Some((&first, rest)) = l2_terms.split_first() {
        let mut acc = first;
        for &t in rest {
            acc = g.add(acc, t)?;
        }
        bd.l2 = item(g, acc);
        terms.push((acc, w.lambda_l2));
    }

    let zero = g.constant(Tensor::scalar(T::ZERO));
    let mut total = zero;
    for (v, weight) in terms {
        if weight == 0.0 {
            continue;
        }
        let scaled = if weight == 1.0 { v } else { g.scale(v, weight) };
        total = g.add(total, scaled)?;
    }
    bd.total = item(g, total);
    Ok(CompositeLoss { total, breakdown: bd })
}
