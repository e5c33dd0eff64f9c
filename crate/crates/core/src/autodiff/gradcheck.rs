use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is ~0 are judged on absolute error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-3,
            floor: 1e-4,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckEntry {
    pub input: usize,
    pub elements: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

fn evaluate<F>(build: &F, inputs: &[Tensor<f64>], with_grad: bool) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let value = g.value(out).item().map_err(|_| {
        Error::Contract(format!(
            "gradient check needs a scalar output, got shape {:?}",
            g.shape(out)
        ))
    })?;
    if !with_grad {
        return Ok((value, Vec::new()));
    }
    g.backward(out)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    Ok((value, grads))
}

/// Compares reverse-mode gradients of a scalar-valued builder against
/// central finite differences, element by element, in `f64`.
pub fn grad_check<F>(name: &str, build: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (_, analytic) = evaluate(&build, inputs, true)?;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut entries = Vec::with_capacity(inputs.len());
    for (idx, grads) in analytic.iter().enumerate() {
        let mut entry = GradCheckEntry {
            input: idx,
            elements: grads.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (e, &a) in grads.iter().enumerate() {
            let orig = work[idx].data()[e];
            work[idx].data_mut()[e] = orig + opts.step;
            let (fp, _) = evaluate(&build, &work, false)?;
            work[idx].data_mut()[e] = orig - opts.step;
            let (fm, _) = evaluate(&build, &work, false)?;
            work[idx].data_mut()[e] = orig;
            let n = (fp - fm) / (2.0 * opts.step);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(opts.floor);
            if rel > entry.max_rel_error || !rel.is_finite() {
                entry.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                entry.worst_index = e;
                entry.analytic = a;
                entry.numeric = n;
            }
        }
        entries.push(entry);
    }
    let passed = entries.iter().all(|e| e.max_rel_error < opts.tolerance);
    Ok(GradCheckReport {
        name: name.to_string(),
        entries,
        tolerance: opts.tolerance,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let x = Tensor::new(vec![5], vec![0.1, -0.3, 2.0, 4.0, -1.0]).unwrap();
        let r = grad_check("sum", |g, v| Ok(g.sum(v[0])), &[x], GradCheckOptions::default()).unwrap();
        assert!(r.passed);
        assert!(r.max_rel_error() < 1e-9);
        assert_eq!(r.entries[0].analytic, 1.0);
    }

    #[test]
    fn sigmoid_slope_at_zero_is_a_quarter() {
        let x = Tensor::zeros(vec![4]);
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let s = g.sigmoid(v);
        let out = g.sum(s);
        g.backward(out).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[0.25; 4]);
        let r = grad_check(
            "sigmoid",
            |g, v| {
                let s = g.sigmoid(v[0]);
                Ok(g.sum(s))
            },
            &[x],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn non_scalar_output_is_a_contract_error() {
        let x = Tensor::zeros(vec![3]);
        let err = grad_check("id", |_, v| Ok(v[0]), &[x], GradCheckOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn step_discontinuity_is_flagged() {
        // the gate contributes no analytic gradient, but finite differences
        // straddling the step see a jump
        let x = Tensor::new(vec![2], vec![0.5, 0.9]).unwrap();
        let r = grad_check(
            "gate",
            |g, v| {
                let half = g.constant(Tensor::full(vec![2], 0.5));
                let k = g.gate(v[0], half)?;
                Ok(g.sum(k))
            },
            &[x],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!r.passed);
        assert_eq!(r.entries[0].worst_index, 0);
    }
}
