//! Central finite-difference gradient checking in `f64`.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of every backward rule it checks.

use super::{Graph, Result, Tensor, Var};

/// Absolute floor of the relative-error denominator, so that gradients that
/// are zero up to rounding are compared absolutely instead of blowing up.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    fn observe(&mut self, input: usize, element: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if self.worst.is_none() || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst = Some(Mismatch {
                input,
                element,
                analytic,
                numeric,
            });
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

/// Evenly spaced element indices, at most `limit` of them.
pub fn spread_indices(numel: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(l) if l < numel => {
            let l = l.max(1);
            (0..l).map(|j| (j * numel) / l + (numel / l) / 2).collect()
        }
        _ => (0..numel).collect(),
    }
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences with step `h`, for every input element or for `limit`
/// evenly spaced elements per input.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, h: f64, limit: Option<usize>) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for e in spread_indices(input.numel(), limit) {
            let orig = input.data()[e];
            work[i].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            report.observe(i, e, analytic[i].data()[e], numeric);
        }
    }
    Ok(report)
}
