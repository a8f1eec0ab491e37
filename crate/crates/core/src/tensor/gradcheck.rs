//! Central finite-difference gradient checking in `f64`.

use super::{Graph, Result, Tensor, Var};

/// Relative error with a small absolute floor so that two near-zero
/// gradients compare equal.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compares backward gradients of the scalar built by `f` against central
/// differences with step `h`, for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[k].numel()];
        let analytic = g.grad(v).unwrap_or(&zeros).to_vec();
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = x0 - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            report.max_rel_err = report.max_rel_err.max(rel_error(analytic[i], numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Reduces any tensor to a scalar with fixed random weights so every
/// output element contributes a distinct gradient.
pub fn weighted_sum(g: &mut Graph<f64>, x: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone().reshape(g.shape(x))?);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}
