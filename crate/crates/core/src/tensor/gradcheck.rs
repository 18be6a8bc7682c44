use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Agreement between reverse-mode and central-difference gradients for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradStats {
    pub index: usize,
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
    pub per_parameter: Vec<ParamGradStats>,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_value(&tape, out)
}

fn scalar_value(tape: &Tape, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::invalid(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    let x = v.item();
    if !x.is_finite() {
        return Err(Error::NonFinite {
            op: "check_gradient",
            index: 0,
        });
    }
    Ok(x)
}

/// Compare the tape gradient of scalar `f` at `params` against central differences
/// `(f(x+h) - f(x-h)) / 2h`, coordinate by coordinate.
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn check_gradient<F>(f: F, params: &[Tensor], h: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::invalid(format!(
            "finite-difference step {h} outside [1e-6, 1e-3]"
        )));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_value(&tape, out)?;
    let grads = tape.backward(out);

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradReport {
        max_abs_diff: 0.0,
        max_rel_diff: 0.0,
        per_parameter: Vec::with_capacity(params.len()),
    };
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params[pi].shape()));
        let mut stats = ParamGradStats {
            index: pi,
            max_abs_diff: 0.0,
            max_rel_diff: 0.0,
        };
        for j in 0..params[pi].len() {
            let x0 = params[pi].data()[j];
            work[pi].data_mut()[j] = x0 + h;
            let fp = evaluate(&f, &work)?;
            work[pi].data_mut()[j] = x0 - h;
            let fm = evaluate(&f, &work)?;
            work[pi].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
            stats.max_abs_diff = stats.max_abs_diff.max(abs);
            stats.max_rel_diff = stats.max_rel_diff.max(rel);
        }
        report.max_abs_diff = report.max_abs_diff.max(stats.max_abs_diff);
        report.max_rel_diff = report.max_rel_diff.max(stats.max_rel_diff);
        report.per_parameter.push(stats);
    }
    Ok(report)
}
