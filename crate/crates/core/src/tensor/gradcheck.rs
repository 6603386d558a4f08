use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose ±h perturbation moved some relu input across zero.
    pub excluded: Vec<usize>,
}

/// Compare the tape gradient of scalar `f` at `x` against central
/// differences with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be > 0, got {h}")));
    }
    let eval = |input: &Tensor| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let v = tape.leaf(input.clone(), false);
        let out = f(&mut tape, v)?;
        let y = scalar_of(&tape, out)?;
        Ok((y, tape.relu_pattern()))
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);
    let base_pattern = tape.relu_pattern();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        excluded: Vec::new(),
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let (fp, pp) = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let (fm, pm) = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if pp != base_pattern || pm != base_pattern {
            report.excluded.push(i);
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        report.max_rel_err = report.max_rel_err.max(err);
        report.checked += 1;
    }
    Ok(report)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if !t.is_scalar() {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    let y = t.item();
    if !y.is_finite() {
        return Err(Error::Numeric("gradient-check objective".into()));
    }
    Ok(y)
}
