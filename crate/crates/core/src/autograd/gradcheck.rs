//! Central-difference gradient checking.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::DenseTensor;

/// A scalar function of a list of tensors with an analytic gradient.
pub trait Objective {
    fn value(&self, params: &[DenseTensor]) -> Result<f64>;
    fn value_and_grad(&self, params: &[DenseTensor]) -> Result<(f64, Vec<DenseTensor>)>;
}

/// Adapts a closure that records a scalar loss on a fresh tape.
pub struct TapeObjective<F>(pub F);

impl<F> TapeObjective<F>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    fn run(&self, params: &[DenseTensor]) -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = (self.0)(&mut tape, &vars)?;
        Ok((tape, vars, loss))
    }
}

impl<F> Objective for TapeObjective<F>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    fn value(&self, params: &[DenseTensor]) -> Result<f64> {
        let (tape, _, loss) = self.run(params)?;
        Ok(tape.value(loss).data()[0])
    }

    fn value_and_grad(&self, params: &[DenseTensor]) -> Result<(f64, Vec<DenseTensor>)> {
        let (tape, vars, loss) = self.run(params)?;
        let grads = tape.backward(loss)?;
        Ok((
            tape.value(loss).data()[0],
            vars.iter().map(|&v| grads.wrt(v)).collect(),
        ))
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error over all checked coordinates.
    pub max_rel_err: f64,
    /// Worst relative error per parameter tensor.
    pub per_tensor: Vec<f64>,
    pub coords_checked: usize,
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient with central differences on up to
/// `coords_per_tensor` random coordinates of each tensor (all of them when
/// the tensor is smaller).
pub fn check_gradients(
    f: &impl Objective,
    params: &[DenseTensor],
    h: f64,
    coords_per_tensor: usize,
    rng: &mut RngState,
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-2).contains(&h) {
        return Err(Error::Parameter(format!("step {h} outside [1e-6, 1e-2]")));
    }
    let (f0, grads) = f.value_and_grad(params)?;
    if !f0.is_finite() {
        return Err(Error::Evaluation(format!("objective is {f0}")));
    }
    let mut work = params.to_vec();
    let mut per_tensor = Vec::with_capacity(params.len());
    let mut checked = 0;
    for t in 0..params.len() {
        let mut worst: f64 = 0.0;
        for i in rng.sample_indices(params[t].len(), coords_per_tensor) {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + h;
            let fp = f.value(&work)?;
            work[t].data_mut()[i] = orig - h;
            let fm = f.value(&work)?;
            work[t].data_mut()[i] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Evaluation(format!(
                    "objective not finite near tensor {t} coordinate {i}"
                )));
            }
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_error(grads[t].data()[i], numeric));
            checked += 1;
        }
        per_tensor.push(worst);
    }
    Ok(GradCheckReport {
        max_rel_err: per_tensor.iter().copied().fold(0.0, f64::max),
        per_tensor,
        coords_checked: checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let mut rng = RngState::new(1);
        let p = DenseTensor::from_fn(&[10], |i| i[0] as f64 - 4.5).unwrap();
        let f = TapeObjective(|tape: &mut Tape, v: &[Var]| {
            let sq = tape.mul(v[0], v[0])?;
            Ok(tape.sum(sq))
        });
        let r = check_gradients(&f, &[p], 1e-4, 50, &mut rng).unwrap();
        assert!(r.max_rel_err <= 1e-6, "{}", r.max_rel_err);
        assert_eq!(r.coords_checked, 10);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut rng = RngState::new(1);
        let p = DenseTensor::vector(&[0.0]).unwrap();
        let f = TapeObjective(|tape: &mut Tape, v: &[Var]| {
            let q = tape.div(v[0], v[0])?;
            Ok(tape.sum(q))
        });
        assert!(matches!(
            check_gradients(&f, &[p], 1e-4, 50, &mut rng),
            Err(Error::Evaluation(_))
        ));
    }
}
