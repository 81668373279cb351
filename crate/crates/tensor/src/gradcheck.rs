//! Finite-difference verification of reverse-mode gradients.
//!
//! The check runs the function in `f64` so the central-difference oracle is
//! not swamped by single-precision rounding.

use crate::{Result, Tape, Tensor, TensorError, Var};

pub const GRADCHECK_TOLERANCE: f64 = 1e-3;
pub const GRADCHECK_ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst component.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub pass: bool,
}

fn evaluate<F>(f: &F, point: &Tensor<f64>) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let x = tape.leaf(point.clone());
    let out = f(&tape, x)?.value();
    if out.len() != 1 {
        return Err(TensorError::Contract(format!(
            "gradcheck needs a scalar function, got shape {:?}",
            out.shape()
        )));
    }
    let v = out.data()[0];
    if !v.is_finite() {
        return Err(TensorError::Evaluation(format!("function value {v} is not finite")));
    }
    Ok(v)
}

/// Compares the tape gradient of `f` at `point` against central differences
/// with half-width `step`. A component's error is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn gradcheck<F>(f: F, point: &Tensor<f64>, step: f64) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(TensorError::Contract(format!("gradcheck step must be positive, got {step}")));
    }
    let analytic = {
        let tape = Tape::new();
        let x = tape.leaf(point.clone());
        let out = f(&tape, x)?;
        let v = out.with_value(|t| t.data().first().copied().unwrap_or(f64::NAN));
        if !v.is_finite() {
            return Err(TensorError::Evaluation(format!("function value {v} is not finite")));
        }
        tape.backward(out)?.wrt(x).into_data()
    };

    let mut numeric = Vec::with_capacity(point.len());
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let down = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * step));
    }

    let (mut max_rel_error, mut worst_index) = (0.0f64, 0);
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(GRADCHECK_ABS_FLOOR);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(GradcheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
        pass: max_rel_error < GRADCHECK_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let p = Tensor::new(vec![1], vec![3.0]).unwrap();
        let r = gradcheck(|_, x| x.mul(x)?.sum(), &p, 1e-3).unwrap();
        assert!(r.pass);
        assert!((r.analytic[0] - 6.0).abs() < 1e-12);
        assert!((r.numeric[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function() {
        let p = Tensor::new(vec![3], vec![0.5, -2.0, 7.0]).unwrap();
        let r = gradcheck(
            |t, x| {
                let c = t.constant(Tensor::scalar(4.0));
                x.scale(0.0)?.sum()?.add(c)
            },
            &p,
            1e-3,
        )
        .unwrap();
        assert!(r.pass);
        assert!(r.analytic.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn non_finite_value_is_evaluation_error() {
        let p = Tensor::new(vec![1], vec![1.0]).unwrap();
        let err = gradcheck(|_, x| x.scale(f64::INFINITY)?.sum(), &p, 1e-3).unwrap_err();
        assert!(matches!(err, TensorError::Evaluation(_)));
    }

    #[test]
    fn wrong_gradient_is_caught() {
        struct Doubled;
        impl crate::CustomOp<f64> for Doubled {
            fn backward(&self, _: &[&Tensor<f64>], _: &Tensor<f64>, g: &[f64]) -> Vec<Vec<f64>> {
                vec![g.iter().map(|v| 2.0 * v).collect()]
            }
        }
        let p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let r = gradcheck(
            |t, x| {
                let v = x.value();
                t.custom(&[x], v, Box::new(Doubled))?.sum()
            },
            &p,
            1e-3,
        )
        .unwrap();
        assert!(!r.pass);
        assert!((r.max_rel_error - 0.5).abs() < 1e-6);
    }
}
