//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, TensorResult};

/// Max relative error between the tape gradient of `f` at `point` and a
/// central-difference estimate. The relative error denominator is
/// `max(1, |analytic|, |numeric|)`, so tiny gradients compare absolutely.
///
/// `f` must build a scalar result from the single leaf it is given; it is
/// re-evaluated twice per coordinate for the numeric side.
pub fn grad_check<F>(f: F, shape: &[usize], point: &[f64], eps: f64) -> TensorResult<f64>
where
    F: Fn(&Tape, Tensor) -> TensorResult<Tensor>,
{
    let tape = Tape::new();
    let x = tape.leaf(shape, point.to_vec())?;
    let out = f(&tape, x)?;
    tape.backward(out)?;
    let analytic = tape.grad(x).unwrap_or_else(|| vec![0.0; point.len()]);

    let eval = |values: &[f64]| -> TensorResult<f64> {
        let t = Tape::new();
        let x = t.leaf(shape, values.to_vec())?;
        let out = f(&t, x)?;
        Ok(t.scalar(out))
    };

    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.to_vec();
        let mut minus = point.to_vec();
        plus[i] += eps;
        minus[i] -= eps;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

/// Relative error with a `max(1, |a|, |b|)` denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

/// Max relative error between two equally long gradient buffers.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_nearly_exact() {
        // central differences are exact for quadratics up to roundoff
        let point = [0.3, -1.2, 0.7];
        let err = grad_check(
            |t, x| {
                let sq = t.hadamard(x, x)?;
                Ok(t.sum_all(sq))
            },
            &[3],
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "err = {err}");
    }

    #[test]
    fn constant_function_has_zero_grads() {
        let err = grad_check(
            |t, x| {
                let zero = t.scale(x, 0.0);
                Ok(t.sum_all(zero))
            },
            &[4],
            &[1.0, 2.0, 3.0, 4.0],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn detects_a_broken_gradient_path() {
        // value computed outside the tape: analytic grad is zero while the
        // numeric one is not, so the check must report a large error
        let err = grad_check(
            |t, x| {
                let detached: f64 = t.value(x).iter().map(|v| v * v).sum();
                t.constant(&[1], vec![detached])
            },
            &[2],
            &[1.0, 2.0],
            1e-5,
        )
        .unwrap();
        assert!(err > 1e-2, "expected the harness to flag the break, err = {err}");
    }
}
