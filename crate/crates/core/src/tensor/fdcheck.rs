//! Gradient verification against central finite differences.

use super::{Result, Tape, Tensor, TensorError, Var};

/// Compare the analytic gradient of a scalar-valued function against central
/// differences at `point`, returning the maximum per-coordinate relative
/// error `|analytic − numeric| / max(1, |analytic|)`.
///
/// `fun` receives a tape and the registered input var and must return the
/// scalar output var. It is evaluated twice at the same point first; any
/// mismatch means the function is not deterministic, which is an error.
pub fn finite_diff_check<F>(fun: F, point: &Tensor, h: f32) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(TensorError::Parameter {
            op: "finite_diff_check",
            msg: format!("h must be positive, got {h}"),
        });
    }

    let eval = |data: &[f32]| -> Result<f64> {
        let probe = Tensor::new(data.to_vec(), point.shape().to_vec())?;
        let mut tape = Tape::new();
        let v = tape.leaf(&probe);
        let out = fun(&mut tape, v)?;
        if tape.numel(out) != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: tape.shape(out).to_vec(),
            });
        }
        Ok(tape.scalar_value(out))
    };

    let base = point.data().to_vec();
    let first = eval(&base)?;
    let second = eval(&base)?;
    if first != second {
        return Err(TensorError::Parameter {
            op: "finite_diff_check",
            msg: "function is not deterministic (double evaluation mismatch)".into(),
        });
    }

    // Analytic gradient at the point.
    let grad = {
        let probe = Tensor::param(base.clone(), point.shape().to_vec())?;
        let mut tape = Tape::new();
        let v = tape.leaf(&probe);
        let out = fun(&mut tape, v)?;
        if tape.numel(out) != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: tape.shape(out).to_vec(),
            });
        }
        let grads = tape.backward(out)?;
        grads
            .of(&probe)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; base.len()])
    };

    let mut max_rel = 0.0f64;
    let mut perturbed = base.clone();
    for i in 0..base.len() {
        let x0 = base[i];
        let xp = x0 + h;
        let xm = x0 - h;
        perturbed[i] = xp;
        let plus = eval(&perturbed)?;
        perturbed[i] = xm;
        let minus = eval(&perturbed)?;
        perturbed[i] = x0;
        // Use the step that was actually representable, not the nominal 2h.
        let denom = xp as f64 - xm as f64;
        let numeric = (plus - minus) / denom;
        let analytic = grad[i] as f64;
        let rel = (analytic - numeric).abs() / analytic.abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        // f(x) = sum(4x). The power-of-two coefficient keeps the forward
        // evaluation exact in f32, so central differences are exact too.
        let point = Tensor::new(vec![0.3, -1.2, 2.0], vec![3]).unwrap();
        let err = finite_diff_check(
            |tape, v| {
                let s = tape.scale(v, 4.0)?;
                tape.sum_all(s)
            },
            &point,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn quadratic_function_is_near_exact() {
        // f(x) = sum(x ⊙ x) via rowwise_dot; central differences are exact
        // for quadratics up to roundoff. Dyadic probe values and a dyadic
        // step (2^-10 ≈ 1e-3) keep the f32 evaluation representable.
        let point = Tensor::new(vec![0.5, -0.25, 1.0, 0.75], vec![1, 4]).unwrap();
        let err = finite_diff_check(
            |tape, v| {
                let d = tape.rowwise_dot(v, v)?;
                tape.sum_all(d)
            },
            &point,
            0.0009765625,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn detects_wrong_gradient_shape_of_function() {
        // non-scalar outputs are rejected
        let point = Tensor::new(vec![1.0, 2.0], vec![2]).unwrap();
        let res = finite_diff_check(|_tape, v| Ok(v), &point, 1e-3);
        assert!(matches!(res, Err(TensorError::NonScalarLoss { .. })));
    }
}
