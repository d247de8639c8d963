use super::{Result, Tape, Tensor, TensorError, Var};

/// Largest coordinate-wise relative error between the reverse-mode gradient
/// of `f` at `point` and a central difference with the given `step`.
///
/// The error for one coordinate is `|analytic - numeric| / max(1, |numeric|)`.
/// `f` receives a fresh tape and the point as a gradient-carrying leaf and
/// must return a scalar.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(TensorError::Invalid(format!("step must be positive, got {step}")));
    }
    let (rows, cols) = point.dims2()?;
    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(rows, cols, data)?;
        let out = f(&mut tape, x)?;
        let v = tape.scalar(out);
        if !v.is_finite() {
            return Err(TensorError::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let x = tape.param(rows, cols, point.data().to_vec())?;
    let out = f(&mut tape, x)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get(x).expect("point is a gradient leaf").to_vec();
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(TensorError::NonFinite("analytic gradient".into()));
    }

    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let mut plus = point.data().to_vec();
        plus[i] += step;
        let mut minus = point.data().to_vec();
        minus[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (a - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let p = Tensor::scalar(2.0);
        let err = grad_check(|t, x| t.mul(x, x), &p, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn masked_softmax_sum_weighted() {
        let p = Tensor::matrix(1, 4, vec![0.2, -1.0, 0.7, 1.5]).unwrap();
        let err = grad_check(
            |t, x| {
                let s = t.softmax_rows(x, Some(&[true, true, false, true]))?;
                let w = t.constant(1, 4, vec![1.0, -2.0, 5.0, 0.5])?;
                let y = t.mul(s, w)?;
                Ok(t.sum(y))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let p = Tensor::scalar(1.0);
        assert!(grad_check(|t, x| Ok(t.square(x)), &p, 0.0).is_err());
        let p = Tensor::scalar(0.0);
        assert!(grad_check(|t, x| t.log(x), &p, 1e-5).is_err());
    }
}
