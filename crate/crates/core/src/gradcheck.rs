//! Finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

/// Maximum over coordinates of `|analytic - numeric| / max(1, |numeric|)`,
/// where `numeric` is the central difference with step `h`.
///
/// `f` records a scalar function of the leaf it is handed; it is called once
/// for the analytic gradient and twice per coordinate of `x`.
pub fn grad_check<'a, F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut GradTape<'a, f64>, Var) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let analytic = {
        let mut tape = GradTape::new();
        let v = tape.param_owned(x.clone());
        let loss = f(&mut tape, v)?;
        let grads = tape.backward(loss)?;
        grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()))
    };
    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut tape = GradTape::new();
        let v = tape.param_owned(probe);
        let loss = f(&mut tape, v)?;
        tape.value(loss).item()
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let s = t.square(v);
                Ok(t.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rejects_vector_output() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(grad_check(|t, v| Ok(t.square(v)), &x, 1e-5).is_err());
    }
}
