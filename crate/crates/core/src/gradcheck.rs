//! Central finite-difference checks of autograd gradients.

use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};

/// Largest relative error between the autograd gradient of `loss` with
/// respect to `var` and a central difference with step `eps`, over up to
/// `max_entries` evenly spaced entries of `var`.
///
/// `var` must be `f64`. The relative error of an entry is
/// `|g - n| / max(|g|, |n|, 1e-8)`.
pub fn max_relative_error<F>(var: &Var, max_entries: usize, eps: f64, loss: F) -> Result<f64>
where
    F: Fn() -> Tensor,
{
    if var.dtype() != DType::F64 {
        return Err(Error::Argument("gradient checks need an f64 parameter".into()));
    }
    let grads = loss().backward()?;
    let analytic = match grads.get(var.as_tensor()) {
        Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
        None => vec![0.0; var.elem_count()],
    };
    let shape = var.shape().clone();
    let base = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
    let n = base.len();
    let stride = (n / max_entries.max(1)).max(1);
    let mut worst = 0.0f64;
    let eval = |values: &[f64]| -> Result<f64> {
        var.set(&Tensor::from_slice(values, shape.clone(), var.device())?)?;
        Ok(loss().to_scalar::<f64>()?)
    };
    let mut work = base.clone();
    for i in (0..n).step_by(stride) {
        work[i] = base[i] + eps;
        let up = eval(&work)?;
        work[i] = base[i] - eps;
        let down = eval(&work)?;
        work[i] = base[i];
        let numeric = (up - down) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    var.set(&Tensor::from_slice(&base, shape, var.device())?)?;
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn quadratic_gradient_is_exact() {
        let v = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0, 0.5], &Device::Cpu).unwrap()).unwrap();
        let err = max_relative_error(&v, 3, 1e-5, || v.as_tensor().sqr().unwrap().sum_all().unwrap()).unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn rejects_single_precision() {
        let v = Var::zeros(3, DType::F32, &Device::Cpu).unwrap();
        assert!(max_relative_error(&v, 3, 1e-3, || v.as_tensor().sum_all().unwrap()).is_err());
    }
}
