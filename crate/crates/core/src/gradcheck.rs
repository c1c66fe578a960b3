//! Central finite-difference gradient checking.

use candle_core::{DType, Tensor, Var};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub grad_norm: f64,
}

/// Compares the autograd gradient of the scalar `f(x)` with central
/// differences of step `h`. `x` must be `f64`.
pub fn check_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if x.dtype() != DType::F64 {
        return Err(invalid!("gradient checks run in f64"));
    }
    let var = Var::from_tensor(&x.detach())?;
    let y = f(var.as_tensor())?;
    if y.elem_count() != 1 {
        return Err(invalid!("gradient check needs a scalar output, got {:?}", y.shape()));
    }
    let grads = y.backward()?;
    let analytic = match grads.get(var.as_tensor()) {
        Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
        None => vec![0.0; x.elem_count()],
    };

    let shape = x.shape().clone();
    let base = x.flatten_all()?.to_vec1::<f64>()?;
    let eval = |v: &[f64]| -> Result<f64> {
        let t = Tensor::from_slice(v, shape.clone(), x.device())?;
        Ok(f(&t)?.flatten_all()?.to_vec1::<f64>()?[0])
    };
    let mut numeric = Vec::with_capacity(base.len());
    let mut buf = base.clone();
    for i in 0..base.len() {
        buf[i] = base[i] + h;
        let plus = eval(&buf)?;
        buf[i] = base[i] - h;
        let minus = eval(&buf)?;
        buf[i] = base[i];
        numeric.push((plus - minus) / (2.0 * h));
    }

    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    Ok(GradCheck {
        rel_error: if scale == 0.0 { 0.0 } else { norm(&diff) / scale },
        max_abs_error: diff.iter().fold(0.0, |m, d| m.max(d.abs())),
        grad_norm: norm(&analytic),
    })
}

/// Sum of squared entries.
pub fn sq_norm(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn cubic_matches() {
        let x = Tensor::new(&[0.5f64, -1.25, 2.0], &Device::Cpu).unwrap();
        let r = check_gradient(|t| Ok(t.powf(3.0)?.sum_all()?), &x, 1e-5).unwrap();
        assert!(r.rel_error < 1e-8, "{r:?}");
        assert!((r.grad_norm - (0.75f64.powi(2) + 4.6875f64.powi(2) + 144.0).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = Tensor::new(&[0.5f64, 1.5], &Device::Cpu).unwrap();
        // Gradient of the detached factor is missing, so autograd sees half of d(x²).
        let r = check_gradient(|t| Ok((t * t.detach())?.sum_all()?), &x, 1e-5).unwrap();
        assert!(r.rel_error > 0.4);
    }
}
