use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// Compare reverse-mode gradients of a scalar-valued function against
/// central finite differences at every element of `x`. Returns the maximum
/// relative error |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
///
/// Runs at f64 only; f32 lacks the headroom for central differences.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let tape = Tape::new();
    let xt = tape.watch(x);
    let y = f(&xt)?;
    if y.len() != 1 {
        return Err(Error::invalid("grad_check needs a scalar-valued function"));
    }
    let grads = tape.backward(&y)?;
    let analytic = grads.for_tensor(&xt)?;

    let mut max_err = 0.0f64;
    let base = x.data().to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let yp = f(&Tensor::from_vec(x.shape(), plus)?)?.item()?;
        let ym = f(&Tensor::from_vec(x.shape(), minus)?)?.item()?;
        if !yp.is_finite() || !ym.is_finite() {
            return Err(Error::numeric("non-finite value during finite differencing"));
        }
        let numeric = (yp - ym) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        let err = (analytic[i] - numeric).abs() / denom;
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
