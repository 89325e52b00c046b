//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{NumericsError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Worst coordinate-wise [`relative_error`] between two tensors.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> Result<f64> {
    analytic.same_shape(numeric, "max_relative_error")?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn numeric_gradient<F>(f: F, point: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(NumericsError::Invalid(format!("step must be positive, got {h}")));
    }
    let mut grad = Tensor::zeros(point.shape());
    let mut probe = point.clone();
    for i in 0..point.len() {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = x0 - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = x0;
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Richardson extrapolation of two central differences,
/// `(4 D(h/2) - D(h)) / 3`, with truncation error `O(h^4)`.
pub fn extrapolated_gradient<F>(f: F, point: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let coarse = numeric_gradient(&f, point, h)?;
    let mut fine = numeric_gradient(&f, point, 0.5 * h)?;
    for (a, c) in fine.data_mut().iter_mut().zip(coarse.data()) {
        *a = (4.0 * *a - c) / 3.0;
    }
    Ok(fine)
}

/// Compare the tape gradient of a scalar-valued `f` at `point` against
/// central differences; returns the worst relative error.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    compare(f, point, |v| numeric_gradient(v, point, h))
}

/// [`grad_check`] against [`extrapolated_gradient`]. Suited to deep
/// compositions where some coordinates of the gradient nearly cancel: plain
/// central differences leave an `O(h^2)` error scaled by the neighbouring
/// coordinates, and no single step keeps both that and roundoff below a
/// relative tolerance on such coordinates.
pub fn grad_check_extrapolated<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    compare(f, point, |v| extrapolated_gradient(v, point, h))
}

fn compare<F, N>(f: F, point: &Tensor, numeric: N) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
    N: FnOnce(&dyn Fn(&Tensor) -> Result<f64>) -> Result<Tensor>,
{
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let out = f(&mut g, x)?;
    if g.value(out).len() != 1 {
        return Err(NumericsError::NotScalar(g.value(out).shape().to_vec()));
    }
    let grads = g.backward(out)?;
    let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()));

    let value = |p: &Tensor| {
        let mut g = Graph::new();
        let x = g.constant(p.clone());
        let out = f(&mut g, x)?;
        g.value(out).item()
    };
    let numeric = numeric(&value)?;
    max_relative_error(&analytic, &numeric)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let err = grad_check(
            |g, x| {
                let y = g.square(x)?;
                g.sum(y)
            },
            &Tensor::scalar(3.0),
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn extrapolation_cancels_the_cubic_term() {
        // d/dx sin(x) at 0.7: plain central difference errs by ~h^2/6
        let point = Tensor::scalar(0.7);
        let f = |t: &Tensor| Ok(t.data()[0].sin());
        let exact = 0.7f64.cos();
        let plain = numeric_gradient(f, &point, 1e-2).unwrap().data()[0];
        let rich = extrapolated_gradient(f, &point, 1e-2).unwrap().data()[0];
        assert!((plain - exact).abs() > 1e-6);
        assert!((rich - exact).abs() < 1e-10);
    }

    #[test]
    fn rejects_vector_output() {
        let r = grad_check(|g, x| g.tanh(x), &Tensor::row(&[0.1, 0.2]), 1e-4);
        assert!(matches!(r, Err(NumericsError::NotScalar(_))));
    }

    #[test]
    fn floor_applies_to_zero_gradients() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(0.0, 1e-9) - 0.1).abs() < 1e-12);
    }
}
