use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compare the reverse-mode gradient of a scalar-valued tensor function with
/// central finite differences, returning the worst relative error.
///
/// For each coordinate: numeric = (f(x+εe) − f(x−εe)) / 2ε, and the relative
/// error is |analytic − numeric| / max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("grad_check eps must be > 0".into()));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t.clone());
        let root = f(&mut g, v)?;
        let out = g.value(root);
        if !out.is_scalar() {
            return Err(Error::NonScalarRoot { shape: out.shape().to_vec() });
        }
        let y = out.item();
        if !y.is_finite() {
            return Err(Error::NonFinite("grad_check objective"));
        }
        Ok(y)
    };

    // analytic gradient
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let root = f(&mut g, v)?;
    if !g.value(root).is_scalar() {
        return Err(Error::NonScalarRoot { shape: g.value(root).shape().to_vec() });
    }
    if !g.value(root).item().is_finite() {
        return Err(Error::NonFinite("grad_check objective"));
    }
    g.backward(root)?;
    let analytic = g.grad(v);

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Default step for [`grad_check`].
pub const DEFAULT_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Rng;

    fn random_tensor(rng: &mut Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform_in(lo, hi)).collect()).unwrap()
    }

    #[test]
    fn linear_function_is_exact() {
        let mut rng = Rng::new(11);
        let x = random_tensor(&mut rng, vec![3, 4], -2.0, 2.0);
        let err = grad_check(|g, v| g.sum(v, None), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "sum is linear, error should vanish: {err}");
    }

    #[test]
    fn rejects_bad_eps_and_nonscalar() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        assert!(grad_check(|g, v| g.sum(v, None), &x, 0.0).is_err());
        assert!(grad_check(|_, v| Ok(v), &x, 1e-5).is_err());
    }

    #[test]
    fn detects_injected_gradient_bug() {
        // Deliberately wrong op: value of x², gradient claimed as 3x (via
        // scale of the true path). sum(x∘x) has grad 2x; building
        // sum(x∘x)·1.5 changes both value and grad consistently, so to plant
        // a real bug we compare f = sum(x∘x) against FD of a different
        // function g = 1.5·sum(x∘x) by evaluating through a closure that
        // cheats on re-evaluation.
        let x = Tensor::from_vec(vec![0.7, -0.3, 1.1]);
        let calls = std::cell::Cell::new(0usize);
        let err = grad_check(
            |g, v| {
                let n = calls.get();
                calls.set(n + 1);
                let sq = g.mul(v, v)?;
                let s = g.sum(sq, None)?;
                // First call computes the analytic gradient; later calls
                // (finite differences) see a scaled function.
                if n == 0 {
                    Ok(s)
                } else {
                    Ok(g.scale(s, 1.5))
                }
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err > 1e-2, "negative control must trip: {err}");
    }
}
