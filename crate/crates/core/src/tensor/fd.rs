//! Central finite differences, the ground truth for gradient checks.

use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Magnitude below which [`relative_error`] compares absolutely.
pub const GRAD_REL_FLOOR: f64 = 1e-6;

/// `|a − b| / max(|a|, |b|, GRAD_REL_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_REL_FLOOR)
}

/// Central-difference estimate `(f(θ+εe) − f(θ−εe)) / 2ε` for every
/// coordinate of every tensor in `params`. Values are restored afterwards.
pub fn finite_difference_gradient<T, F>(mut f: F, params: &mut [Tensor<T>], eps: T) -> Result<Vec<Vec<T>>>
where
    T: Real,
    F: FnMut(&[Tensor<T>]) -> Result<T>,
{
    if eps <= T::zero() {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Vec::with_capacity(params[p].numel());
        for i in 0..params[p].numel() {
            let orig = params[p].data()[i];
            params[p].data_mut()[i] = orig + eps;
            let plus = f(params);
            params[p].data_mut()[i] = orig - eps;
            let minus = f(params);
            params[p].data_mut()[i] = orig;
            g.push(central(plus?, minus?, eps, p, i)?);
        }
        out.push(g);
    }
    Ok(out)
}

/// Same as [`finite_difference_gradient`] for parameters held in a store.
pub fn finite_difference_params<T, F>(mut f: F, store: &mut ParamStore<T>, ids: &[ParamId], eps: T) -> Result<Vec<Vec<T>>>
where
    T: Real,
    F: FnMut(&ParamStore<T>) -> Result<T>,
{
    if eps <= T::zero() {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let mut out = Vec::with_capacity(ids.len());
    for (p, &id) in ids.iter().enumerate() {
        let n = store.get(id).numel();
        let mut g = Vec::with_capacity(n);
        for i in 0..n {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let plus = f(store);
            store.get_mut(id).data_mut()[i] = orig - eps;
            let minus = f(store);
            store.get_mut(id).data_mut()[i] = orig;
            g.push(central(plus?, minus?, eps, p, i)?);
        }
        out.push(g);
    }
    Ok(out)
}

fn central<T: Real>(plus: T, minus: T, eps: T, p: usize, i: usize) -> Result<T> {
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::NonFinite(format!("objective at perturbed coordinate {i} of parameter {p}")));
    }
    Ok((plus - minus) / (eps + eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn squares_and_constants() {
        let mut x = vec![Tensor::<f64>::from_f64(&[2], &[1.0, 2.0]).unwrap()];
        let g = finite_difference_gradient(|p| Ok(p[0].data().iter().map(|v| v * v).sum()), &mut x, 1e-5).unwrap();
        assert!((g[0][0] - 2.0).abs() < 1e-8 && (g[0][1] - 4.0).abs() < 1e-8);
        let g = finite_difference_gradient(|_| Ok(7.0f64), &mut x, 1e-5).unwrap();
        assert!(g[0].iter().all(|v| v.abs() < 1e-12));
        assert_eq!(x[0].data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let mut x = vec![Tensor::<f64>::from_f64(&[1], &[0.0]).unwrap()];
        let r = finite_difference_gradient(|p| Ok(1.0 / (p[0].data()[0] - 1e-5)), &mut x, 1e-5);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn matmul_sum_backward_matches_differences() {
        let a = Tensor::from_f64(&[2, 3], &[0.3, -1.2, 0.5, 2.0, 0.1, -0.7]).unwrap();
        let b = Tensor::from_f64(&[3, 2], &[1.1, 0.4, -0.6, 0.9, 0.25, -1.5]).unwrap();
        let mut tape = Tape::new();
        let va = tape.leaf(a.clone(), true);
        let vb = tape.leaf(b.clone(), true);
        let c = tape.matmul(va, vb).unwrap();
        let loss = tape.sum(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut params = vec![a, b];
        let fd = finite_difference_gradient(
            |p| {
                let mut t = Tape::new();
                let x = t.constant(p[0].clone());
                let y = t.constant(p[1].clone());
                let c = t.matmul(x, y)?;
                let s = t.sum(c)?;
                t.value(s).item()
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        for (v, num) in [va, vb].into_iter().zip(&fd) {
            for (&an, &nu) in grads.get(v).unwrap().iter().zip(num) {
                assert!(relative_error(an, nu) < 1e-6, "{an} vs {nu}");
            }
        }
    }
}
