use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-6;

/// Central-difference gradient of `f` at `x`.
///
/// The step for coordinate `i` is `eps * max(1, |x_i|)`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::contract(format!(
            "finite-difference eps must be > 0, got {eps}"
        )));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let h = eps * x[i].abs().max(1.0);
        probe[i] = x[i] + h;
        let plus = f(&probe);
        if !plus.is_finite() {
            return Err(Error::Oracle {
                coord: i,
                value: plus,
            });
        }
        probe[i] = x[i] - h;
        let minus = f(&probe);
        if !minus.is_finite() {
            return Err(Error::Oracle {
                coord: i,
                value: minus,
            });
        }
        probe[i] = x[i];
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = super::norm(a).max(super::norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{matmul, Matrix, RngStream};

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_diff_grad(|_| 3.5, &[1.0, -2.0, 0.0], DEFAULT_EPS).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_squared_norm() {
        let g = finite_diff_grad(|x| 0.5 * (x[0] * x[0] + x[1] * x[1]), &[1.0, 2.0], 1e-6).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-6);
        assert!((g[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn quadratic_form() {
        let mut rng = RngStream::new(17);
        let n = 6;
        let a = Matrix::from_fn(n, n, |_, _| rng.normal());
        let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let f = |v: &[f64]| {
            let col = Matrix::from_vec(n, 1, v.to_vec()).unwrap();
            0.5 * crate::numcore::dot(v, matmul(&a, &col).unwrap().as_slice())
        };
        let num = finite_diff_grad(f, &x, DEFAULT_EPS).unwrap();
        let sym = a.add(&a.transpose()).scale(0.5);
        let exact = matmul(&sym, &Matrix::from_vec(n, 1, x.clone()).unwrap()).unwrap();
        assert!(relative_error(&num, exact.as_slice()) < 1e-5);
    }

    #[test]
    fn non_finite_evaluation_fails() {
        let r = finite_diff_grad(|x| if x[0] > 0.0 { f64::NAN } else { 0.0 }, &[0.0], 1e-6);
        assert!(matches!(r, Err(Error::Oracle { coord: 0, .. })));
        assert!(finite_diff_grad(|_| 0.0, &[0.0], 0.0).is_err());
    }
}
