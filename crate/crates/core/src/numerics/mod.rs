//! Dense linear algebra, softmax, seeded initialisation and a central
//! difference gradient checker.

mod matrix;
mod rng;

pub use matrix::{axpy, dot, Matrix, Scalar};
pub use rng::Rng;

use crate::error::{Error, Result};

/// Numerically stable softmax (max subtraction).
pub fn softmax<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::arg("softmax of an empty vector"));
    }
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric("softmax input contains NaN".into()));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Unchecked in-place variant for hot loops; caller guarantees a non-empty,
/// NaN-free input.
pub fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Matrix of i.i.d. `N(0, std²)` draws.
pub fn seeded_normal<T: Scalar>(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Result<Matrix<T>> {
    if !(std > 0.0) {
        return Err(Error::arg(format!("standard deviation must be positive, got {std}")));
    }
    let data = (0..rows * cols).map(|_| T::lit(rng.normal() * std)).collect();
    Matrix::from_vec(rows, cols, data)
}

/// Compares an analytic gradient with central differences of `f` at `x`.
///
/// Returns `max_i |a_i - c_i| / max(|a_i|, |c_i|, 1e-8)`.
pub fn grad_check<T, F>(mut f: F, analytic: &Matrix<T>, x: &Matrix<T>, eps: T) -> Result<f64>
where
    T: Scalar,
    F: FnMut(&Matrix<T>) -> T,
{
    if !(eps > T::zero()) {
        return Err(Error::arg("eps must be positive"));
    }
    if analytic.shape() != x.shape() {
        return Err(Error::shape("grad_check", analytic.shape(), x.shape()));
    }
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.data().len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("non-finite objective while perturbing entry {i}")));
        }
        let central = (plus - minus).to_f64() / (2.0 * eps.to_f64());
        let a = analytic.data()[i].to_f64();
        let denom = a.abs().max(central.abs()).max(1e-8);
        worst = worst.max((a - central).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Rng;
    use proptest::prelude::*;

    #[test]
    fn softmax_known_values() {
        assert_eq!(softmax(&[0.0f64, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12 && (p[1] - 1.0 / 3.0).abs() < 1e-12);
        let p = softmax(&[1000.0f32, 1000.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(softmax::<f32>(&[]), Err(Error::Argument(_))));
        assert!(matches!(softmax(&[1.0f32, f32::NAN]), Err(Error::Numeric(_))));
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(v in prop::collection::vec(-20.0f64..20.0, 1..16), c in -1e4f64..1e4) {
            let p = softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn softmax_preserves_order(v in prop::collection::vec(-20.0f32..20.0, 2..16)) {
            let p = softmax(&v).unwrap();
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] > v[j] {
                        prop_assert!(p[i] >= p[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn seeded_normal_is_deterministic() {
        let a: Matrix = seeded_normal(&mut Rng::new(5), 4, 3, 0.02).unwrap();
        let b: Matrix = seeded_normal(&mut Rng::new(5), 4, 3, 0.02).unwrap();
        assert_eq!(a.data(), b.data());
        let e: Matrix = seeded_normal(&mut Rng::new(5), 0, 3, 0.02).unwrap();
        assert_eq!(e.shape(), (0, 3));
        assert!(seeded_normal::<f32>(&mut Rng::new(5), 1, 1, 0.0).is_err());
    }

    #[test]
    fn seeded_normal_sample_std() {
        let m: Matrix<f64> = seeded_normal(&mut Rng::new(11), 1000, 100, 0.02).unwrap();
        let n = m.data().len() as f64;
        let mean = m.data().iter().sum::<f64>() / n;
        let var = m.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02 * 5.0 / n.sqrt());
        assert!((var.sqrt() - 0.02).abs() < 0.02 * 0.05);
    }

    #[test]
    fn grad_check_quadratic() {
        let x: Matrix<f64> = seeded_normal(&mut Rng::new(2), 3, 4, 1.0).unwrap();
        let mut g = x.clone();
        g.scale(2.0);
        let err = grad_check(|m| m.data().iter().map(|v| v * v).sum(), &g, &x, 1e-3).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    /// Cross-entropy of a linear softmax classifier, gradient derived by hand.
    #[test]
    fn grad_check_softmax_classifier() {
        let mut rng = Rng::new(17);
        let feats: Matrix<f64> = seeded_normal(&mut rng, 6, 5, 1.0).unwrap();
        let w: Matrix<f64> = seeded_normal(&mut rng, 5, 4, 0.5).unwrap();
        let labels = [0usize, 3, 1, 2, 2, 0];
        let loss = |w: &Matrix<f64>| {
            let logits = feats.matmul(w).unwrap();
            let mut total = 0.0;
            for (r, &y) in labels.iter().enumerate() {
                let p = softmax(logits.row(r)).unwrap();
                total -= p[y].ln();
            }
            total / labels.len() as f64
        };
        let logits = feats.matmul(&w).unwrap();
        let mut dlogits = Matrix::<f64>::zeros(6, 4);
        for (r, &y) in labels.iter().enumerate() {
            let p = softmax(logits.row(r)).unwrap();
            for c in 0..4 {
                let target = if c == y { 1.0 } else { 0.0 };
                dlogits.set(r, c, (p[c] - target) / labels.len() as f64);
            }
        }
        let grad = feats.matmul_at(&dlogits).unwrap();
        let err = grad_check(loss, &grad, &w, 1e-3).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn grad_check_negative_control() {
        let x: Matrix<f64> = seeded_normal(&mut Rng::new(4), 2, 2, 1.0).unwrap();
        let zero = Matrix::zeros(2, 2);
        let err = grad_check(|m| m.data().iter().map(|v| v * v * v + v).sum(), &zero, &x, 1e-3).unwrap();
        assert!((err - 1.0).abs() < 1e-9, "{err}");
    }

    #[test]
    fn grad_check_non_finite() {
        let x = Matrix::<f64>::filled(1, 1, 0.0);
        let r = grad_check(|m| m.get(0, 0).ln(), &x, &x, 1e-3);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
