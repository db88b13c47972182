use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central finite differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// element of `x`. Intended for `F64` runs.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_grad",
                index: i,
            });
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Tensor::from_op("finite_diff_grad", x.shape().to_vec(), grad)
}

/// Denominator floor for relative errors: gradients smaller than this are
/// compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

pub fn rel_errors(analytic: &Tensor, numeric: &Tensor) -> Vec<f64> {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| rel_error(a, b))
        .collect()
}

pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    rel_errors(analytic, numeric).into_iter().fold(0.0, f64::max)
}

/// Relative errors whose denominator floor is `PEAK_FLOOR` times the largest
/// gradient magnitude of the tensor (and at least `REL_FLOOR`). Entries far
/// below the tensor's scale are then judged against that scale, which keeps
/// finite-difference roundoff on exact zeros from dominating.
pub fn rel_errors_scaled(analytic: &Tensor, numeric: &Tensor) -> Vec<f64> {
    assert_eq!(analytic.shape(), numeric.shape());
    let peak = numeric.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (PEAK_FLOOR * peak).max(REL_FLOOR);
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .collect()
}

pub const PEAK_FLOOR: f64 = 1e-4;

pub fn max_rel_error_scaled(analytic: &Tensor, numeric: &Tensor) -> f64 {
    rel_errors_scaled(analytic, numeric).into_iter().fold(0.0, f64::max)
}

/// Summary of a gradient comparison.
#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub entries: usize,
    pub within_tol: usize,
    pub worst: f64,
}

impl GradCheck {
    pub fn new(errors: &[f64], tol: f64) -> GradCheck {
        GradCheck {
            entries: errors.len(),
            within_tol: errors.iter().filter(|&&e| e < tol).count(),
            worst: errors.iter().copied().fold(0.0, f64::max),
        }
    }

    pub fn merge(&mut self, other: &GradCheck) {
        self.entries += other.entries;
        self.within_tol += other.within_tol;
        self.worst = self.worst.max(other.worst);
    }

    pub fn fraction_within(&self) -> f64 {
        if self.entries == 0 {
            1.0
        } else {
            self.within_tol as f64 / self.entries as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{with_precision, Precision};

    #[test]
    fn sum_gives_ones() {
        with_precision(Precision::F64, || {
            let x = Tensor::new([3], vec![0.3, -2.0, 5.0]).unwrap();
            let g = finite_diff_grad(|x| Ok(x.sum()), &x, 1e-5).unwrap();
            for v in g.data() {
                assert!((v - 1.0).abs() < 1e-9);
            }
        });
    }

    #[test]
    fn sum_of_squares() {
        with_precision(Precision::F64, || {
            let x = Tensor::new([2], vec![1.0, 2.0]).unwrap();
            let g = finite_diff_grad(|x| Ok(x.data().iter().map(|v| v * v).sum()), &x, 1e-6)
                .unwrap();
            assert!((g.data()[0] - 2.0).abs() < 1e-8);
            assert!((g.data()[1] - 4.0).abs() < 1e-8);
        });
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::new([1], vec![0.0]).unwrap();
        let r = finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-5);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }
}
