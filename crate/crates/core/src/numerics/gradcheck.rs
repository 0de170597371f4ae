use super::tensor::Tensor;
use crate::error::Result;

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst `|a − n| / max(|a|, |n|, 1e-8)` over all coordinates.
    pub max_rel_error: f64,
    /// Coordinate where the worst error occurred.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Central-difference check of `f`, which returns `(value, gradient)` at a point.
///
/// Each coordinate `i` is compared against `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    let (_, analytic) = f(x)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        // Divide by the step actually representable around `orig`.
        let up = orig + h;
        let down = orig - h;
        probe.data_mut()[i] = up;
        let (plus, _) = f(&probe)?;
        probe.data_mut()[i] = down;
        let (minus, _) = f(&probe)?;
        probe.data_mut()[i] = orig;

        let numeric = (plus - minus) / (up - down);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        if rel > report.max_rel_error || rel.is_nan() {
            report = GradCheckReport {
                max_rel_error: if rel.is_nan() { f64::INFINITY } else { rel },
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops::{sigmoid_scalar, softplus_scalar};
    use crate::numerics::RandomState;

    #[test]
    fn sum_of_squares_is_exact() {
        // Roundoff in `f` is ~ulp(f)/2h, so keep |x| away from zero.
        let mut rng = RandomState::new(0);
        let x = Tensor::vector(
            (0..4)
                .map(|_| {
                    let s = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                    s * rng.uniform_range(0.5, 2.0)
                })
                .collect(),
        );
        let r = grad_check(
            |x| Ok((x.data().iter().map(|v| v * v).sum(), x.scale(2.0))),
            &x,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn softplus_sum() {
        let mut rng = RandomState::new(1);
        let x = Tensor::vector((0..10).map(|_| 3.0 * rng.normal()).collect());
        let r = grad_check(
            |x| {
                Ok((
                    x.data().iter().map(|&v| softplus_scalar(v)).sum(),
                    x.map(sigmoid_scalar),
                ))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let r = grad_check(|x| Ok((x.sum(), x.scale(2.0))), &x, 1e-6).unwrap();
        assert!(r.max_rel_error > 0.4);
    }
}
