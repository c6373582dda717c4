use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Magnitude below which gradient components are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// Worst disagreement between tape gradients and central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// (parameter index, element index) of the worst element.
    pub worst: (usize, usize),
    pub evaluations: usize,
}

/// `|a - b| / max(|a|, |b|, RELATIVE_FLOOR)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Compares `analytic` gradients against `(f(θ+h) - f(θ-h)) / 2h`, element by
/// element over every parameter tensor.
pub fn finite_difference_check<F>(
    f: F,
    params: &[Tensor],
    analytic: &[Vec<f64>],
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, t)| (0..t.numel()).map(move |ei| (pi, ei)))
        .collect();
    finite_difference_check_at(f, params, analytic, h, &coords)
}

/// As [`finite_difference_check`], restricted to `(parameter, element)` pairs.
pub fn finite_difference_check_at<F>(
    f: F,
    params: &[Tensor],
    analytic: &[Vec<f64>],
    h: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    if analytic.len() != params.len() {
        return Err(Error::dim("finite_difference_check", &[params.len()], &[analytic.len()]));
    }
    for (pi, grad) in analytic.iter().enumerate() {
        if grad.len() != params[pi].numel() {
            return Err(Error::dim("finite_difference_check", params[pi].shape(), &[grad.len()]));
        }
    }
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        evaluations: 0,
    };
    for &(pi, ei) in coords {
        if pi >= params.len() || ei >= params[pi].numel() {
            return Err(Error::Index {
                index: ei,
                len: params.get(pi).map_or(0, Tensor::numel),
            });
        }
        let orig = work[pi].data()[ei];
        work[pi].data_mut()[ei] = orig + h;
        let plus = f(&work)?;
        work[pi].data_mut()[ei] = orig - h;
        let minus = f(&work)?;
        work[pi].data_mut()[ei] = orig;
        report.evaluations += 2;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "objective not finite at parameter {pi} element {ei}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic[pi][ei], numeric);
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst = (pi, ei);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    #[test]
    fn quadratic_is_exact() {
        let theta = Tensor::new(vec![1], vec![3.0]).unwrap().with_requires_grad(true);
        let mut tape = Tape::new();
        let v = tape.input(&theta);
        let sq = tape.mul(v, v).unwrap();
        tape.backward(sq).unwrap();
        let g = tape.grad(v).unwrap().to_vec();
        assert_eq!(g, vec![6.0]);
        let report = finite_difference_check(
            |p| Ok(p[0].data()[0] * p[0].data()[0]),
            std::slice::from_ref(&theta),
            &[g],
            1e-4,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-7, "{report:?}");
    }

    #[test]
    fn rejects_non_finite_objective() {
        let theta = Tensor::new(vec![1], vec![0.0]).unwrap();
        let err = finite_difference_check(|_| Ok(f64::NAN), &[theta], &[vec![0.0]], 1e-4);
        assert!(matches!(err, Err(Error::Numeric(_))));
    }

    #[test]
    fn rejects_non_positive_step() {
        let theta = Tensor::new(vec![1], vec![0.0]).unwrap();
        assert!(finite_difference_check(|_| Ok(0.0), &[theta], &[vec![0.0]], 0.0).is_err());
    }
}
