use crate::error::Result;
use crate::params::Parameters;

/// Outcome of a central finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub scalars_checked: usize,
    /// Tensor name, flat index, analytic and numeric value of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn set_scalar<P: Parameters>(params: &mut P, index: usize, value: f64) {
    let mut offset = 0;
    params.visit_mut(&mut |_, _, data| {
        if (offset..offset + data.len()).contains(&index) {
            data[index - offset] = value;
        }
        offset += data.len();
    });
}

/// Compares the analytic gradient returned by `loss_and_grad` against
/// `(L(θ+h) - L(θ-h)) / 2h` for every scalar parameter.
pub fn finite_difference_check<P, F>(params: &P, mut loss_and_grad: F, h: f64) -> Result<GradCheckReport>
where
    P: Parameters + Clone,
    F: FnMut(&P) -> Result<(f64, P)>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let (_, grads) = loss_and_grad(params)?;
    let analytic = grads.flatten();
    let names: Vec<(String, usize)> = {
        let mut v = Vec::new();
        params.visit(&mut |name, _, data| v.extend((0..data.len()).map(|i| (name.to_string(), i))));
        v
    };
    let original = params.flatten();
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        scalars_checked: original.len(),
        worst: None,
    };
    for (k, &theta) in original.iter().enumerate() {
        set_scalar(&mut probe, k, theta + h);
        let (plus, _) = loss_and_grad(&probe)?;
        set_scalar(&mut probe, k, theta - h);
        let (minus, _) = loss_and_grad(&probe)?;
        set_scalar(&mut probe, k, theta);
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic[k], numeric);
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(err);
            let (name, idx) = names[k].clone();
            report.worst = Some((name, idx, analytic[k], numeric));
        }
    }
    Ok(report)
}
