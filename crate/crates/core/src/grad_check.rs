//! Central finite-difference verification of autodiff gradients.

use crate::tensor::{Result, Tensor, TensorError};

/// One checked coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|analytic - numeric| / max(1, |analytic|)`
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
    pub max_rel_error: f64,
}

/// Relative error with a `max(1, |analytic|)` denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Checks every coordinate of every parameter of `f`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.numel()).map(move |i| (p, i)))
        .collect();
    grad_check_split(&f, |ps| f(ps).map(|t| t.item()), params, &coords, h)
}

/// Compares the autodiff gradient of `grad_f` against central differences
/// of `value_f` at the given `(param, index)` coordinates.
///
/// The two closures usually coincide. They differ when the autodiff side
/// uses a surrogate gradient whose finite-difference oracle is a distinct
/// smooth function with the same value at the evaluation point.
pub fn grad_check_split<F, G>(
    grad_f: F,
    value_f: G,
    params: &[Tensor],
    coords: &[(usize, usize)],
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
    G: Fn(&[Tensor]) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(TensorError::Contract(format!("grad_check: step must be positive, got {h}")));
    }
    let leaves: Vec<Tensor> = params.iter().map(|p| p.with_requires_grad(true)).collect();
    let loss = grad_f(&leaves)?;
    loss.backward()?;
    let grads: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let mut checks = Vec::with_capacity(coords.len());
    let mut max_rel_error: f64 = 0.0;
    for &(p, i) in coords {
        if p >= params.len() || i >= params[p].numel() {
            return Err(TensorError::Contract(format!("grad_check: coordinate ({p}, {i}) out of range")));
        }
        let shifted = |delta: f64| -> Result<f64> {
            let perturbed: Vec<Tensor> = params
                .iter()
                .enumerate()
                .map(|(q, t)| {
                    if q != p {
                        return Ok(t.detach());
                    }
                    let mut values = t.to_vec();
                    values[i] += delta;
                    Tensor::new(values, t.shape())
                })
                .collect::<Result<_>>()?;
            value_f(&perturbed)
        };
        let numeric = (shifted(h)? - shifted(-h)?) / (2.0 * h);
        let analytic = grads[p][i];
        let rel_error = relative_error(analytic, numeric);
        max_rel_error = max_rel_error.max(rel_error);
        checks.push(CoordCheck {
            param: p,
            index: i,
            analytic,
            numeric,
            rel_error,
        });
    }
    Ok(GradCheckReport {
        coords: checks,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_exact() {
        let x = Tensor::new(vec![0.7], &[]).unwrap();
        let report = grad_check(|p| Ok(p[0].sum()), &[x], 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-10);
    }

    #[test]
    fn cube_matches_to_second_order() {
        let x = Tensor::new(vec![2.0], &[1]).unwrap();
        let h = 1e-4;
        let report = grad_check(|p| Ok(p[0].square().mul(&p[0])?.sum()), &[x], h).unwrap();
        let c = &report.coords[0];
        assert_eq!(c.analytic, 12.0);
        // central difference of x^3 overshoots by exactly h^2
        assert!((c.numeric - 12.0 - h * h).abs() < 1e-8);
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::new(vec![1.0], &[1]).unwrap();
        assert!(grad_check(|p| Ok(p[0].sum()), &[x], 0.0).is_err());
    }
}
