/// Central difference `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` at coordinate `i`.
pub fn central_difference<F>(f: &mut F, params: &[f64], i: usize, eps: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = params.to_vec();
    probe[i] = params[i] + eps;
    let up = f(&probe);
    probe[i] = params[i] - eps;
    let down = f(&probe);
    (up - down) / (2.0 * eps)
}

/// Largest relative disagreement between `analytic` and central differences
/// of `f` over the `probes` coordinates.
///
/// The error at coordinate `i` is
/// `|analytic[i] - fd| / max(1e-12, |fd|)`.
pub fn finite_difference_check<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    probes: &[usize],
    eps: f64,
) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    probes
        .iter()
        .map(|&i| {
            let fd = central_difference(&mut f, params, i, eps);
            (analytic[i] - fd).abs() / fd.abs().max(1e-12)
        })
        .fold(0.0, f64::max)
}
