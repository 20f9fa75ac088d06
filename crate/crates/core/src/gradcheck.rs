//! Central finite-difference checks for analytic gradients.

/// Relative tolerance for agreement between analytic and numeric gradients.
pub const RTOL: f64 = 1e-4;
/// Absolute floor so that exact zeros compare against rounding noise.
pub const ATOL: f64 = 1e-8;

/// Step used for coordinate `x`.
pub fn step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = step(x[i]);
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Worst violation found by [`check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn agrees(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= RTOL * analytic.abs().max(numeric.abs()) + ATOL
}

/// Compares `analytic` against central differences of `f`; returns the
/// first disagreeing coordinate, if any.
pub fn check(f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> Option<Mismatch> {
    assert_eq!(x.len(), analytic.len(), "gradient length must match the input");
    let numeric = numeric_gradient(f, x);
    numeric
        .iter()
        .zip(analytic)
        .enumerate()
        .find(|(_, (n, a))| !agrees(**a, **n))
        .map(|(index, (n, a))| Mismatch {
            index,
            analytic: *a,
            numeric: *n,
        })
}

/// Relative disagreement between the forward and backward one-sided
/// differences above which a stencil is taken to straddle a kink. Smooth
/// functions disagree only by `h·|f''|`, orders of magnitude below this.
pub const KINK_RATIO: f64 = 1e-2;

/// Outcome of [`check_away_from_kinks`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KinkAwareCheck {
    pub mismatch: Option<Mismatch>,
    /// Coordinates whose stencil straddles a kink and were not compared.
    pub skipped: Vec<usize>,
}

/// Like [`check`], but coordinates whose central-difference stencil crosses
/// a non-differentiable point (an absolute value or bilinear-cell boundary
/// switching inside `[x - h, x + h]`) are skipped and listed instead of
/// compared.
pub fn check_away_from_kinks(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> KinkAwareCheck {
    assert_eq!(x.len(), analytic.len(), "gradient length must match the input");
    let center = f(x);
    let mut probe = x.to_vec();
    let mut out = KinkAwareCheck::default();
    for i in 0..x.len() {
        let h = step(x[i]);
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        let (forward, backward) = ((up - center) / h, (center - down) / h);
        if (forward - backward).abs() > KINK_RATIO * forward.abs().max(backward.abs()) + ATOL {
            out.skipped.push(i);
            continue;
        }
        let numeric = (up - down) / (2.0 * h);
        if out.mismatch.is_none() && !agrees(analytic[i], numeric) {
            out.mismatch = Some(Mismatch {
                index: i,
                analytic: analytic[i],
                numeric,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let x = [1.5, -2.0, 0.0];
        let f = |p: &[f64]| p[0] * p[0] + 3.0 * p[1] * p[2] + p[2].powi(3);
        let g = [3.0, 0.0, -6.0];
        assert_eq!(check(f, &x, &g), None);
        assert!(check(f, &x, &[3.0, 0.0, -5.9]).is_some());
    }

    #[test]
    fn kinks_are_skipped_not_compared() {
        // |x - 1e-6| has its kink inside the stencil at x = 0.
        let f = |p: &[f64]| (p[0] - 1e-6).abs() + p[1] * p[1];
        let r = check_away_from_kinks(f, &[0.0, 2.0], &[123.0, 4.0]);
        assert_eq!(r.skipped, vec![0]);
        assert_eq!(r.mismatch, None);
        let r = check_away_from_kinks(f, &[0.5, 2.0], &[1.0, 4.5]);
        assert!(r.skipped.is_empty());
        assert_eq!(r.mismatch.map(|m| m.index), Some(1));
    }
}
