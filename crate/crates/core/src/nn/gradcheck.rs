//! Central-difference gradient checks against a [`ParameterSet`].

use rand::seq::index::sample;
use rand::Rng;

use super::params::ParameterSet;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat coordinate with the worst error.
    pub worst: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a - n| / max(|a|, |n|, 1e-7)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

/// Compares the gradients currently stored in `params` with central
/// differences of `loss` at up to `n_coords` random coordinates. `loss` must
/// not touch the gradient buffers. Values are restored afterwards.
pub fn check_gradients<F, R>(
    params: &mut ParameterSet,
    mut loss: F,
    n_coords: usize,
    step: f64,
    rng: &mut R,
) -> GradCheckReport
where
    F: FnMut(&ParameterSet) -> f64,
    R: Rng + ?Sized,
{
    let total = params.num_values();
    let n = n_coords.min(total);
    let mut report = GradCheckReport {
        checked: n,
        max_rel_error: 0.0,
        worst: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for flat in sample(rng, total, n) {
        let (pi, off) = params.locate(flat);
        let orig = params.params[pi].value[off];
        params.params[pi].value[off] = orig + step;
        let up = loss(params);
        params.params[pi].value[off] = orig - step;
        let down = loss(params);
        params.params[pi].value[off] = orig;
        let numeric = (up - down) / (2.0 * step);
        let analytic = params.params[pi].grad[off];
        let err = relative_error(analytic, numeric);
        if err > report.max_rel_error || report.max_rel_error.is_nan() {
            report.max_rel_error = err;
            report.worst = flat;
            report.analytic = analytic;
            report.numeric = numeric;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Param;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn detects_right_and_wrong_gradients() {
        let mut ps = ParameterSet::default();
        let mut p = Param::zeros("w", 1, 3);
        p.value = vec![0.5, -1.0, 2.0];
        ps.add(p);
        let f = |ps: &ParameterSet| ps.params[0].value.iter().map(|x| x * x * x).sum::<f64>();
        let g: Vec<f64> = ps.params[0].value.iter().map(|x| 3.0 * x * x).collect();
        ps.params[0].grad = g;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ok = check_gradients(&mut ps, f, 3, 1e-5, &mut rng);
        assert!(ok.max_rel_error < 1e-8);
        assert_eq!(ps.params[0].value, vec![0.5, -1.0, 2.0]);
        ps.params[0].grad[1] = 0.0;
        let bad = check_gradients(&mut ps, f, 3, 1e-5, &mut rng);
        assert_eq!(bad.worst, 1);
        assert!(bad.max_rel_error > 0.9);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 1e-2).abs() < 1e-12);
    }
}
