//! Central finite-difference checks of analytic gradients along random
//! parameter directions.

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Matrix;
use crate::params::{ParamId, ParamStore};
use crate::rng::seeded;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub directions: usize,
    pub max_rel_error: f64,
    /// `(parameter name, analytic, numeric)` of the worst direction.
    pub worst: (String, f64, f64),
}

/// Relative error with a floor so that two near-zero values agree.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Checks `grads` (one per id) against `loss` along `directions` random unit
/// directions. Direction `k` perturbs only parameter `ids[k % ids.len()]`, so
/// every parameter array is exercised.
pub fn check_directions(
    store: &ParamStore,
    ids: &[ParamId],
    grads: &[Matrix],
    loss: impl Fn(&ParamStore) -> f64,
    directions: usize,
    eps: f64,
    seed: u64,
) -> GradCheckReport {
    assert_eq!(ids.len(), grads.len(), "one gradient per parameter");
    let mut rng = seeded(seed);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        directions: 0,
        max_rel_error: 0.0,
        worst: (String::new(), 0.0, 0.0),
    };
    for k in 0..directions.max(ids.len()) {
        let j = k % ids.len();
        let id = ids[j];
        let base = store.get(id);
        let mut d = Matrix::from_shape_fn(base.dim(), |_| StandardNormal.sample(&mut rng));
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        d /= norm;
        let analytic = (&grads[j] * &d).sum();
        work.get_mut(id).assign(&(base + &(&d * eps)));
        let plus = loss(&work);
        work.get_mut(id).assign(&(base - &(&d * eps)));
        let minus = loss(&work);
        work.get_mut(id).assign(base);
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic, numeric);
        if err > report.max_rel_error || report.directions == 0 {
            report.max_rel_error = report.max_rel_error.max(err);
            if err >= report.max_rel_error {
                report.worst = (store.name(id).to_string(), analytic, numeric);
            }
        }
        report.directions += 1;
    }
    report
}
