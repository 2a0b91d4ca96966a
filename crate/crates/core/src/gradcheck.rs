//! Central finite-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

/// Denominator floor for the relative error, so entries whose true
/// gradient is ~0 are compared on an absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.entries.iter().filter(|e| !e.passed)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares `backward` against `(f(p+ε) − f(p−ε)) / 2ε` for every scalar
/// of every parameter. `build` must record a scalar loss on the graph it is
/// handed and be deterministic.
pub fn finite_diff_check<F>(
    params: &ParamStore,
    build: F,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(params);
        let loss = build(&mut g)?;
        g.backward(loss)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let loss = build(&mut g)?;
        g.value(loss).item()
    };

    let mut work = params.clone();
    let mut entries = Vec::with_capacity(params.len());
    for id in params.ids() {
        let grad = analytic.get(id).data();
        let mut check = ParamCheck {
            name: params.name(id).to_string(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        for i in 0..grad.len() {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + epsilon;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - epsilon;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = relative_error(grad[i], numeric);
            if err > check.max_rel_error || i == 0 {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = grad[i];
                check.numeric = numeric;
            }
        }
        check.passed = check.max_rel_error < tolerance;
        entries.push(check);
    }
    Ok(GradCheckReport { tolerance, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn square_sum_is_exact_to_high_precision() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![0.5, -1.25, 3.0])).unwrap();
        let report = finite_diff_check(
            &s,
            |g| {
                let w = g.param_by_name("w")?;
                let sq = g.mul(w, w)?;
                Ok(g.sum(sq))
            },
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.max_rel_error() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let report = finite_diff_check(
            &s,
            |g| Ok(g.constant(Tensor::scalar(4.0))),
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed());
        assert_eq!(report.entries[0].analytic, 0.0);
        assert_eq!(report.entries[0].numeric, 0.0);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        // relu's kink sits exactly on the evaluation point, so the central
        // difference (0.5) disagrees with the subgradient convention (0).
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![0.0])).unwrap();
        let report = finite_diff_check(
            &s,
            |g| {
                let w = g.param_by_name("w")?;
                let r = g.relu(w);
                Ok(g.sum(r))
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures().count(), 1);
    }
}
