//! Central finite-difference verification of analytic gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Bound, Graph, NumericsError, ParamStore, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Check at most this many coordinates, sampled without replacement.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error scaled by this value.
    pub denom_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { epsilon: 1e-5, tolerance: 1e-5, max_coords: None, seed: 0, denom_floor: 1e-3 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct WorstCoordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub worst: Option<WorstCoordinate>,
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradient of the scalar built by `f` against
/// `(f(theta + eps e) - f(theta - eps e)) / 2 eps` on trainable coordinates.
/// The store is restored to its original values before returning.
pub fn grad_check<B>(store: &mut ParamStore<f64>, cfg: &GradCheckConfig, mut f: B) -> Result<GradCheckReport, NumericsError>
where
    B: FnMut(&mut Graph<f64>, &Bound) -> Result<Var, NumericsError>,
{
    let analytic = {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let root = f(&mut g, &bound)?;
        let grads = g.backward(root)?;
        store
            .ids()
            .map(|id| grads.get_or_zeros(bound.var(id), store.value(id).shape()))
            .collect::<Vec<_>>()
    };

    let mut eval = |store: &ParamStore<f64>| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let root = f(&mut g, &bound)?;
        g.value(root).item()
    };

    let coords: Vec<(usize, usize)> = store
        .trainable_ids()
        .flat_map(|id| (0..store.value(id).numel()).map(move |i| (id.index(), i)))
        .collect();
    let chosen: Vec<(usize, usize)> = match cfg.max_coords {
        Some(k) if k < coords.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut picks = index::sample(&mut rng, coords.len(), k).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|i| coords[i]).collect()
        }
        _ => coords,
    };

    let ids: Vec<_> = store.ids().collect();
    let mut report = GradCheckReport {
        coords_checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        tolerance: cfg.tolerance,
        passed: true,
        worst: None,
    };
    for (p, i) in chosen {
        let id = ids[p];
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = orig + cfg.epsilon;
        let plus = eval(store);
        store.value_mut(id).data_mut()[i] = orig - cfg.epsilon;
        let minus = eval(store);
        store.value_mut(id).data_mut()[i] = orig;
        let numeric = (plus? - minus?) / (2.0 * cfg.epsilon);
        let a = analytic[p].data()[i];
        let rel = relative_error(a, numeric, cfg.denom_floor);
        report.coords_checked += 1;
        report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst =
                Some(WorstCoordinate { param: store.entry(id).name.clone(), index: i, analytic: a, numeric });
        }
    }
    report.passed = report.max_rel_error < cfg.tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{ParamGroup, ParamKind, Tensor};

    fn store_with(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.register("theta", Tensor::new(vec![values.len()], values.to_vec()).unwrap(), ParamGroup::Head, ParamKind::Trainable)
            .unwrap();
        s
    }

    #[test]
    fn squared_norm_matches_central_differences() {
        let mut s = store_with(&[0.3, -1.2, 2.5, 0.0]);
        let cfg = GradCheckConfig { tolerance: 1e-9, ..Default::default() };
        let id = s_id();
        let report = grad_check(&mut s, &cfg, |g, b| {
            let th = b.var(id);
            let sq = g.mul(th, th)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.coords_checked, 4);
        assert_eq!(s.value(s_id()).data(), &[0.3, -1.2, 2.5, 0.0]);
    }

    fn s_id() -> crate::numerics::ParamId {
        crate::numerics::ParamId(0)
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let mut s = store_with(&[1.0, 2.0]);
        let report = grad_check(&mut s, &GradCheckConfig::default(), |g, _| Ok(g.constant(Tensor::scalar(3.0)))).unwrap();
        assert_eq!(report.max_abs_error, 0.0);
        assert!(report.passed);
    }

    #[test]
    fn relative_error_uses_floor_for_tiny_gradients() {
        assert!(relative_error(1.0, 1.1, 1e-3) > 1e-5);
        assert!(relative_error(1e-9, 0.0, 1e-3) < 1e-5);
    }
}
