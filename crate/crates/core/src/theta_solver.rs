//! Per-cluster parameter estimation: minimize `Σᵢ wᵢ f(tᵢ; θ)` over the
//! model's parameter box with a global random search followed by a local
//! conjugate-direction polish.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{validate_series, weighted_objective};
use crate::models::SdeModel;
use crate::optim::{crs2_lm, powell, Bounds, CrsConfig, PowellConfig};
use crate::series::{ParamVector, UniformTimeSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThetaSolverConfig {
    /// Trial evaluations of the global search, not counting the population.
    pub global_evals: usize,
    pub local_evals: usize,
    /// Random population of a cold start.
    pub population: usize,
    /// Random population when a previous estimate is available.
    pub warm_population: usize,
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for ThetaSolverConfig {
    fn default() -> Self {
        Self {
            global_evals: 300,
            local_evals: 300,
            population: 3000,
            warm_population: 100,
            rel_tol: 1e-10,
            seed: 0,
        }
    }
}

impl ThetaSolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.global_evals == 0 || self.local_evals == 0 || self.population == 0 {
            return Err(Error::contract("theta solver counts must be positive"));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::contract("theta solver rel_tol must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ThetaFit {
    pub theta: ParamVector,
    pub objective: f64,
    pub evaluations: usize,
    /// Best objective after each evaluation past the initial population.
    pub trace: Vec<f64>,
}

/// Minimizes the `weights`-weighted fitness over θ. Entry `i` weights the
/// transition from `tᵢ` to `tᵢ₊₁`; the last entry is ignored. With `warm`
/// the previous estimate joins a smaller random population.
pub fn fit_theta(
    model: &dyn SdeModel,
    series: &UniformTimeSeries,
    weights: &[f64],
    cfg: &ThetaSolverConfig,
    warm: Option<&[f64]>,
) -> Result<ThetaFit> {
    cfg.validate()?;
    if weights.len() != series.len() {
        return Err(Error::contract("weight row does not match the series length"));
    }
    if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(Error::contract("weights must lie in [0, 1]"));
    }
    if weights[..weights.len() - 1].iter().all(|&w| w == 0.0) {
        return Err(Error::EmptyCluster { cluster: 0 });
    }
    validate_series(model, series)?;
    if let Some(w) = warm {
        model.check_params(w)?;
    }

    let bounds = Bounds::new(model.param_bounds());
    let objective = |th: &[f64]| weighted_objective(model, series, th, weights).unwrap_or(f64::INFINITY);
    let seeds: Vec<Vec<f64>> = warm.map(|w| vec![w.to_vec()]).unwrap_or_default();
    let population = if warm.is_some() {
        cfg.warm_population.max(1)
    } else {
        cfg.population
    };
    let global = crs2_lm(
        &objective,
        &bounds,
        &seeds,
        &CrsConfig {
            population,
            max_evals: cfg.global_evals,
            rel_tol: cfg.rel_tol,
            seed: cfg.seed,
        },
    );
    let mut local_obj = objective;
    let local = powell(
        &mut local_obj,
        &bounds,
        &global.x,
        global.f,
        &PowellConfig {
            max_evals: cfg.local_evals,
            rel_tol: cfg.rel_tol,
        },
    );
    let (theta, value) = if local.f < global.f {
        (local.x, local.f)
    } else {
        (global.x, global.f)
    };
    if !value.is_finite() {
        return Err(Error::Simulation(format!(
            "no finite objective value found for model `{}`",
            model.id()
        )));
    }
    let mut trace = global.trace;
    trace.extend(local.trace.iter().map(|v| v.min(global.f)));
    Ok(ThetaFit {
        theta: ParamVector(theta),
        objective: value,
        evaluations: global.evals + local.evals,
        trace,
    })
}

/// Cold-start estimate for one affiliation row; returns `θ*` and the
/// achieved objective `Σᵢ γ(tᵢ) f(tᵢ; θ*)`.
pub fn minimize_theta(
    model: &dyn SdeModel,
    series: &UniformTimeSeries,
    gamma_row: &[f64],
    cfg: &ThetaSolverConfig,
) -> Result<(ParamVector, f64)> {
    fit_theta(model, series, gamma_row, cfg, None).map(|fit| (fit.theta, fit.objective))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::neg_log_likelihood;
    use crate::models::builtin_ou;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Exact OU sampling through the Gaussian transition law.
    fn ou_path(theta: [f64; 3], dt: f64, n: usize, seed: u64) -> UniformTimeSeries {
        let [a, b, s] = theta;
        let e = (-b * dt).exp();
        let sd = (s * s * (1.0 - e * e) / (2.0 * b)).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = a / b;
        let values = (0..n)
            .map(|_| {
                let cur = x;
                let z: f64 = StandardNormal.sample(&mut rng);
                x = x * e + a / b * (1.0 - e) + sd * z;
                cur
            })
            .collect();
        UniformTimeSeries::new(0.0, dt, values).unwrap()
    }

    fn small_cfg() -> ThetaSolverConfig {
        ThetaSolverConfig {
            population: 300,
            ..Default::default()
        }
    }

    #[test]
    fn recovers_ou_parameters() {
        let s = ou_path([2.0, 1.0, 1.0], 0.1, 4096, 1);
        let (th, obj) = minimize_theta(&builtin_ou(), &s, &vec![1.0; s.len()], &small_cfg()).unwrap();
        // Asymptotic standard errors for N·Δt ≈ 410: θ₂ ~ 0.07, θ₁ ~ 0.15.
        assert!((th[0] - 2.0).abs() < 0.5, "{th:?}");
        assert!((th[1] - 1.0).abs() < 0.25, "{th:?}");
        assert!((th[2] - 1.0).abs() < 0.05, "{th:?}");
        let direct = neg_log_likelihood(&builtin_ou(), &s, &th).unwrap();
        assert!((obj - direct).abs() < 1e-9 * direct.abs());
    }

    #[test]
    fn deterministic_for_equal_seeds() {
        let s = ou_path([0.5, 2.0, 0.7], 0.1, 500, 2);
        let w = vec![1.0; s.len()];
        let a = minimize_theta(&builtin_ou(), &s, &w, &small_cfg()).unwrap();
        let b = minimize_theta(&builtin_ou(), &s, &w, &small_cfg()).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.to_bits(), b.1.to_bits());
    }

    #[test]
    fn trace_is_monotone() {
        let s = ou_path([0.5, 2.0, 0.7], 0.1, 500, 3);
        let fit = fit_theta(&builtin_ou(), &s, &vec![1.0; s.len()], &small_cfg(), None).unwrap();
        assert!(fit.trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*fit.trace.last().unwrap(), fit.objective);
    }

    #[test]
    fn warm_start_keeps_quality() {
        let s = ou_path([2.0, 1.0, 1.0], 0.1, 2000, 4);
        let w = vec![1.0; s.len()];
        let cold = fit_theta(&builtin_ou(), &s, &w, &small_cfg(), None).unwrap();
        let warm = fit_theta(&builtin_ou(), &s, &w, &small_cfg(), Some(&cold.theta)).unwrap();
        assert!(warm.objective <= cold.objective + 1e-9);
    }

    #[test]
    fn empty_weights_are_rejected() {
        let s = ou_path([2.0, 1.0, 1.0], 0.1, 50, 5);
        let err = minimize_theta(&builtin_ou(), &s, &vec![0.0; 50], &small_cfg()).unwrap_err();
        assert!(matches!(err, Error::EmptyCluster { .. }));
    }
}
