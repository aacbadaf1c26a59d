//! Stochastic closure: regress cluster parameters on cluster-averaged
//! auxiliary values and drive the model with the fitted scaling functions.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gamma_solver::AffiliationMatrix;
use crate::models::SdeModel;
use crate::series::{ParamVector, UniformTimeSeries};
use crate::sim::{Integrator, OnExit, Scheme};
use crate::subspace::ClusteringResult;

/// `Σᵢ u(tᵢ) γ(tᵢ) / Σᵢ γ(tᵢ)`.
pub fn cluster_weighted_mean(u: &UniformTimeSeries, gamma_k: &[f64]) -> Result<f64> {
    if u.len() != gamma_k.len() {
        return Err(Error::contract("aux series and affiliation row differ in length"));
    }
    let mass: f64 = gamma_k.iter().sum();
    if !(mass > 0.0) {
        return Err(Error::EmptyCluster { cluster: 0 });
    }
    Ok(u.values.iter().zip(gamma_k).map(|(u, g)| u * g).sum::<f64>() / mass)
}

/// Least-squares polynomial coefficients, lowest order first.
pub fn fit_scaling(u_bars: &[f64], theta_component: &[f64], degree: usize) -> Result<Vec<f64>> {
    if u_bars.len() != theta_component.len() {
        return Err(Error::contract("one parameter value per cluster average is required"));
    }
    let k = u_bars.len();
    if k <= degree {
        return Err(Error::RankDeficient { degree });
    }
    let v = DMatrix::from_fn(k, degree + 1, |i, j| u_bars[i].powi(j as i32));
    let svd = v.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-12 * smax) {
        return Err(Error::RankDeficient { degree });
    }
    let coef = svd
        .solve(&DVector::from_column_slice(theta_component), 0.0)
        .map_err(|e| Error::Simulation(e.to_string()))?;
    Ok(coef.iter().copied().collect())
}

/// Horner evaluation of lowest-order-first coefficients.
pub fn eval_poly(coef: &[f64], u: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, c| acc * u + c)
}

/// `θ*_m(tᵢ) = Σ_k θ̄_{k,m} γ_k(tᵢ)`, one row per parameter.
pub fn reconstruct_theta_path(result: &ClusteringResult) -> Vec<Vec<f64>> {
    theta_path(&result.theta, &result.gamma_fine)
}

pub fn theta_path(theta: &[ParamVector], gamma: &AffiliationMatrix) -> Vec<Vec<f64>> {
    let n_params = theta.first().map_or(0, |t| t.len());
    (0..n_params)
        .map(|m| {
            (0..gamma.grid_len())
                .map(|i| (0..theta.len()).map(|k| theta[k][m] * gamma.row(k)[i]).sum())
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClosureConfig {
    /// Polynomial degree per parameter; a single entry applies to all.
    pub degrees: Vec<usize>,
    /// Auxiliary series driving each parameter; a single entry applies to all.
    pub aux_index_per_param: Vec<usize>,
    /// Clusters with `Σγ_k < min_mass · N` are left out of the regression.
    pub min_mass: f64,
}

impl Default for ClosureConfig {
    fn default() -> Self {
        Self {
            degrees: vec![1],
            aux_index_per_param: vec![0],
            min_mass: 1e-3,
        }
    }
}

fn per_param<T: Copy>(v: &[T], m: usize, what: &str) -> Result<T> {
    match v.len() {
        1 => Ok(v[0]),
        _ => v
            .get(m)
            .copied()
            .ok_or_else(|| Error::contract(format!("{what} is missing parameter {m}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRegression {
    pub aux_index: usize,
    pub degree: usize,
    pub coefficients: Vec<f64>,
    /// Residual per cluster used in the fit.
    pub residuals: Vec<f64>,
    /// Range of the cluster averages; evaluation clamps to it.
    pub u_range: (f64, f64),
}

impl ScalingRegression {
    pub fn eval(&self, u: f64) -> f64 {
        eval_poly(&self.coefficients, u.clamp(self.u_range.0, self.u_range.1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosureFit {
    pub model: String,
    /// `u_bars[j][k]`: average of aux series `j` over cluster `k`.
    pub u_bars: Vec<Vec<f64>>,
    pub theta_bars: Vec<ParamVector>,
    /// Clusters that entered the regressions.
    pub clusters_used: Vec<usize>,
    pub regressions: Vec<ScalingRegression>,
    pub aux_index_per_param: Vec<usize>,
}

impl ClosureFit {
    /// Parameters predicted for the auxiliary values `aux`.
    pub fn theta_at(&self, aux: &[f64], out: &mut [f64]) {
        for (o, r) in out.iter_mut().zip(&self.regressions) {
            *o = r.eval(aux[r.aux_index]);
        }
    }
}

/// Cluster averages of every aux series and the per-parameter regressions.
pub fn fit_closure(result: &ClusteringResult, aux: &[UniformTimeSeries], cfg: &ClosureConfig) -> Result<ClosureFit> {
    let k = result.k;
    let n = result.gamma_fine.grid_len();
    if aux.is_empty() || aux.iter().any(|a| a.len() != n) {
        return Err(Error::contract(
            "aux series must be present and match the clustered series",
        ));
    }
    let n_params = result.theta.first().map_or(0, |t| t.len());
    let used: Vec<usize> = (0..k)
        .filter(|&c| {
            let mass: f64 = result.gamma_fine.row(c).iter().sum();
            let keep = mass >= cfg.min_mass * n as f64 && mass > 0.0;
            if !keep {
                warn!("cluster {c} has affiliation mass {mass:.3e}; left out of the regression");
            }
            keep
        })
        .collect();
    let u_bars: Vec<Vec<f64>> = aux
        .iter()
        .map(|a| {
            (0..k)
                .map(|c| match cluster_weighted_mean(a, result.gamma_fine.row(c)) {
                    Ok(v) => Ok(v),
                    Err(Error::EmptyCluster { .. }) => Ok(f64::NAN),
                    Err(e) => Err(e),
                })
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    let mut regressions = Vec::with_capacity(n_params);
    let mut aux_index_per_param = Vec::with_capacity(n_params);
    for m in 0..n_params {
        let j = per_param(&cfg.aux_index_per_param, m, "aux_index_per_param")?;
        let degree = per_param(&cfg.degrees, m, "degrees")?;
        if j >= aux.len() {
            return Err(Error::contract(format!(
                "parameter {m} refers to missing aux series {j}"
            )));
        }
        let us: Vec<f64> = used.iter().map(|&c| u_bars[j][c]).collect();
        let ths: Vec<f64> = used.iter().map(|&c| result.theta[c][m]).collect();
        let coefficients = fit_scaling(&us, &ths, degree)?;
        let residuals = us
            .iter()
            .zip(&ths)
            .map(|(&u, &t)| t - eval_poly(&coefficients, u))
            .collect();
        let lo = us.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = us.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        regressions.push(ScalingRegression {
            aux_index: j,
            degree,
            coefficients,
            residuals,
            u_range: (lo, hi),
        });
        aux_index_per_param.push(j);
    }
    Ok(ClosureFit {
        model: result.model.clone(),
        u_bars,
        theta_bars: result.theta.clone(),
        clusters_used: used,
        regressions,
        aux_index_per_param,
    })
}

/// Integrates the closed model driven by the aux series, with `substeps`
/// internal steps per sample. Aux values are linearly interpolated between
/// samples.
pub fn simulate_closed(
    model: &dyn SdeModel,
    closure: &ClosureFit,
    aux: &[UniformTimeSeries],
    x0: f64,
    substeps: usize,
    seed: u64,
) -> Result<UniformTimeSeries> {
    let first = aux.first().ok_or_else(|| Error::contract("no aux series given"))?;
    if aux.iter().any(|a| a.len() != first.len() || a.dt != first.dt) {
        return Err(Error::contract("aux series must share one grid"));
    }
    if closure.regressions.len() != model.n_params() {
        return Err(Error::contract("closure does not match the model's parameter count"));
    }
    if closure.regressions.iter().any(|r| r.aux_index >= aux.len()) {
        return Err(Error::contract("closure refers to a missing aux series"));
    }
    if substeps == 0 {
        return Err(Error::contract("substeps must be positive"));
    }
    let n = first.len();
    let dt = first.dt;
    let h = dt / substeps as f64;
    let sqrt_h = h.sqrt();
    let bounds = model.param_bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut it = Integrator::new(model, x0, h, Scheme::for_model(model), OnExit::Reflect)?;
    let mut theta = vec![0.0; model.n_params()];
    let mut a = vec![0.0; aux.len()];
    let mut clamped = 0usize;
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        values.push(it.x);
        if i + 1 == n {
            break;
        }
        for s in 0..substeps {
            let w = s as f64 / substeps as f64;
            for (v, series) in a.iter_mut().zip(aux) {
                *v = (1.0 - w) * series.values[i] + w * series.values[i + 1];
            }
            closure.theta_at(&a, &mut theta);
            for (t, &(lo, hi)) in theta.iter_mut().zip(bounds) {
                if *t < lo || *t > hi {
                    clamped += 1;
                    *t = t.clamp(lo, hi);
                }
            }
            let z: f64 = StandardNormal.sample(&mut rng);
            it.advance(&theta, sqrt_h * z)?;
        }
    }
    if clamped > 0 {
        warn!("closure parameters clamped to the model bounds in {clamped} steps");
    }
    if it.reflections > 0 {
        warn!("{} steps reflected at the domain boundary", it.reflections);
    }
    UniformTimeSeries::new(first.t0, dt, values)
}

/// `bins + 1` equally spaced edges.
pub fn uniform_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect()
}

/// Weighted histogram normalized to unit integral; values outside the edges
/// are dropped.
pub fn weighted_histogram(x: &[f64], weights: &[f64], edges: &[f64]) -> Vec<f64> {
    let bins = edges.len() - 1;
    let width = (edges[bins] - edges[0]) / bins as f64;
    let mut h = vec![0.0; bins];
    let mut total = 0.0;
    for (&v, &w) in x.iter().zip(weights) {
        if v < edges[0] || v > edges[bins] {
            continue;
        }
        let b = (((v - edges[0]) / width) as usize).min(bins - 1);
        h[b] += w;
        total += w;
    }
    if total > 0.0 {
        for v in &mut h {
            *v /= total * width;
        }
    }
    h
}

/// Per-cluster histograms of `x` weighted by the affiliations.
pub fn cluster_histograms(x: &[f64], gamma: &AffiliationMatrix, edges: &[f64]) -> Vec<Vec<f64>> {
    gamma
        .rows()
        .iter()
        .map(|row| weighted_histogram(x, row, edges))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::builtin_ou;
    use proptest::prelude::*;

    fn series(v: &[f64]) -> UniformTimeSeries {
        UniformTimeSeries::new(0.0, 1.0, v.to_vec()).unwrap()
    }

    #[test]
    fn weighted_means() {
        let u = series(&[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(cluster_weighted_mean(&u, &[1.0; 4]).unwrap(), 1.5);
        assert_eq!(cluster_weighted_mean(&u, &[1.0, 1.0, 0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cluster_weighted_mean(&series(&[0.0, 4.0]), &[0.25, 0.75]).unwrap(), 3.0);
        assert!(matches!(
            cluster_weighted_mean(&u, &[0.0; 4]),
            Err(Error::EmptyCluster { .. })
        ));
    }

    #[test]
    fn linear_scaling_functions() {
        let u = [0.2, 0.7, 1.0, 1.3, 1.9];
        let c = fit_scaling(&u, &u.map(|v| 2.0 * v), 1).unwrap();
        assert!(c[0].abs() < 1e-10 && (c[1] - 2.0).abs() < 1e-10);
        let c = fit_scaling(&u, &u.map(|v| -4.0 * v + 5.0), 1).unwrap();
        assert!((c[0] - 5.0).abs() < 1e-10 && (c[1] + 4.0).abs() < 1e-10);
    }

    #[test]
    fn interpolation_leaves_no_residual() {
        let u = [0.0, 1.0, 3.0];
        let c = fit_scaling(&u, &[1.0, -2.0, 7.0], 2).unwrap();
        for (x, y) in u.iter().zip([1.0, -2.0, 7.0]) {
            assert!((eval_poly(&c, *x) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_deficiency() {
        assert!(matches!(
            fit_scaling(&[1.0, 2.0], &[0.0, 0.0], 2),
            Err(Error::RankDeficient { degree: 2 })
        ));
        assert!(matches!(
            fit_scaling(&[1.0, 1.0, 1.0], &[0.0; 3], 1),
            Err(Error::RankDeficient { .. })
        ));
    }

    proptest! {
        #[test]
        fn recovers_noiseless_polynomials(
            coef in prop::collection::vec(-3.0..3.0f64, 1..4),
            extra in 0usize..3,
        ) {
            let degree = coef.len() - 1;
            let u: Vec<f64> = (0..=degree + extra).map(|i| -1.0 + 0.7 * i as f64).collect();
            let th: Vec<f64> = u.iter().map(|&x| eval_poly(&coef, x)).collect();
            let fit = fit_scaling(&u, &th, degree).unwrap();
            for (a, b) in fit.iter().zip(&coef) {
                prop_assert!((a - b).abs() < 1e-8);
            }
        }

        #[test]
        fn theta_path_is_bilinear(
            a in prop::collection::vec(-2.0..2.0f64, 2),
            b in prop::collection::vec(-2.0..2.0f64, 2),
            s in -2.0..2.0f64,
            w in prop::collection::vec(0.0..1.0f64, 6),
        ) {
            let g = AffiliationMatrix::new(vec![w.clone(), w.iter().map(|v| 1.0 - v).collect()]).unwrap();
            let ta = vec![ParamVector::from([a[0]]), ParamVector::from([a[1]])];
            let tb = vec![ParamVector::from([b[0]]), ParamVector::from([b[1]])];
            let tc: Vec<ParamVector> = (0..2).map(|k| ParamVector::from([a[k] + s * b[k]])).collect();
            let (pa, pb, pc) = (theta_path(&ta, &g), theta_path(&tb, &g), theta_path(&tc, &g));
            for i in 0..6 {
                prop_assert!((pc[0][i] - (pa[0][i] + s * pb[0][i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hard_affiliations_give_piecewise_constant_paths() {
        let g = AffiliationMatrix::from_labels(&[0, 0, 1, 1, 0], 2).unwrap();
        let th = [ParamVector::from([1.0, 5.0]), ParamVector::from([2.0, 6.0])];
        assert_eq!(
            theta_path(&th, &g),
            vec![vec![1.0, 1.0, 2.0, 2.0, 1.0], vec![5.0, 5.0, 6.0, 6.0, 5.0]]
        );
    }

    fn constant_closure(theta: [f64; 3]) -> ClosureFit {
        ClosureFit {
            model: "ou".into(),
            u_bars: vec![vec![0.0]],
            theta_bars: vec![ParamVector::from(theta)],
            clusters_used: vec![0],
            regressions: theta
                .iter()
                .map(|&t| ScalingRegression {
                    aux_index: 0,
                    degree: 0,
                    coefficients: vec![t],
                    residuals: vec![0.0],
                    u_range: (0.0, 0.0),
                })
                .collect(),
            aux_index_per_param: vec![0; 3],
        }
    }

    #[test]
    fn constant_closure_matches_stationary_simulator() {
        let theta = [1.0, 2.0, 0.5];
        let u = series(&vec![0.3; 2000]);
        let closed = simulate_closed(&builtin_ou(), &constant_closure(theta), &[u], 0.5, 4, 9).unwrap();
        let direct = crate::sim::simulate_stationary(&builtin_ou(), &theta, 0.5, 2000, 1.0, 4, 9).unwrap();
        assert_eq!(closed.values, direct.values);
    }

    #[test]
    fn clamping_and_determinism() {
        let reg = ScalingRegression {
            aux_index: 0,
            degree: 1,
            coefficients: vec![0.0, 2.0],
            residuals: vec![],
            u_range: (0.5, 1.5),
        };
        assert_eq!(reg.eval(3.0), 3.0);
        assert_eq!(reg.eval(0.0), 1.0);
        let u = series(&(0..300).map(|i| (i as f64 / 30.0).sin()).collect::<Vec<_>>());
        let c = constant_closure([1.0, 2.0, 0.5]);
        let a = simulate_closed(&builtin_ou(), &c, std::slice::from_ref(&u), 0.0, 3, 1).unwrap();
        let b = simulate_closed(&builtin_ou(), &c, std::slice::from_ref(&u), 0.0, 3, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn histogram_integrates_to_one() {
        let edges = uniform_edges(0.0, 1.0, 4);
        let h = weighted_histogram(&[0.1, 0.3, 0.35, 0.9, 2.0], &[1.0, 1.0, 0.0, 2.0, 5.0], &edges);
        assert_eq!(h, vec![1.0, 1.0, 0.0, 2.0]);
        assert!((h.iter().sum::<f64>() * 0.25 - 1.0).abs() < 1e-15);
    }
}
