//! Alternating minimization of the regularized clustering functional:
//! parameters on the data grid, affiliations on the coarse FEM grid.

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gamma_solver::{
    assemble_stiffness, interpolate_gamma, reduce_fitness, restrict_gamma, solve_qp, AffiliationMatrix, FemGrid,
    QpConfig, ReducedFitness,
};
use crate::likelihood::{fitness_matrix, validate_series};
use crate::models::SdeModel;
use crate::series::{ParamVector, UniformTimeSeries};
use crate::theta_solver::{fit_theta, ThetaSolverConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubspaceConfig {
    /// Coarse-grid reduction factor.
    pub alpha: f64,
    pub max_iter: usize,
    /// Relative change of the functional that ends the iteration.
    pub tol: f64,
    /// Independent random starts of a cold run; the lowest functional wins.
    pub n_restarts: usize,
    pub seed: u64,
    pub theta_solver: ThetaSolverConfig,
    pub qp: QpConfig,
}

impl Default for SubspaceConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0 / 3.0,
            max_iter: 100,
            tol: 1e-8,
            n_restarts: 3,
            seed: 0,
            theta_solver: ThetaSolverConfig::default(),
            qp: QpConfig::default(),
        }
    }
}

impl SubspaceConfig {
    /// Solver settings used for the built-in examples: the double-well runs
    /// use a coarser affiliation grid, a smaller population and more
    /// evaluations.
    pub fn for_model(id: &str) -> Self {
        let mut cfg = Self::default();
        if id == "doublewell" {
            cfg.alpha = 0.1;
            cfg.theta_solver.global_evals = 500;
            cfg.theta_solver.local_evals = 500;
            cfg.theta_solver.population = 1000;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringResult {
    pub model: String,
    pub k: usize,
    pub eps2: f64,
    pub seed: u64,
    pub alpha: f64,
    pub t0: f64,
    pub dt: f64,
    pub theta: Vec<ParamVector>,
    /// Functional after every affiliation step.
    pub functional_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Floored transition densities per cluster in the final fitness rows.
    pub floored_transitions: Vec<usize>,
    pub gamma_coarse: AffiliationMatrix,
    pub gamma_fine: AffiliationMatrix,
}

impl ClusteringResult {
    pub fn functional(&self) -> f64 {
        self.functional_trace.last().copied().unwrap_or(f64::INFINITY)
    }

    /// Time each cluster is active, `νₖ = Σᵢ γₖ(tᵢ) Δt`.
    pub fn activity(&self) -> Vec<f64> {
        self.gamma_fine
            .rows()
            .iter()
            .map(|r| r.iter().sum::<f64>() * self.dt)
            .collect()
    }
}

/// Where a run starts from.
#[derive(Debug, Clone)]
pub enum Start {
    /// Random affiliations drawn from the given seed.
    Random(u64),
    /// Fine-grid affiliations; parameters are estimated from scratch.
    Gamma(AffiliationMatrix),
    /// A previous solution: coarse affiliations and parameters.
    Warm {
        theta: Vec<ParamVector>,
        gamma_coarse: AffiliationMatrix,
    },
}

/// Random feasible affiliations: a hard assignment from a uniform K-state
/// Markov chain with mean dwell `n/(10K)`, smoothed by a width-5 moving
/// average.
pub fn initial_gamma(k: usize, n: usize, seed: u64) -> AffiliationMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let switch = (10.0 * k as f64 / n as f64).min(1.0);
    let mut state = rng.random_range(0..k);
    let labels: Vec<usize> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < switch {
                state = rng.random_range(0..k);
            }
            state
        })
        .collect();
    let mut rows = vec![vec![0.0; n]; k];
    #[allow(clippy::needless_range_loop)]
    for i in 0..n {
        let lo = i.saturating_sub(2);
        let hi = (i + 2).min(n - 1);
        let w = 1.0 / (hi - lo + 1) as f64;
        for &l in &labels[lo..=hi] {
            rows[l][i] += w;
        }
    }
    AffiliationMatrix::new(rows).expect("moving average of labels is feasible")
}

/// Transition weights matching the trapezoid reduction: the wrap entry's
/// weight is folded into the first transition.
fn transition_weights(gamma_row: &[f64]) -> Vec<f64> {
    let n = gamma_row.len();
    let mut w = gamma_row.to_vec();
    w[0] = 0.5 * (gamma_row[0] + gamma_row[n - 1]);
    w[n - 1] = 0.0;
    w
}

fn mix_seed(seed: u64, restart: u64, iteration: u64) -> u64 {
    let mut z = seed ^ restart.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ iteration.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_inputs(
    model: &dyn SdeModel,
    series: &UniformTimeSeries,
    k: usize,
    eps2: f64,
    cfg: &SubspaceConfig,
) -> Result<()> {
    if k == 0 {
        return Err(Error::contract("need at least one cluster"));
    }
    if !(eps2 >= 0.0) {
        return Err(Error::contract(format!("eps2 must be nonnegative, got {eps2}")));
    }
    if series.len() < 10 * k {
        return Err(Error::contract(format!(
            "{} samples are too few for {k} clusters (need {})",
            series.len(),
            10 * k
        )));
    }
    if cfg.max_iter == 0 || !(cfg.tol > 0.0) {
        return Err(Error::contract("max_iter and tol must be positive"));
    }
    cfg.theta_solver.validate()?;
    validate_series(model, series)
}

/// One alternating run from a given start.
pub fn run_from(
    model: &dyn SdeModel,
    series: &UniformTimeSeries,
    k: usize,
    eps2: f64,
    cfg: &SubspaceConfig,
    start: Start,
    restart: u64,
) -> Result<ClusteringResult> {
    check_inputs(model, series, k, eps2, cfg)?;
    let n = series.len();
    let grid = FemGrid::new(n, cfg.alpha, series.dt)?;
    let stiffness = assemble_stiffness(k, grid.n_coarse);

    let (mut theta, mut gamma_coarse): (Vec<Option<ParamVector>>, AffiliationMatrix) = match start {
        Start::Random(seed) => (vec![None; k], restrict_gamma(&initial_gamma(k, n, seed), &grid)),
        Start::Gamma(g) => {
            if g.n_clusters() != k || g.grid_len() != n {
                return Err(Error::contract("initial affiliations do not match K and N"));
            }
            (vec![None; k], restrict_gamma(&g, &grid))
        }
        Start::Warm { theta, gamma_coarse } => {
            if theta.len() != k || gamma_coarse.n_clusters() != k || gamma_coarse.grid_len() != grid.n_coarse {
                return Err(Error::contract("warm start does not match K and the grid"));
            }
            (theta.into_iter().map(Some).collect(), gamma_coarse)
        }
    };
    let mut gamma_fine = interpolate_gamma(&gamma_coarse, &grid);

    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut floored = vec![0; k];

    while iterations < cfg.max_iter {
        iterations += 1;
        let solver = ThetaSolverConfig {
            seed: mix_seed(cfg.seed, restart, iterations as u64),
            ..cfg.theta_solver.clone()
        };
        // Parameter step, one independent problem per cluster.
        let fitted: Vec<Result<ParamVector>> = (0..k)
            .into_par_iter()
            .map(|c| {
                let mut weights = transition_weights(gamma_fine.row(c));
                let previous = theta[c].as_deref();
                if weights.iter().all(|&w| w == 0.0) {
                    if let Some(prev) = &theta[c] {
                        debug!("cluster {c} is empty; keeping its parameters");
                        return Ok(prev.clone());
                    }
                    // Never estimated and no weight: fall back to all data.
                    weights = transition_weights(&vec![1.0; n]);
                }
                fit_theta(model, series, &weights, &solver, previous).map(|fit| fit.theta)
            })
            .collect();
        let new_theta: Vec<ParamVector> = fitted.into_iter().collect::<Result<_>>()?;

        // Affiliation step on the coarse grid.
        let fitness = fitness_matrix(model, series, &new_theta)?;
        floored = fitness.floored_counts().to_vec();
        let b = ReducedFitness {
            b: fitness.rows().par_iter().map(|r| reduce_fitness(r, &grid)).collect(),
        };
        let qp = solve_qp(&b, eps2, &stiffness, &gamma_coarse, &cfg.qp)?;
        if !qp.converged {
            debug!(
                "QP stopped after {} iterations with projected gradient {:e}",
                qp.iterations, qp.projected_gradient
            );
        }
        theta = new_theta.into_iter().map(Some).collect();
        gamma_coarse = qp.gamma;
        gamma_fine = interpolate_gamma(&gamma_coarse, &grid);

        let value = qp.objective;
        let previous = trace.last().copied();
        trace.push(value);
        debug!("iteration {iterations}: functional {value:.12e}");
        if let Some(prev) = previous {
            if (prev - value).abs() <= cfg.tol * value.abs() {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        info!("no convergence after {iterations} iterations (K = {k}, eps2 = {eps2})");
    }
    if floored.iter().any(|&c| c > 0) {
        warn!("transition densities hit the floor: {floored:?}");
    }
    Ok(ClusteringResult {
        model: model.id().to_string(),
        k,
        eps2,
        seed: cfg.seed,
        alpha: grid.alpha,
        t0: series.t0,
        dt: series.dt,
        theta: theta.into_iter().map(|t| t.expect("all clusters fitted")).collect(),
        functional_trace: trace,
        iterations,
        converged,
        floored_transitions: floored,
        gamma_coarse,
        gamma_fine,
    })
}

/// Clustering with `cfg.n_restarts` random starts run in parallel.
pub fn run_subspace(
    model: &dyn SdeModel,
    series: &UniformTimeSeries,
    k: usize,
    eps2: f64,
    cfg: &SubspaceConfig,
) -> Result<ClusteringResult> {
    let restarts = cfg.n_restarts.max(1) as u64;
    let runs: Vec<Result<ClusteringResult>> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            run_from(
                model,
                series,
                k,
                eps2,
                cfg,
                Start::Random(mix_seed(cfg.seed, r, u64::MAX)),
                r,
            )
        })
        .collect();
    let mut best: Option<ClusteringResult> = None;
    for run in runs {
        let run = run?;
        if best.as_ref().is_none_or(|b| run.functional() < b.functional()) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Runs over a sorted ε² list, each run warm-started from the previous
/// one. With `round_trip` the list is traversed back from the top as well
/// and the lower functional is kept for every ε².
pub fn scan_eps2(
    model: &dyn SdeModel,
    series: &UniformTimeSeries,
    k: usize,
    eps2_list: &[f64],
    cfg: &SubspaceConfig,
    round_trip: bool,
) -> Result<Vec<ClusteringResult>> {
    if eps2_list.is_empty() {
        return Err(Error::contract("the eps2 list is empty"));
    }
    if eps2_list.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::contract("the eps2 list must be sorted"));
    }
    let warm = |prev: &ClusteringResult| Start::Warm {
        theta: prev.theta.clone(),
        gamma_coarse: prev.gamma_coarse.clone(),
    };
    let mut results = Vec::with_capacity(eps2_list.len());
    results.push(run_subspace(model, series, k, eps2_list[0], cfg)?);
    for &eps2 in &eps2_list[1..] {
        let start = warm(results.last().unwrap());
        results.push(run_from(model, series, k, eps2, cfg, start, 0)?);
        info!("eps2 = {eps2}: functional {:.9e}", results.last().unwrap().functional());
    }
    if round_trip && eps2_list.len() > 1 {
        let mut carry = results.last().unwrap().clone();
        for i in (0..eps2_list.len() - 1).rev() {
            let back = run_from(model, series, k, eps2_list[i], cfg, warm(&carry), 0)?;
            if back.functional() < results[i].functional() {
                results[i] = back;
            }
            carry = results[i].clone();
        }
    }
    Ok(results)
}

/// `n` logarithmically spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::neg_log_likelihood;
    use crate::models::builtin_ou;
    use rand_distr::{Distribution, StandardNormal};

    /// Exact OU transitions with the parameter set chosen by `regime(i)`.
    fn switching_ou(thetas: &[[f64; 3]], regime: impl Fn(usize) -> usize, n: usize, seed: u64) -> UniformTimeSeries {
        let dt = 0.1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [a, b, _] = thetas[regime(0)];
        let mut x = a / b;
        let values = (0..n)
            .map(|i| {
                let cur = x;
                let [a, b, s] = thetas[regime(i)];
                let e = (-b * dt).exp();
                let sd = (s * s * (1.0 - e * e) / (2.0 * b)).sqrt();
                let z: f64 = StandardNormal.sample(&mut rng);
                x = x * e + a / b * (1.0 - e) + sd * z;
                cur
            })
            .collect();
        UniformTimeSeries::new(0.0, dt, values).unwrap()
    }

    fn quick_cfg() -> SubspaceConfig {
        SubspaceConfig {
            max_iter: 15,
            n_restarts: 2,
            seed: 11,
            theta_solver: ThetaSolverConfig {
                global_evals: 150,
                local_evals: 150,
                population: 200,
                warm_population: 30,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    const REGIMES: [[f64; 3]; 2] = [[0.0, 1.0, 0.5], [3.0, 1.0, 0.5]];

    fn two_regime_series(seed: u64) -> UniformTimeSeries {
        switching_ou(&REGIMES, |i| (i / 250) % 2, 2000, seed)
    }

    #[test]
    fn functional_never_increases() {
        let s = two_regime_series(1);
        let r = run_subspace(&builtin_ou(), &s, 2, 0.5, &quick_cfg()).unwrap();
        for w in r.functional_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * w[0].abs(), "{:?}", r.functional_trace);
        }
        assert!(r.gamma_fine.is_feasible(1e-9) && r.gamma_coarse.is_feasible(1e-9));
    }

    #[test]
    fn separates_two_regimes() {
        let s = two_regime_series(2);
        let r = run_subspace(&builtin_ou(), &s, 2, 0.5, &quick_cfg()).unwrap();
        let truth: Vec<usize> = (0..s.len()).map(|i| (i / 250) % 2).collect();
        let labels = r.gamma_fine.argmax_labels();
        let agree = labels.iter().zip(&truth).filter(|(a, b)| a == b).count() as f64 / s.len() as f64;
        let accuracy = agree.max(1.0 - agree);
        assert!(accuracy > 0.9, "{accuracy}");
        let mut means: Vec<f64> = r.theta.iter().map(|t| t[0] / t[1]).collect();
        means.sort_by(f64::total_cmp);
        assert!(means[0].abs() < 0.3 && (means[1] - 3.0).abs() < 0.3, "{means:?}");
    }

    #[test]
    fn single_cluster_is_maximum_likelihood() {
        let s = switching_ou(&REGIMES[..1], |_| 0, 800, 3);
        let cfg = quick_cfg();
        let r = run_subspace(&builtin_ou(), &s, 1, 0.0, &cfg).unwrap();
        assert!(r.gamma_fine.rows()[0].iter().all(|&g| (g - 1.0).abs() < 1e-12));
        let fit = fit_theta(&builtin_ou(), &s, &vec![1.0; s.len()], &cfg.theta_solver, None).unwrap();
        let nll = neg_log_likelihood(&builtin_ou(), &s, &r.theta[0]).unwrap();
        assert!(
            nll <= fit.objective + 1e-6 * fit.objective.abs(),
            "{nll} {}",
            fit.objective
        );
    }

    #[test]
    fn reproducible_for_a_fixed_seed() {
        let s = two_regime_series(4);
        let a = run_subspace(&builtin_ou(), &s, 2, 1.0, &quick_cfg()).unwrap();
        let b = run_subspace(&builtin_ou(), &s, 2, 1.0, &quick_cfg()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn relabeling_the_start_relabels_the_result() {
        let s = two_regime_series(5);
        // One sweep: later parameter searches amplify rounding differences
        // from the QP into different random-search paths.
        // A tight QP tolerance: the stiffness has soft modes, so a loose
        // projected-gradient stop leaves visible slack in the affiliations.
        let cfg = SubspaceConfig {
            max_iter: 1,
            qp: QpConfig {
                tol: 1e-12,
                max_iter: 100_000,
                ..Default::default()
            },
            ..quick_cfg()
        };
        let g = initial_gamma(2, s.len(), 8);
        let perm = [1, 0];
        let a = run_from(&builtin_ou(), &s, 2, 2.0, &cfg, Start::Gamma(g.clone()), 0).unwrap();
        let b = run_from(&builtin_ou(), &s, 2, 2.0, &cfg, Start::Gamma(g.permuted(&perm)), 0).unwrap();
        for (k, &p) in perm.iter().enumerate() {
            for (x, y) in a.theta[k].iter().zip(b.theta[p].iter()) {
                assert!((x - y).abs() < 1e-6 * x.abs().max(1.0), "{:?} {:?}", a.theta, b.theta);
            }
            for (x, y) in a.gamma_fine.row(k).iter().zip(b.gamma_fine.row(p)) {
                assert!((x - y).abs() < 1e-5, "{x} {y}");
            }
        }
        assert!((a.functional() - b.functional()).abs() < 1e-8 * a.functional().abs());
    }

    #[test]
    fn rejects_short_series() {
        let s = two_regime_series(6);
        let short = UniformTimeSeries::new(0.0, 0.1, s.values[..25].to_vec()).unwrap();
        assert!(matches!(
            run_subspace(&builtin_ou(), &short, 3, 1.0, &quick_cfg()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn scan_keeps_the_order_and_values() {
        let s = two_regime_series(7);
        let cfg = SubspaceConfig {
            max_iter: 5,
            ..quick_cfg()
        };
        let eps = [0.1, 1.0, 10.0];
        let r = scan_eps2(&builtin_ou(), &s, 2, &eps, &cfg, true).unwrap();
        assert_eq!(r.iter().map(|r| r.eps2).collect::<Vec<_>>(), eps);
        assert!(scan_eps2(&builtin_ou(), &s, 2, &[1.0, 0.1], &cfg, false).is_err());
    }

    #[test]
    fn initial_gamma_is_feasible_and_coherent() {
        let g = initial_gamma(3, 600, 4);
        assert!(g.is_feasible(1e-12));
        let labels = g.argmax_labels();
        let switches = labels.windows(2).filter(|w| w[0] != w[1]).count();
        assert!(switches < 120, "{switches}");
        assert_eq!(initial_gamma(3, 600, 4), g);
    }

    #[test]
    fn transition_weights_fold_the_wrap_entry() {
        assert_eq!(transition_weights(&[0.2, 0.5, 0.6]), vec![0.4, 0.5, 0.0]);
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(0.1, 100.0, 101);
        assert_eq!(g.len(), 101);
        assert!((g[0] - 0.1).abs() < 1e-15 && (g[100] - 100.0).abs() < 1e-12);
        assert!((g[50] - 10f64.powf(0.5)).abs() < 1e-12);
    }
}
