//! Hyperparameter selection: the regularization weight ε² from the wavelet
//! detail energy of the affiliations, and the number of clusters K from a
//! gap statistic on the KL diversity of the clusters' stationary laws.

use std::io::Write;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gamma_solver::AffiliationMatrix;
use crate::hermite::DENSITY_FLOOR;
use crate::models::SdeModel;
use crate::series::{ParamVector, UniformTimeSeries};
use crate::subspace::{run_subspace, ClusteringResult, SubspaceConfig};

/// Largest number of removed detail levels reported by [`select_eps2`].
pub const MAX_REMOVED_LEVELS: usize = 9;
/// Points of the shared grid used for KL divergences.
pub const KL_GRID_POINTS: usize = 4096;

/// Extends `x` to the next power of two by mirroring about the last sample
/// (without repeating it).
pub fn reflect_pad(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let target = n.next_power_of_two().max(2);
    let mut out = x.to_vec();
    if n == 1 {
        out.resize(target, x[0]);
        return out;
    }
    let period = 2 * (n - 1);
    for i in n..target {
        let m = i % period;
        out.push(if m < n { x[m] } else { x[period - m] });
    }
    out
}

/// Orthonormal Haar decomposition of a length-2^C signal to full depth.
/// Returns the detail bands finest first and the final approximation.
pub fn haar_dwt(signal: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    assert!(
        signal.len().is_power_of_two(),
        "Haar transform needs a power-of-two length"
    );
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut approx = signal.to_vec();
    let mut details = Vec::new();
    while approx.len() > 1 {
        let (a, d): (Vec<f64>, Vec<f64>) = approx
            .chunks_exact(2)
            .map(|p| (s * (p[0] + p[1]), s * (p[0] - p[1])))
            .unzip();
        details.push(d);
        approx = a;
    }
    (details, approx)
}

/// Number of decomposition levels `C` for a signal of length `n`.
pub fn decomposition_depth(n: usize) -> usize {
    n.next_power_of_two().max(2).trailing_zeros() as usize
}

/// Cluster-averaged detail energy `(1/K) Σ_k Σ_c Σ_d (γ̃ᴰ_{k,c}(d))² Δt`
/// with the `remove_levels` finest bands dropped.
pub fn gamma_energy(gamma: &AffiliationMatrix, dt: f64, remove_levels: usize) -> Result<f64> {
    let depth = decomposition_depth(gamma.grid_len());
    if remove_levels >= depth {
        return Err(Error::EmptyEnergy {
            remove: remove_levels,
            depth,
        });
    }
    let total: f64 = gamma
        .rows()
        .par_iter()
        .map(|row| {
            let (details, _) = haar_dwt(&reflect_pad(row));
            details[remove_levels..].iter().flatten().map(|d| d * d).sum::<f64>()
        })
        .sum();
    Ok(total * dt / gamma.n_clusters() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyCurve {
    pub eps2_values: Vec<f64>,
    /// `energy[level][i]`: energy at `eps2_values[i]` with `level` removed bands.
    pub energy: Vec<Vec<f64>>,
    pub argmax_per_level: Vec<f64>,
}

impl EnergyCurve {
    /// Maximizing ε² at the given filter level.
    pub fn recommended(&self, level: usize) -> Option<f64> {
        self.argmax_per_level.get(level).copied()
    }

    /// Index into `eps2_values` of the maximum at `level`.
    pub fn argmax_index(&self, level: usize) -> usize {
        argmax(&self.energy[level])
    }

    /// CSV with one row per ε²: `eps2,level_0,…,level_L`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["eps2".to_string()];
        header.extend((0..self.energy.len()).map(|l| format!("level_{l}")));
        w.write_record(&header)?;
        for (i, e) in self.eps2_values.iter().enumerate() {
            let mut rec = vec![e.to_string()];
            rec.extend(self.energy.iter().map(|row| row[i].to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// First index of the largest value.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Energy curves over a scan at filter levels `0..=min(C − 1, 9)`.
pub fn select_eps2(results: &[ClusteringResult]) -> Result<EnergyCurve> {
    let first = results
        .first()
        .ok_or_else(|| Error::contract("no clustering results to select from"))?;
    if results
        .iter()
        .any(|r| r.k != first.k || r.gamma_fine.grid_len() != first.gamma_fine.grid_len())
    {
        return Err(Error::contract("results differ in K or series length"));
    }
    let depth = decomposition_depth(first.gamma_fine.grid_len());
    let levels = (depth - 1).min(MAX_REMOVED_LEVELS);
    let energy: Vec<Vec<f64>> = (0..=levels)
        .map(|l| {
            results
                .iter()
                .map(|r| gamma_energy(&r.gamma_fine, r.dt, l))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    let eps2_values: Vec<f64> = results.iter().map(|r| r.eps2).collect();
    let argmax_per_level = energy.iter().map(|e| eps2_values[argmax(e)]).collect();
    Ok(EnergyCurve {
        eps2_values,
        energy,
        argmax_per_level,
    })
}

fn trapezoid(y: &[f64], h: f64) -> f64 {
    let n = y.len();
    if n < 2 {
        return 0.0;
    }
    h * (y.iter().sum::<f64>() - 0.5 * (y[0] + y[n - 1]))
}

/// Stationary density `(N_c/g²) exp(∫ 2f/g² dx)` on an equally spaced grid,
/// normalized by the trapezoid rule.
pub fn stationary_density(model: &dyn SdeModel, theta: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    stationary_density_for(model, theta, grid, 0)
}

fn stationary_density_for(model: &dyn SdeModel, theta: &[f64], grid: &[f64], cluster: usize) -> Result<Vec<f64>> {
    model.check_params(theta)?;
    if grid.len() < 2 {
        return Err(Error::contract("density grid needs at least two points"));
    }
    let h = grid[1] - grid[0];
    if !(h > 0.0) {
        return Err(Error::contract("density grid must be increasing"));
    }
    if let Some(i) = grid.iter().position(|&x| !model.state_domain().contains(x)) {
        model.check_state(grid[i], Some(i))?;
    }
    let integrand: Vec<f64> = grid
        .iter()
        .map(|&x| {
            let g = model.diffusion(x, theta);
            2.0 * model.drift(x, theta) / (g * g)
        })
        .collect();
    // Anchor the running integral where the integrand is smallest; a
    // singular end would otherwise swamp the interior in rounding error.
    let anchor = (0..grid.len())
        .filter(|&i| integrand[i].is_finite())
        .min_by(|&a, &b| integrand[a].abs().total_cmp(&integrand[b].abs()))
        .ok_or(Error::NonNormalizable { cluster })?;
    let mut acc = vec![0.0; grid.len()];
    for i in anchor + 1..grid.len() {
        acc[i] = acc[i - 1] + 0.5 * (grid[i] - grid[i - 1]) * (integrand[i] + integrand[i - 1]);
    }
    for i in (0..anchor).rev() {
        acc[i] = acc[i + 1] - 0.5 * (grid[i + 1] - grid[i]) * (integrand[i] + integrand[i + 1]);
    }
    let log_p: Vec<f64> = grid
        .iter()
        .zip(&acc)
        .map(|(&x, a)| {
            let v = a - 2.0 * model.diffusion(x, theta).ln();
            if v.is_nan() {
                f64::NEG_INFINITY
            } else {
                v
            }
        })
        .collect();
    let top = log_p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::NonNormalizable { cluster });
    }
    let mut p: Vec<f64> = log_p.iter().map(|l| (l - top).exp()).collect();
    let z = trapezoid(&p, h);
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::NonNormalizable { cluster });
    }
    for v in &mut p {
        *v /= z;
    }
    Ok(p)
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn moments(grid: &[f64], p: &[f64]) -> (f64, f64) {
    let h = grid[1] - grid[0];
    let xp: Vec<f64> = grid.iter().zip(p).map(|(x, v)| x * v).collect();
    let mean = trapezoid(&xp, h);
    let vp: Vec<f64> = grid.iter().zip(p).map(|(x, v)| (x - mean).powi(2) * v).collect();
    (mean, trapezoid(&vp, h).max(0.0).sqrt())
}

/// Interval `mean ± 8 std` of the stationary law, located by repeatedly
/// zooming onto the region where the density is within `e^{-40}` of its
/// maximum.
pub fn stationary_support(model: &dyn SdeModel, theta: &[f64], cluster: usize) -> Result<(f64, f64)> {
    let domain = model.state_domain();
    let span = 1e3;
    let tiny = 1e-9;
    let mut lo = if domain.lo.is_finite() { domain.lo + tiny } else { -span };
    let mut hi = if domain.hi.is_finite() { domain.hi - tiny } else { span };
    lo = lo.max(-span);
    hi = hi.min(span);
    for _ in 0..40 {
        let grid = linspace(lo, hi, KL_GRID_POINTS);
        let p = stationary_density_for(model, theta, &grid, cluster)?;
        let top = p.iter().copied().fold(0.0, f64::max);
        let keep = |v: &f64| *v > top * (-40.0f64).exp();
        let first = p.iter().position(keep).unwrap_or(0);
        let last = p.iter().rposition(keep).unwrap_or(p.len() - 1);
        let h = grid[1] - grid[0];
        let new_lo = (grid[first] - 2.0 * h).max(lo);
        let new_hi = (grid[last] + 2.0 * h).min(hi);
        if last - first > KL_GRID_POINTS / 4 {
            break;
        }
        lo = new_lo;
        hi = new_hi;
    }
    let grid = linspace(lo, hi, KL_GRID_POINTS);
    let p = stationary_density_for(model, theta, &grid, cluster)?;
    let (mean, std) = moments(&grid, &p);
    if !(std > 0.0 && mean.is_finite()) {
        return Err(Error::NonNormalizable { cluster });
    }
    let mut a = mean - 8.0 * std;
    let mut b = mean + 8.0 * std;
    if domain.lo.is_finite() {
        a = a.max(domain.lo + tiny.max(1e-12 * b.abs()));
    }
    if domain.hi.is_finite() {
        b = b.min(domain.hi - tiny);
    }
    Ok((a, b))
}

/// Stationary density at arbitrary points, interpolated from a fine grid
/// over the law's support; zero outside it.
pub fn stationary_density_at(model: &dyn SdeModel, theta: &[f64], points: &[f64]) -> Result<Vec<f64>> {
    let (lo, hi) = stationary_support(model, theta, 0)?;
    let grid = linspace(lo, hi, KL_GRID_POINTS);
    let p = stationary_density(model, theta, &grid)?;
    let h = grid[1] - grid[0];
    Ok(points
        .iter()
        .map(|&x| {
            if !(x >= lo && x <= hi) {
                return 0.0;
            }
            let f = (x - lo) / h;
            let i = (f as usize).min(grid.len() - 2);
            let w = f - i as f64;
            (1.0 - w) * p[i] + w * p[i + 1]
        })
        .collect())
}

/// `∫ p ln(p/q) dx` by the trapezoid rule, with both densities floored.
pub fn kl_divergence(p: &[f64], q: &[f64], h: f64) -> f64 {
    let terms: Vec<f64> = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let (a, b) = (a.max(DENSITY_FLOOR), b.max(DENSITY_FLOOR));
            a * (a / b).ln()
        })
        .collect();
    trapezoid(&terms, h).max(0.0)
}

/// Weighted diversity matrix `d_ij = ν_j KL(p_i ‖ p_j)`.
pub fn diversity_matrix(model: &dyn SdeModel, thetas: &[ParamVector], nu: &[f64]) -> Result<Vec<Vec<f64>>> {
    let k = thetas.len();
    if nu.len() != k {
        return Err(Error::contract("one weight per cluster is required"));
    }
    let supports: Vec<(f64, f64)> = thetas
        .iter()
        .enumerate()
        .map(|(c, th)| stationary_support(model, th, c))
        .collect::<Result<_>>()?;
    let lo = supports.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let hi = supports.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let grid = linspace(lo, hi, KL_GRID_POINTS);
    let h = grid[1] - grid[0];
    let densities: Vec<Vec<f64>> = thetas
        .iter()
        .enumerate()
        .map(|(c, th)| stationary_density_for(model, th, &grid, c))
        .collect::<Result<_>>()?;
    Ok((0..k)
        .map(|i| {
            (0..k)
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        nu[j] * kl_divergence(&densities[i], &densities[j], h)
                    }
                })
                .collect()
        })
        .collect())
}

/// `W_K = Σ_ij ν_j KL(p_i ‖ p_j)` with `ν_j = Σᵢ γ_j(tᵢ) Δt`.
pub fn diversity(thetas: &[ParamVector], gamma: &AffiliationMatrix, model: &dyn SdeModel, dt: f64) -> Result<f64> {
    if thetas.len() != gamma.n_clusters() {
        return Err(Error::contract("one parameter vector per cluster is required"));
    }
    let nu: Vec<f64> = gamma.rows().iter().map(|r| r.iter().sum::<f64>() * dt).collect();
    Ok(diversity_matrix(model, thetas, &nu)?.iter().flatten().sum())
}

/// Brownian motion with scale `scale` reflected into `[lo, hi]`, started at
/// the midpoint.
pub fn reflected_wiener(n: usize, dt: f64, lo: f64, hi: f64, scale: f64, seed: u64) -> Result<UniformTimeSeries> {
    if !(lo < hi) || !(scale >= 0.0) {
        return Err(Error::contract("need lo < hi and a nonnegative scale"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = scale * dt.sqrt();
    let mut x = 0.5 * (lo + hi);
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(x);
        let z: f64 = StandardNormal.sample(&mut rng);
        x += step * z;
        while x < lo || x > hi {
            x = if x > hi { 2.0 * hi - x } else { 2.0 * lo - x };
        }
    }
    UniformTimeSeries::new(0.0, dt, values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub k_values: Vec<usize>,
    pub log_w: Vec<f64>,
    pub log_w_ref_mean: Vec<f64>,
    pub log_w_ref_std: Vec<f64>,
    /// Successful reference clusterings per K.
    pub ref_successes: Vec<usize>,
    pub gap: Vec<f64>,
    pub b: usize,
    pub recommended_k: usize,
}

impl DiversityReport {
    /// CSV with one row per K.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "log_w", "log_w_ref_mean", "log_w_ref_std", "ref_successes", "gap"])?;
        for i in 0..self.k_values.len() {
            w.write_record(&[
                self.k_values[i].to_string(),
                self.log_w[i].to_string(),
                self.log_w_ref_mean[i].to_string(),
                self.log_w_ref_std[i].to_string(),
                self.ref_successes[i].to_string(),
                self.gap[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `log W_K` of a clustering, or an error if the clustering or its
/// diversity fails.
fn log_diversity(
    model: &dyn SdeModel,
    series: &UniformTimeSeries,
    k: usize,
    eps2: f64,
    cfg: &SubspaceConfig,
) -> Result<f64> {
    let result = run_subspace(model, series, k, eps2, cfg)?;
    let w = diversity(&result.theta, &result.gamma_fine, model, series.dt)?;
    if w > 0.0 && w.is_finite() {
        Ok(w.ln())
    } else {
        Err(Error::Simulation(format!("diversity {w} has no logarithm")))
    }
}

/// Index of the smallest gap; ties go to the smaller K.
fn argmin_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// Gap statistic `E[log W*_K] − log W_K` against `b` reflected Wiener
/// references confined to the data range.
pub fn gap_statistic(
    model: &dyn SdeModel,
    series: &UniformTimeSeries,
    k_values: &[usize],
    eps2: f64,
    b: usize,
    cfg: &SubspaceConfig,
) -> Result<DiversityReport> {
    if k_values.is_empty() || b == 0 {
        return Err(Error::contract("need at least one K and one reference"));
    }
    if k_values.iter().any(|&k| k < 2) {
        return Err(Error::contract("the gap statistic needs K >= 2"));
    }
    let log_w: Vec<f64> = k_values
        .par_iter()
        .map(|&k| log_diversity(model, series, k, eps2, cfg))
        .collect::<Result<_>>()?;

    let (lo, hi) = series.min_max();
    let scale = series.increment_std() / series.dt.sqrt();
    let references: Vec<UniformTimeSeries> = (0..b)
        .map(|r| {
            reflected_wiener(
                series.len(),
                series.dt,
                lo,
                hi,
                scale,
                cfg.seed.wrapping_add(0x5EED_0000 + r as u64),
            )
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..k_values.len()).flat_map(|i| (0..b).map(move |r| (i, r))).collect();
    let outcomes: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(i, r)| log_diversity(model, &references[r], k_values[i], eps2, cfg))
        .collect();

    let mut mean = vec![0.0; k_values.len()];
    let mut std = vec![0.0; k_values.len()];
    let mut successes = vec![0; k_values.len()];
    for (i, &k) in k_values.iter().enumerate() {
        let ok: Vec<f64> = jobs
            .iter()
            .zip(&outcomes)
            .filter(|((ji, _), _)| *ji == i)
            .filter_map(|((_, r), o)| match o {
                Ok(v) => Some(*v),
                Err(e) => {
                    warn!("reference {r} failed for K = {k}: {e}");
                    None
                }
            })
            .collect();
        if 2 * ok.len() < b {
            return Err(Error::ReferenceFailures {
                k,
                succeeded: ok.len(),
                requested: b,
            });
        }
        let m = ok.iter().sum::<f64>() / ok.len() as f64;
        let var = ok.iter().map(|v| (v - m).powi(2)).sum::<f64>() / ok.len() as f64;
        mean[i] = m;
        std[i] = var.sqrt();
        successes[i] = ok.len();
    }
    let gap: Vec<f64> = mean.iter().zip(&log_w).map(|(m, l)| m - l).collect();
    let recommended_k = k_values[argmin_first(&gap)];
    info!("gap statistic recommends K = {recommended_k}");
    Ok(DiversityReport {
        k_values: k_values.to_vec(),
        log_w,
        log_w_ref_mean: mean,
        log_w_ref_std: std,
        ref_successes: successes,
        gap,
        b,
        recommended_k,
    })
}
