//! Local fitness `f(tᵢ; θ) = −ln p_X(Δt, X(tᵢ₊₁) | X(tᵢ); θ)` and the
//! affiliation-weighted clustering functional.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gamma_solver::AffiliationMatrix;
use crate::hermite::{density_unchecked, DENSITY_FLOOR};
use crate::models::SdeModel;
use crate::series::{ParamVector, UniformTimeSeries};

/// Fitness rows of all clusters on the t-grid. Entry `N − 1` of each row
/// repeats entry 0 so that every grid node carries a value.
#[derive(Debug, Clone, PartialEq)]
pub struct FitnessMatrix {
    rows: Vec<Vec<f64>>,
    floored: Vec<usize>,
}

impl FitnessMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let len = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || len < 2 || rows.iter().any(|r| r.len() != len) {
            return Err(Error::contract("fitness rows must share a length of at least 2"));
        }
        let floored = vec![0; rows.len()];
        Ok(Self { rows, floored })
    }

    pub fn n_clusters(&self) -> usize {
        self.rows.len()
    }

    pub fn len(&self) -> usize {
        self.rows[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.rows[k]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Number of transitions per cluster whose density hit the floor.
    pub fn floored_counts(&self) -> &[usize] {
        &self.floored
    }

    /// One CSV line per cluster: `cluster,f(t_0),…,f(t_{N−1})`, preceded by
    /// a header of the node times.
    pub fn write_csv<W: Write>(&self, out: W, t0: f64, dt: f64) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["cluster".to_string()];
        header.extend((0..self.len()).map(|i| (t0 + i as f64 * dt).to_string()));
        w.write_record(&header)?;
        for (k, row) in self.rows.iter().enumerate() {
            let mut rec = vec![(k + 1).to_string()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Checks every sample against the model's state domain.
pub fn validate_series(model: &dyn SdeModel, series: &UniformTimeSeries) -> Result<()> {
    series
        .values
        .iter()
        .enumerate()
        .try_for_each(|(i, &x)| model.check_state(x, Some(i)))
}

fn check_theta(model: &dyn SdeModel, theta: &[f64]) -> Result<()> {
    model.check_params(theta)?;
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("parameters must be finite"));
    }
    Ok(())
}

/// Fitness row and the number of floored densities in it.
pub fn fitness_row_counted(
    model: &dyn SdeModel,
    series: &UniformTimeSeries,
    theta: &[f64],
) -> Result<(Vec<f64>, usize)> {
    check_theta(model, theta)?;
    validate_series(model, series)?;
    let dt = series.dt;
    let sqrt_dt = dt.sqrt();
    let penalty = -DENSITY_FLOOR.ln();
    let evaluated: Vec<(f64, bool)> = series
        .values
        .par_windows(2)
        .with_min_len(4096)
        .map(|w| {
            density_unchecked(model, theta, dt, sqrt_dt, w[0], w[1])
                .map(|v| (if v.floored { penalty } else { -v.density.ln() }, v.floored))
        })
        .collect::<Result<_>>()?;
    let floored = evaluated.iter().filter(|(_, fl)| *fl).count();
    let mut row: Vec<f64> = evaluated.into_iter().map(|(f, _)| f).collect();
    row.push(row[0]);
    Ok((row, floored))
}

/// `[f(t₀; θ), …, f(t_{N−2}; θ), f(t₀; θ)]`.
pub fn fitness_row(model: &dyn SdeModel, series: &UniformTimeSeries, theta: &[f64]) -> Result<Vec<f64>> {
    fitness_row_counted(model, series, theta).map(|(row, _)| row)
}

/// Fitness rows for all clusters, built in parallel.
pub fn fitness_matrix(
    model: &dyn SdeModel,
    series: &UniformTimeSeries,
    thetas: &[ParamVector],
) -> Result<FitnessMatrix> {
    let built: Vec<(Vec<f64>, usize)> = thetas
        .par_iter()
        .map(|th| fitness_row_counted(model, series, th))
        .collect::<Result<_>>()?;
    let (rows, floored) = built.into_iter().unzip();
    Ok(FitnessMatrix { rows, floored })
}

/// `Σ_k Σ_{i=0}^{N−2} γ_k(tᵢ) f(tᵢ; θ_k)`; the wrap entry is left out.
pub fn weighted_negloglik(fitness: &FitnessMatrix, gamma: &AffiliationMatrix) -> Result<f64> {
    if fitness.n_clusters() != gamma.n_clusters() || fitness.len() != gamma.grid_len() {
        return Err(Error::contract(format!(
            "fitness is {}x{} but affiliations are {}x{}",
            fitness.n_clusters(),
            fitness.len(),
            gamma.n_clusters(),
            gamma.grid_len()
        )));
    }
    let n = fitness.len();
    Ok(fitness
        .rows()
        .iter()
        .zip(gamma.rows())
        .map(|(f, g)| f[..n - 1].iter().zip(&g[..n - 1]).map(|(a, b)| a * b).sum::<f64>())
        .sum())
}

/// Plain negative log-likelihood `l_N(θ)` over all transitions.
pub fn neg_log_likelihood(model: &dyn SdeModel, series: &UniformTimeSeries, theta: &[f64]) -> Result<f64> {
    let row = fitness_row(model, series, theta)?;
    Ok(row[..row.len() - 1].iter().sum())
}

/// `Σ_{i=0}^{N−2} wᵢ f(tᵢ; θ)`, skipping transitions with zero weight.
/// Assumes the series was validated against the model.
pub fn weighted_objective(
    model: &dyn SdeModel,
    series: &UniformTimeSeries,
    theta: &[f64],
    weights: &[f64],
) -> Result<f64> {
    if weights.len() != series.len() {
        return Err(Error::contract("weight row does not match the series length"));
    }
    let dt = series.dt;
    let sqrt_dt = dt.sqrt();
    let mut total = 0.0;
    for (w, &wi) in series.values.windows(2).zip(weights) {
        if wi == 0.0 {
            continue;
        }
        let p = density_unchecked(model, theta, dt, sqrt_dt, w[0], w[1])?;
        total -= wi * p.density.ln();
    }
    Ok(total)
}
