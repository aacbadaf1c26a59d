//! Affiliation step: P1 finite-element reduction of the fitness rows onto a
//! coarse τ-grid, the H1 stiffness penalty, and a spectral projected gradient
//! solver for the resulting QP over a product of probability simplices.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fine t-grid of `n_fine` samples and the coarse τ-grid of `n_coarse` hat
/// nodes covering the same time span.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FemGrid {
    pub n_fine: usize,
    pub n_coarse: usize,
    pub alpha: f64,
    pub dt: f64,
    pub dtau: f64,
}

impl FemGrid {
    /// Coarse grid with `round(alpha·N)` nodes, clamped to `[2, N]`.
    pub fn new(n_fine: usize, alpha: f64, dt: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::contract(format!("alpha must lie in (0, 1], got {alpha}")));
        }
        let n_coarse = ((alpha * n_fine as f64).round() as usize).clamp(2, n_fine.max(2));
        Self::with_coarse(n_fine, n_coarse, dt)
    }

    pub fn with_coarse(n_fine: usize, n_coarse: usize, dt: f64) -> Result<Self> {
        if n_fine < 2 || n_coarse < 2 || n_coarse > n_fine {
            return Err(Error::contract(format!(
                "need 2 <= n_coarse <= n_fine, got n_coarse={n_coarse}, n_fine={n_fine}"
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::contract(format!("time step must be positive, got {dt}")));
        }
        let dtau = (n_fine - 1) as f64 * dt / (n_coarse - 1) as f64;
        Ok(Self {
            n_fine,
            n_coarse,
            alpha: n_coarse as f64 / n_fine as f64,
            dt,
            dtau,
        })
    }

    /// Coarse element containing fine sample `i` and the position inside it.
    #[inline]
    fn locate(&self, i: usize) -> (usize, f64) {
        if self.n_coarse == self.n_fine {
            return (i.min(self.n_coarse - 2), if i == self.n_fine - 1 { 1.0 } else { 0.0 });
        }
        let s = i as f64 * (self.n_coarse - 1) as f64 / (self.n_fine - 1) as f64;
        let j = (s.floor() as usize).min(self.n_coarse - 2);
        (j, s - j as f64)
    }

    /// Trapezoid weight of fine sample `i`.
    #[inline]
    fn trapezoid(&self, i: usize) -> f64 {
        if i == 0 || i == self.n_fine - 1 {
            0.5 * self.dt
        } else {
            self.dt
        }
    }

    /// `∫ v_j dt` for every hat function, by the same quadrature as
    /// [`reduce_fitness`].
    pub fn lumped_mass(&self) -> Vec<f64> {
        reduce_fitness(&vec![1.0; self.n_fine], self)
    }
}

/// `K × len` matrix of affiliation weights `γ_k(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffiliationMatrix {
    weights: Vec<Vec<f64>>,
}

impl AffiliationMatrix {
    pub fn new(weights: Vec<Vec<f64>>) -> Result<Self> {
        let len = weights.first().map(Vec::len).unwrap_or(0);
        if weights.is_empty() || len == 0 {
            return Err(Error::contract("affiliation matrix must be non-empty"));
        }
        if weights.iter().any(|r| r.len() != len) {
            return Err(Error::contract("affiliation rows differ in length"));
        }
        if weights.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::contract("affiliation weights must be finite"));
        }
        Ok(Self { weights })
    }

    /// Every node assigned `1/K` to each cluster.
    pub fn uniform(k: usize, len: usize) -> Self {
        Self {
            weights: vec![vec![1.0 / k as f64; len]; k],
        }
    }

    /// Indicator rows of the given labels.
    pub fn from_labels(labels: &[usize], k: usize) -> Result<Self> {
        let mut weights = vec![vec![0.0; labels.len()]; k];
        for (i, &l) in labels.iter().enumerate() {
            if l >= k {
                return Err(Error::contract(format!("label {l} out of range for K = {k}")));
            }
            weights[l][i] = 1.0;
        }
        Self::new(weights)
    }

    pub fn n_clusters(&self) -> usize {
        self.weights.len()
    }

    pub fn grid_len(&self) -> usize {
        self.weights[0].len()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.weights[k]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn into_rows(self) -> Vec<Vec<f64>> {
        self.weights
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.weights.iter().map(|r| r[i]).collect()
    }

    /// Largest violation of nonnegativity or of the unit column sums.
    pub fn feasibility_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.grid_len() {
            let mut sum = 0.0;
            for r in &self.weights {
                worst = worst.max(-r[i]).max(r[i] - 1.0);
                sum += r[i];
            }
            worst = worst.max((sum - 1.0).abs());
        }
        worst
    }

    pub fn is_feasible(&self, tol: f64) -> bool {
        self.feasibility_error() <= tol
    }

    /// Cluster with the largest weight at each node (first on ties).
    pub fn argmax_labels(&self) -> Vec<usize> {
        (0..self.grid_len())
            .map(|i| {
                let mut best = 0;
                for k in 1..self.n_clusters() {
                    if self.weights[k][i] > self.weights[best][i] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    /// Same matrix with cluster `k` moved to position `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut weights = vec![Vec::new(); self.n_clusters()];
        for (k, &p) in perm.iter().enumerate() {
            weights[p] = self.weights[k].clone();
        }
        Self { weights }
    }

    /// CSV with header `t,gamma_1,…,gamma_K`, one row per node.
    pub fn write_csv<W: Write>(&self, out: W, t0: f64, dt: f64) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.n_clusters()).map(|k| format!("gamma_{k}")));
        w.write_record(&header)?;
        for i in 0..self.grid_len() {
            let mut rec = vec![(t0 + i as f64 * dt).to_string()];
            rec.extend(self.weights.iter().map(|r| r[i].to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format of [`write_csv`](Self::write_csv); returns the matrix
    /// and the time column.
    pub fn read_csv<R: Read>(input: R) -> Result<(Self, Vec<f64>)> {
        let mut r = csv::Reader::from_reader(input);
        let k = r.headers()?.len().saturating_sub(1);
        if k == 0 {
            return Err(Error::Parse(
                "gamma CSV needs a t column and at least one cluster".into(),
            ));
        }
        let mut times = Vec::new();
        let mut weights = vec![Vec::new(); k];
        for rec in r.records() {
            let rec = rec?;
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("`{s}`: {e}")));
            times.push(parse(&rec[0])?);
            for (j, row) in weights.iter_mut().enumerate() {
                row.push(parse(&rec[j + 1])?);
            }
        }
        Ok((Self::new(weights)?, times))
    }
}

/// Modeling-error vectors `b_k(τ)` stacked per cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedFitness {
    pub b: Vec<Vec<f64>>,
}

/// `b_j = ∫ f(t) v_j(t) dt` by the trapezoid rule on the fine grid, where
/// `v_j` is the hat function at `τ_j`.
pub fn reduce_fitness(fitness_row: &[f64], grid: &FemGrid) -> Vec<f64> {
    assert_eq!(fitness_row.len(), grid.n_fine, "fitness row does not match the grid");
    let mut b = vec![0.0; grid.n_coarse];
    for (i, &f) in fitness_row.iter().enumerate() {
        let (j, frac) = grid.locate(i);
        let wf = grid.trapezoid(i) * f;
        b[j] += (1.0 - frac) * wf;
        b[j + 1] += frac * wf;
    }
    b
}

/// Mass-weighted restriction of a fine function to the nodes,
/// `∫ γ v_j dt / ∫ v_j dt`. Preserves constants and the partition of unity.
pub fn restrict_row(row: &[f64], grid: &FemGrid) -> Vec<f64> {
    let mass = grid.lumped_mass();
    reduce_fitness(row, grid)
        .into_iter()
        .zip(mass)
        .map(|(b, m)| b / m)
        .collect()
}

pub fn restrict_gamma(gamma: &AffiliationMatrix, grid: &FemGrid) -> AffiliationMatrix {
    let mut out = AffiliationMatrix {
        weights: gamma.rows().iter().map(|r| restrict_row(r, grid)).collect(),
    };
    project_simplex_columns(&mut out);
    out
}

/// Piecewise-linear interpolation of nodal values onto the fine grid.
pub fn interpolate_row(coarse: &[f64], grid: &FemGrid) -> Vec<f64> {
    assert_eq!(coarse.len(), grid.n_coarse, "coarse row does not match the grid");
    (0..grid.n_fine)
        .map(|i| {
            let (j, frac) = grid.locate(i);
            (1.0 - frac) * coarse[j] + frac * coarse[j + 1]
        })
        .collect()
}

pub fn interpolate_gamma(gamma_coarse: &AffiliationMatrix, grid: &FemGrid) -> AffiliationMatrix {
    AffiliationMatrix {
        weights: gamma_coarse.rows().iter().map(|r| interpolate_row(r, grid)).collect(),
    }
}

/// Block-diagonal H1 stiffness `A = diag(H, …, H)` with `H` tridiagonal
/// (2 on the diagonal, −1 off it). Stored implicitly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stiffness {
    pub n_clusters: usize,
    pub n_coarse: usize,
}

pub fn assemble_stiffness(n_clusters: usize, n_coarse: usize) -> Stiffness {
    Stiffness { n_clusters, n_coarse }
}

impl Stiffness {
    /// `H x` for one cluster block.
    pub fn apply_block(&self, x: &[f64], out: &mut [f64]) {
        let n = x.len();
        for i in 0..n {
            let mut v = 2.0 * x[i];
            if i > 0 {
                v -= x[i - 1];
            }
            if i + 1 < n {
                v -= x[i + 1];
            }
            out[i] = v;
        }
    }

    /// `xᵀ H x` for one cluster block.
    pub fn quad_form_block(&self, x: &[f64]) -> f64 {
        let n = x.len();
        let mut s = 0.0;
        for i in 0..n {
            s += 2.0 * x[i] * x[i];
            if i + 1 < n {
                s -= 2.0 * x[i] * x[i + 1];
            }
        }
        s
    }

    pub fn quad_form(&self, gamma: &[Vec<f64>]) -> f64 {
        gamma.iter().map(|r| self.quad_form_block(r)).sum()
    }

    /// Dense `H`, for tests and small problems.
    pub fn dense_block(&self) -> Vec<Vec<f64>> {
        let n = self.n_coarse;
        let mut h = vec![vec![0.0; n]; n];
        for i in 0..n {
            h[i][i] = 2.0;
            if i + 1 < n {
                h[i][i + 1] = -1.0;
                h[i + 1][i] = -1.0;
            }
        }
        h
    }
}

/// Euclidean projection onto `{x ≥ 0, Σx = 1}` by sorting.
pub fn project_simplex(x: &mut [f64]) {
    // The projection commutes with adding a constant to every entry; shifting
    // by the maximum avoids cancellation for large inputs.
    let top = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for v in x.iter_mut() {
        *v -= top;
    }
    let mut u: Vec<f64> = x.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            tau = t;
        }
    }
    for v in x.iter_mut() {
        *v = (*v - tau).max(0.0);
    }
}

pub fn project_simplex_columns(gamma: &mut AffiliationMatrix) {
    project_rows(&mut gamma.weights);
}

fn project_rows(rows: &mut [Vec<f64>]) {
    let k = rows.len();
    let mut col = vec![0.0; k];
    for i in 0..rows[0].len() {
        for (c, r) in col.iter_mut().zip(rows.iter()) {
            *c = r[i];
        }
        project_simplex(&mut col);
        for (c, r) in col.iter().zip(rows.iter_mut()) {
            r[i] = *c;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QpConfig {
    pub max_iter: usize,
    /// Stop when `‖P(Γ − ∇q) − Γ‖_∞` falls below this.
    pub tol: f64,
    pub step_min: f64,
    pub step_max: f64,
    /// Length of the nonmonotone reference window.
    pub window: usize,
    /// Sufficient-decrease parameter.
    pub armijo: f64,
}

impl Default for QpConfig {
    fn default() -> Self {
        Self {
            max_iter: 10_000,
            tol: 1e-8,
            step_min: 1e-10,
            step_max: 1e10,
            window: 10,
            armijo: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub gamma: AffiliationMatrix,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub projected_gradient: f64,
}

/// `(1/N̂)(BᵀΓ + ε² ΓᵀAΓ)`.
pub fn qp_objective(b: &ReducedFitness, eps2: f64, gamma: &AffiliationMatrix) -> f64 {
    let n = gamma.grid_len();
    let stiff = assemble_stiffness(gamma.n_clusters(), n);
    let linear: f64 = b.b.iter().zip(gamma.rows()).map(|(bk, gk)| dot(bk, gk)).sum();
    (linear + eps2 * stiff.quad_form(gamma.rows())) / n as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Qp<'a> {
    b: &'a [Vec<f64>],
    eps2: f64,
    stiff: &'a Stiffness,
    scale: f64,
}

impl Qp<'_> {
    fn value(&self, x: &[Vec<f64>]) -> f64 {
        let lin: f64 = self.b.iter().zip(x).map(|(b, g)| dot(b, g)).sum();
        self.scale * (lin + self.eps2 * self.stiff.quad_form(x))
    }

    fn gradient(&self, x: &[Vec<f64>], out: &mut [Vec<f64>]) {
        for ((bk, xk), gk) in self.b.iter().zip(x).zip(out.iter_mut()) {
            self.stiff.apply_block(xk, gk);
            for (g, b) in gk.iter_mut().zip(bk) {
                *g = self.scale * (b + 2.0 * self.eps2 * *g);
            }
        }
    }
}

fn axpy_project(x: &[Vec<f64>], a: f64, d: &[Vec<f64>], out: &mut [Vec<f64>]) {
    for ((xk, dk), ok) in x.iter().zip(d).zip(out.iter_mut()) {
        for ((o, xv), dv) in ok.iter_mut().zip(xk).zip(dk) {
            *o = xv + a * dv;
        }
    }
    project_rows(out);
}

fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max)
}

/// Spectral projected gradient with Barzilai–Borwein steps and a
/// nonmonotone Armijo line search. Returns the best iterate seen.
pub fn solve_qp(
    b: &ReducedFitness,
    eps2: f64,
    stiff: &Stiffness,
    gamma0: &AffiliationMatrix,
    cfg: &QpConfig,
) -> Result<QpSolution> {
    let k = gamma0.n_clusters();
    let n = gamma0.grid_len();
    if b.b.len() != k || b.b.iter().any(|r| r.len() != n) {
        return Err(Error::contract("reduced fitness does not match the affiliation shape"));
    }
    if stiff.n_clusters != k || stiff.n_coarse != n {
        return Err(Error::contract("stiffness does not match the affiliation shape"));
    }
    if !(eps2 >= 0.0) {
        return Err(Error::contract(format!("eps2 must be nonnegative, got {eps2}")));
    }
    if !gamma0.is_feasible(1e-8) {
        return Err(Error::contract("initial affiliations are not on the simplex"));
    }
    let qp = Qp {
        b: &b.b,
        eps2,
        stiff,
        scale: 1.0 / n as f64,
    };

    let mut x = gamma0.weights.clone();
    project_rows(&mut x);
    let mut f = qp.value(&x);
    let mut g = vec![vec![0.0; n]; k];
    qp.gradient(&x, &mut g);

    let mut trial = x.clone();
    let mut d = x.clone();
    let mut g_new = g.clone();

    // Initial step from the projected gradient.
    axpy_project(&x, -1.0, &g, &mut trial);
    let mut pg = max_abs_diff(&trial, &x);
    let mut lambda = if pg > 0.0 {
        (1.0 / pg).clamp(cfg.step_min, cfg.step_max)
    } else {
        1.0
    };

    let mut history = std::collections::VecDeque::with_capacity(cfg.window.max(1));
    history.push_back(f);
    let (mut best_x, mut best_f) = (x.clone(), f);
    let mut iterations = 0;
    let mut converged = pg < cfg.tol;

    while !converged && iterations < cfg.max_iter {
        iterations += 1;
        axpy_project(&x, -lambda, &g, &mut trial);
        for ((dk, tk), xk) in d.iter_mut().zip(&trial).zip(&x) {
            for ((dv, tv), xv) in dk.iter_mut().zip(tk).zip(xk) {
                *dv = tv - xv;
            }
        }
        let gd: f64 = g.iter().zip(&d).map(|(a, b)| dot(a, b)).sum();
        if gd >= 0.0 {
            // No descent left at this step length; the projected gradient
            // check below decides convergence.
            axpy_project(&x, -1.0, &g, &mut trial);
            pg = max_abs_diff(&trial, &x);
            converged = pg < cfg.tol;
            if !converged {
                lambda = (lambda * 0.5).max(cfg.step_min);
                if lambda == cfg.step_min {
                    break;
                }
            }
            continue;
        }
        let f_ref = history.iter().copied().fold(f64::NEG_INFINITY, f64::max);

        // Backtracking along x + a·d, a ∈ (0, 1], with safeguarded quadratic
        // interpolation.
        let mut a = 1.0;
        let mut f_new;
        loop {
            for ((tk, xk), dk) in trial.iter_mut().zip(&x).zip(&d) {
                for ((t, xv), dv) in tk.iter_mut().zip(xk).zip(dk) {
                    *t = xv + a * dv;
                }
            }
            f_new = qp.value(&trial);
            if f_new <= f_ref + cfg.armijo * a * gd || a < 1e-16 {
                break;
            }
            let denom = f_new - f - a * gd;
            let a_q = if denom > 0.0 {
                -0.5 * a * a * gd / denom
            } else {
                0.5 * a
            };
            a = if a_q >= 0.1 * a && a_q <= 0.9 * a { a_q } else { 0.5 * a };
        }

        qp.gradient(&trial, &mut g_new);
        let (mut ss, mut sy) = (0.0, 0.0);
        for (((tk, xk), gnk), gk) in trial.iter().zip(&x).zip(&g_new).zip(&g) {
            for (((t, xv), gn), go) in tk.iter().zip(xk).zip(gnk).zip(gk) {
                let s = t - xv;
                ss += s * s;
                sy += s * (gn - go);
            }
        }
        std::mem::swap(&mut x, &mut trial);
        std::mem::swap(&mut g, &mut g_new);
        f = f_new;
        lambda = if sy > 0.0 {
            (ss / sy).clamp(cfg.step_min, cfg.step_max)
        } else {
            cfg.step_max
        };
        if history.len() == cfg.window.max(1) {
            history.pop_front();
        }
        history.push_back(f);
        if f < best_f {
            best_f = f;
            best_x.clone_from(&x);
        }
        debug_assert!(max_simplex_violation(&x) < 1e-9);

        axpy_project(&x, -1.0, &g, &mut trial);
        pg = max_abs_diff(&trial, &x);
        converged = pg < cfg.tol;
    }

    Ok(QpSolution {
        gamma: AffiliationMatrix { weights: best_x },
        objective: best_f,
        iterations,
        converged,
        projected_gradient: pg,
    })
}

fn max_simplex_violation(rows: &[Vec<f64>]) -> f64 {
    (0..rows[0].len())
        .map(|i| {
            let s: f64 = rows.iter().map(|r| r[i]).sum();
            let neg = rows.iter().map(|r| -r[i]).fold(0.0, f64::max);
            (s - 1.0).abs().max(neg)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(n: usize, nc: usize) -> FemGrid {
        FemGrid::with_coarse(n, nc, 0.1).unwrap()
    }

    #[test]
    fn grid_spacing() {
        let g = FemGrid::new(100, 1.0 / 3.0, 0.5).unwrap();
        assert_eq!(g.n_coarse, 33);
        assert!((g.dtau - 99.0 * 0.5 / 32.0).abs() < 1e-12);
        assert_eq!(FemGrid::new(10, 0.01, 1.0).unwrap().n_coarse, 2);
        assert!(FemGrid::new(10, 0.0, 1.0).is_err());
    }

    #[test]
    fn reduction_of_constants() {
        // Coarse nodes on fine nodes: the trapezoid rule is exact for hats.
        let g = grid(31, 11);
        let b = reduce_fitness(&vec![2.5; 31], &g);
        assert!((b[5] - 2.5 * g.dtau).abs() < 1e-12);
        assert!((b[0] - 2.5 * g.dtau / 2.0).abs() < 1e-12);
        assert!((b[10] - 2.5 * g.dtau / 2.0).abs() < 1e-12);
        // Total mass is the time span.
        let total: f64 = g.lumped_mass().iter().sum();
        assert!((total - 3.0).abs() < 1e-12);
    }

    #[test]
    fn reduction_on_non_nested_grid_is_close() {
        let g = grid(1000, 333);
        let b = reduce_fitness(&vec![1.0; 1000], &g);
        for &bj in &b[1..332] {
            assert!((bj - g.dtau).abs() < 0.05 * g.dtau);
        }
    }

    #[test]
    fn interpolate_after_reduce_reproduces_linears_at_full_resolution() {
        let g = grid(50, 50);
        let f: Vec<f64> = (0..50).map(|i| 1.0 + 0.3 * i as f64).collect();
        let back = interpolate_row(&restrict_row(&f, &g), &g);
        for (a, b) in f.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolation_examples() {
        let g = grid(3, 2);
        let gamma = AffiliationMatrix::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let fine = interpolate_gamma(&gamma, &g);
        assert_eq!(fine.column(1), vec![0.5, 0.5]);
        let c = AffiliationMatrix::uniform(3, 7);
        let fine = interpolate_gamma(&c, &grid(20, 7));
        assert!(fine.rows().iter().flatten().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn stiffness_examples() {
        let s = assemble_stiffness(1, 3);
        assert_eq!(
            s.dense_block(),
            vec![vec![2.0, -1.0, 0.0], vec![-1.0, 2.0, -1.0], vec![0.0, -1.0, 2.0]]
        );
        let s2 = assemble_stiffness(1, 2);
        assert!((s2.quad_form_block(&[0.7, 0.7]) - 0.49 * 2.0).abs() < 1e-15);
        let mut out = [0.0; 3];
        s.apply_block(&[1.0, 2.0, 3.0], &mut out);
        assert_eq!(out, [0.0, 0.0, 4.0]);
    }

    #[test]
    fn simplex_examples() {
        let mut a = [0.8, 0.8];
        project_simplex(&mut a);
        assert!((a[0] - 0.5).abs() < 1e-15 && (a[1] - 0.5).abs() < 1e-15);
        let mut b = [2.0, -1.0];
        project_simplex(&mut b);
        assert_eq!(b, [1.0, 0.0]);
        let mut c = [0.2, 0.3, 0.5];
        project_simplex(&mut c);
        assert_eq!(c, [0.2, 0.3, 0.5]);
    }

    /// Exhaustive KKT oracle for K = 2: the projection of (a, b) is
    /// (t, 1 − t) with t = clamp((1 + a − b)/2, 0, 1).
    fn project_two(a: f64, b: f64) -> (f64, f64) {
        let t = ((1.0 + a - b) / 2.0).clamp(0.0, 1.0);
        (t, 1.0 - t)
    }

    proptest! {
        #[test]
        fn simplex_projection_matches_two_cluster_oracle(a in -5.0..5.0f64, b in -5.0..5.0f64) {
            let mut x = [a, b];
            project_simplex(&mut x);
            let (p, q) = project_two(a, b);
            prop_assert!((x[0] - p).abs() < 1e-12 && (x[1] - q).abs() < 1e-12);
        }

        #[test]
        fn simplex_projection_is_feasible_and_optimal(v in prop::collection::vec(-3.0..3.0f64, 1..7)) {
            let mut x = v.clone();
            project_simplex(&mut x);
            let s: f64 = x.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(x.iter().all(|&e| e >= 0.0));
            // Optimality: (v − x)·(y − x) ≤ 0 for every vertex y.
            for j in 0..x.len() {
                let mut inner = 0.0;
                for i in 0..x.len() {
                    let y = if i == j { 1.0 } else { 0.0 };
                    inner += (v[i] - x[i]) * (y - x[i]);
                }
                prop_assert!(inner <= 1e-10);
            }
            // Idempotence.
            let mut again = x.clone();
            project_simplex(&mut again);
            for (a, b) in again.iter().zip(&x) {
                prop_assert!((a - b).abs() < 1e-14);
            }
        }

        #[test]
        fn stiffness_is_positive_semidefinite(x in prop::collection::vec(-10.0..10.0f64, 2..40)) {
            let s = assemble_stiffness(1, x.len());
            prop_assert!(s.quad_form_block(&x) >= -1e-9);
        }

        #[test]
        fn interpolation_preserves_partition_of_unity(
            raw in prop::collection::vec(prop::collection::vec(0.0..1.0f64, 6), 3),
            n_fine in 6usize..60,
        ) {
            let mut gamma = AffiliationMatrix::new(raw).unwrap();
            project_simplex_columns(&mut gamma);
            let g = FemGrid::with_coarse(n_fine, 6, 0.1).unwrap();
            let fine = interpolate_gamma(&gamma, &g);
            prop_assert!(fine.is_feasible(1e-12));
            let back = restrict_gamma(&fine, &g);
            prop_assert!(back.is_feasible(1e-12));
        }
    }

    fn dense_objective(b: &[Vec<f64>], eps2: f64, x: &[Vec<f64>]) -> f64 {
        let n = x[0].len();
        let h = assemble_stiffness(1, n).dense_block();
        let mut total = 0.0;
        for (bk, xk) in b.iter().zip(x) {
            for i in 0..n {
                total += bk[i] * xk[i];
                for j in 0..n {
                    total += eps2 * xk[i] * h[i][j] * xk[j];
                }
            }
        }
        total / n as f64
    }

    #[test]
    fn linear_qp_picks_row_minimum() {
        let b = ReducedFitness {
            b: vec![vec![1.0, 2.0], vec![3.0, 1.0]],
        };
        let g0 = AffiliationMatrix::uniform(2, 2);
        let sol = solve_qp(&b, 0.0, &assemble_stiffness(2, 2), &g0, &QpConfig::default()).unwrap();
        assert_eq!(sol.gamma.argmax_labels(), vec![0, 1]);
        assert!((sol.gamma.row(0)[0] - 1.0).abs() < 1e-10);
        assert!((sol.gamma.row(1)[1] - 1.0).abs() < 1e-10);
        let dense = dense_objective(&b.b, 0.0, sol.gamma.rows());
        assert!((sol.objective - dense).abs() < 1e-9);
    }

    #[test]
    fn heavy_regularization_flattens() {
        let n = 40;
        let b = ReducedFitness {
            b: vec![
                (0..n).map(|i| (i as f64 * 0.3).sin()).collect(),
                (0..n).map(|i| -(i as f64 * 0.3).sin()).collect(),
            ],
        };
        let labels: Vec<usize> = (0..n).map(|i| usize::from(i >= n / 2)).collect();
        let g0 = AffiliationMatrix::from_labels(&labels, 2).unwrap();
        let sol = solve_qp(&b, 1e9, &assemble_stiffness(2, n), &g0, &QpConfig::default()).unwrap();
        assert!(sol.gamma.is_feasible(1e-10));
        for row in sol.gamma.rows() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(var < 1e-6, "{var}");
        }
        let dense = dense_objective(&b.b, 1e9, sol.gamma.rows());
        assert!((sol.objective - dense).abs() < 1e-9 * dense.abs().max(1.0));
    }

    #[test]
    fn objective_does_not_exceed_start() {
        let n = 25;
        let b = ReducedFitness {
            b: (0..3)
                .map(|k| (0..n).map(|i| ((i * (k + 2)) as f64).cos()).collect())
                .collect(),
        };
        let g0 = AffiliationMatrix::uniform(3, n);
        for &eps2 in &[0.0, 0.1, 5.0, 100.0] {
            let sol = solve_qp(&b, eps2, &assemble_stiffness(3, n), &g0, &QpConfig::default()).unwrap();
            assert!(sol.objective <= qp_objective(&b, eps2, &g0) + 1e-15);
            assert!(sol.gamma.is_feasible(1e-10));
            assert!((sol.objective - qp_objective(&b, eps2, &sol.gamma)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_infeasible_start() {
        let b = ReducedFitness {
            b: vec![vec![0.0; 3]; 2],
        };
        let g0 = AffiliationMatrix::new(vec![vec![1.0; 3], vec![1.0; 3]]).unwrap();
        assert!(matches!(
            solve_qp(&b, 0.0, &assemble_stiffness(2, 3), &g0, &QpConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let gamma = AffiliationMatrix::new(vec![vec![0.25, 1.0 / 3.0], vec![0.75, 2.0 / 3.0]]).unwrap();
        let mut buf = Vec::new();
        gamma.write_csv(&mut buf, 0.0, 0.1).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,gamma_1,gamma_2\n"));
        let (back, t) = AffiliationMatrix::read_csv(&buf[..]).unwrap();
        assert_eq!(back, gamma);
        assert_eq!(t, vec![0.0, 0.1]);
    }
}
