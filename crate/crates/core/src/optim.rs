//! Derivative-free box-constrained minimization: controlled random search
//! with local mutation (global phase) and Powell's conjugate directions with
//! a bracketing Brent line search (local phase).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Axis-aligned box. Candidates are kept a small relative margin inside it
/// so open bounds such as `θ > 0` are respected.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Bounds {
    pub fn new(pairs: &[(f64, f64)]) -> Self {
        let margin = |a: f64, b: f64| 1e-9 * (b - a);
        Self {
            lo: pairs.iter().map(|&(a, b)| a + margin(a, b)).collect(),
            hi: pairs.iter().map(|&(a, b)| b - margin(a, b)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (a, b))| *v >= *a && *v <= *b)
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for ((v, a), b) in x.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.clamp(*a, *b);
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&a, &b)| a + (b - a) * rng.random::<f64>())
            .collect()
    }
}

/// Maps NaN to +∞ so comparisons stay total.
#[inline]
fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrsConfig {
    pub population: usize,
    /// Trial evaluations after the population has been evaluated.
    pub max_evals: usize,
    pub rel_tol: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    /// Best value after every evaluation, in order.
    pub trace: Vec<f64>,
}

fn converged(old: f64, new: f64, rel_tol: f64) -> bool {
    old.is_finite() && (old - new).abs() <= rel_tol * new.abs().max(f64::MIN_POSITIVE)
}

/// Controlled random search (CRS2) with local mutation. `seeds` are added
/// to the random population.
pub fn crs2_lm<F>(f: &F, bounds: &Bounds, seeds: &[Vec<f64>], cfg: &CrsConfig) -> Minimum
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let n = bounds.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let size = cfg.population.max(n + 2).max(seeds.len());
    let mut pop: Vec<Vec<f64>> = seeds
        .iter()
        .map(|s| {
            let mut s = s.clone();
            bounds.clamp(&mut s);
            s
        })
        .collect();
    while pop.len() < size {
        pop.push(bounds.sample(&mut rng));
    }
    let mut vals: Vec<f64> = pop.par_iter().map(|x| sanitize(f(x))).collect();

    let best_of = |vals: &[f64]| (0..vals.len()).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    let worst_of = |vals: &[f64]| (0..vals.len()).max_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();

    let mut best = best_of(&vals);
    let mut worst = worst_of(&vals);
    let mut trace = vec![vals[best]];
    let mut evals = 0;
    let mut picks = Vec::with_capacity(n);
    let mut trial = vec![0.0; n];

    while evals < cfg.max_evals {
        // Reflection of a random point through the centroid of the best
        // point and n − 1 others; resample until it lands inside the box.
        let mut inside = false;
        for _ in 0..100 {
            picks.clear();
            while picks.len() < n {
                let j = rng.random_range(0..pop.len());
                if j != best && !picks.contains(&j) {
                    picks.push(j);
                }
            }
            for d in 0..n {
                let mut c = pop[best][d];
                for &j in &picks[..n - 1] {
                    c += pop[j][d];
                }
                c /= n as f64;
                trial[d] = 2.0 * c - pop[picks[n - 1]][d];
            }
            if bounds.contains(&trial) {
                inside = true;
                break;
            }
        }
        if !inside {
            bounds.clamp(&mut trial);
        }
        let mut ft = sanitize(f(&trial));
        evals += 1;
        trace.push(vals[best].min(ft));
        if ft >= vals[worst] && evals < cfg.max_evals {
            // Local mutation between the best point and the rejected trial.
            let mutated: Vec<f64> = (0..n)
                .map(|d| {
                    let w: f64 = rng.random();
                    (1.0 + w) * pop[best][d] - w * trial[d]
                })
                .collect();
            trial = mutated;
            bounds.clamp(&mut trial);
            ft = sanitize(f(&trial));
            evals += 1;
            trace.push(vals[best].min(ft));
        }
        if ft < vals[worst] {
            pop[worst].copy_from_slice(&trial);
            vals[worst] = ft;
            if ft < vals[best] {
                let old = vals[best];
                best = worst;
                if converged(old, ft, cfg.rel_tol) {
                    break;
                }
            }
            worst = worst_of(&vals);
        }
    }
    Minimum {
        x: pop[best].clone(),
        f: vals[best],
        evals,
        trace,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowellConfig {
    pub max_evals: usize,
    pub rel_tol: f64,
}

struct Budget<'a, F> {
    f: &'a mut F,
    evals: usize,
    max: usize,
    best_x: Vec<f64>,
    best_f: f64,
    trace: Vec<f64>,
}

impl<F: FnMut(&[f64]) -> f64> Budget<'_, F> {
    fn exhausted(&self) -> bool {
        self.evals >= self.max
    }

    fn eval(&mut self, x: &[f64]) -> f64 {
        self.evals += 1;
        let v = sanitize((self.f)(x));
        if v < self.best_f {
            self.best_f = v;
            self.best_x.copy_from_slice(x);
        }
        self.trace.push(self.best_f);
        v
    }
}

/// Feasible range of `t` for `x + t·d` inside the box.
fn step_range(bounds: &Bounds, x: &[f64], d: &[f64]) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..x.len() {
        if d[i] > 0.0 {
            lo = lo.max((bounds.lo[i] - x[i]) / d[i]);
            hi = hi.min((bounds.hi[i] - x[i]) / d[i]);
        } else if d[i] < 0.0 {
            lo = lo.max((bounds.hi[i] - x[i]) / d[i]);
            hi = hi.min((bounds.lo[i] - x[i]) / d[i]);
        }
    }
    (lo.min(0.0), hi.max(0.0))
}

const GOLD: f64 = 1.618_033_988_749_895;
const CGOLD: f64 = 0.381_966_011_250_105;

/// Minimizes `f(x + t·d)` over `t` within the box, starting from `t = 0`
/// with value `f0`. Returns the best `t` and its value.
fn line_search<F: FnMut(&[f64]) -> f64>(
    budget: &mut Budget<'_, F>,
    bounds: &Bounds,
    x: &[f64],
    d: &[f64],
    f0: f64,
    step: f64,
    tol: f64,
) -> (f64, f64) {
    let (t_min, t_max) = step_range(bounds, x, d);
    if t_max - t_min <= 0.0 {
        return (0.0, f0);
    }
    let mut point = x.to_vec();
    let mut at = |budget: &mut Budget<'_, F>, t: f64| {
        for i in 0..x.len() {
            point[i] = x[i] + t * d[i];
        }
        bounds.clamp(&mut point);
        budget.eval(&point)
    };

    // Bracket: a < b < c with f(b) below both ends, or stop at a wall.
    let (mut a, mut fa) = (0.0, f0);
    let mut b = step.clamp(t_min, t_max);
    if b == 0.0 {
        b = if t_max > 0.0 {
            t_max.min(step.abs())
        } else {
            t_min.max(-step.abs())
        };
    }
    if budget.exhausted() {
        return (0.0, f0);
    }
    let mut fb = at(budget, b);
    if fb > fa {
        std::mem::swap(&mut a, &mut b);
        std::mem::swap(&mut fa, &mut fb);
    }
    let dir = (b - a).signum();
    let wall = if dir > 0.0 { t_max } else { t_min };
    let mut c = (b + GOLD * (b - a)).clamp(t_min, t_max);
    if budget.exhausted() {
        return if fb < f0 { (b, fb) } else { (0.0, f0) };
    }
    let mut fc = if c == b { fb } else { at(budget, c) };
    while fc < fb && !budget.exhausted() {
        if c == wall {
            return (c, fc);
        }
        a = b;
        b = c;
        fb = fc;
        c = (b + GOLD * (b - a)).clamp(t_min, t_max);
        fc = at(budget, c);
    }
    if fc < fb {
        return (c, fc);
    }

    // Brent's method on [min(a, c), max(a, c)] around b.
    let (mut lo, mut hi) = if a < c { (a, c) } else { (c, a) };
    let (mut xb, mut w, mut v) = (b, b, b);
    let (mut fx, mut fw, mut fv) = (fb, fb, fb);
    let (mut e, mut dd): (f64, f64) = (0.0, 0.0);
    while !budget.exhausted() {
        let xm = 0.5 * (lo + hi);
        let tol1 = tol * xb.abs() + 1e-12;
        let tol2 = 2.0 * tol1;
        if (xb - xm).abs() <= tol2 - 0.5 * (hi - lo) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (xb - w) * (fx - fv);
            let mut q = (xb - v) * (fx - fw);
            let mut p = (xb - v) * q - (xb - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            if p.abs() < (0.5 * q * e).abs() && p > q * (lo - xb) && p < q * (hi - xb) {
                e = dd;
                dd = p / q;
                let u = xb + dd;
                if u - lo < tol2 || hi - u < tol2 {
                    dd = tol1.copysign(xm - xb);
                }
                golden = false;
            }
        }
        if golden {
            e = if xb >= xm { lo - xb } else { hi - xb };
            dd = CGOLD * e;
        }
        let u = if dd.abs() >= tol1 {
            xb + dd
        } else {
            xb + tol1.copysign(dd)
        };
        let fu = at(budget, u);
        if fu <= fx {
            if u >= xb {
                lo = xb;
            } else {
                hi = xb;
            }
            v = w;
            fv = fw;
            w = xb;
            fw = fx;
            xb = u;
            fx = fu;
        } else {
            if u < xb {
                lo = u;
            } else {
                hi = u;
            }
            if fu <= fw || w == xb {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == xb || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    if fx < f0 {
        (xb, fx)
    } else {
        (0.0, f0)
    }
}

/// Powell's conjugate-direction method inside a box, starting at `x0`
/// whose value `f0` is already known.
pub fn powell<F: FnMut(&[f64]) -> f64>(f: &mut F, bounds: &Bounds, x0: &[f64], f0: f64, cfg: &PowellConfig) -> Minimum {
    let n = x0.len();
    let mut x = x0.to_vec();
    bounds.clamp(&mut x);
    let mut budget = Budget {
        f,
        evals: 0,
        max: cfg.max_evals,
        best_x: x.clone(),
        best_f: sanitize(f0),
        trace: Vec::new(),
    };
    let mut fx = sanitize(f0);
    // Coordinate directions scaled to the box.
    let mut dirs: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut d = vec![0.0; n];
            d[i] = bounds.hi[i] - bounds.lo[i];
            d
        })
        .collect();
    let mut steps = vec![0.01; n];
    let line_tol = 0.1;

    while !budget.exhausted() {
        let (x_start, f_start) = (x.clone(), fx);
        let mut biggest = (0, 0.0);
        for (i, d) in dirs.iter().enumerate() {
            if budget.exhausted() {
                break;
            }
            let before = fx;
            let (t, ft) = line_search(&mut budget, bounds, &x, d, fx, steps[i], line_tol);
            if ft < fx {
                for (xi, di) in x.iter_mut().zip(d) {
                    *xi += t * di;
                }
                bounds.clamp(&mut x);
                fx = ft;
                steps[i] = t.abs().max(1e-6);
            } else {
                steps[i] = (steps[i] * 0.25).max(1e-8);
            }
            if before - fx > biggest.1 {
                biggest = (i, before - fx);
            }
        }
        if converged(f_start, fx, cfg.rel_tol) || budget.exhausted() {
            break;
        }
        // The net displacement of the sweep replaces the direction of largest
        // decrease, unless the extrapolated point shows that doing so would
        // make the set nearly dependent (Powell's test).
        let mut new_dir: Vec<f64> = x.iter().zip(&x_start).map(|(a, b)| a - b).collect();
        let length = new_dir
            .iter()
            .zip(bounds.lo.iter().zip(&bounds.hi))
            .map(|(d, (lo, hi))| (d / (hi - lo)).powi(2))
            .sum::<f64>()
            .sqrt();
        if length == 0.0 {
            continue;
        }
        let mut extrapolated: Vec<f64> = x.iter().zip(&new_dir).map(|(a, d)| a + d).collect();
        bounds.clamp(&mut extrapolated);
        let fe = budget.eval(&extrapolated);
        if fe >= f_start {
            continue;
        }
        let (decrease, total) = (biggest.1, f_start - fx);
        let test = 2.0 * (f_start - 2.0 * fx + fe) * (total - decrease).powi(2) - decrease * (f_start - fe).powi(2);
        if test >= 0.0 {
            continue;
        }
        // Directions are kept at unit length in box units, so step lengths
        // stay comparable between old and new directions.
        new_dir.iter_mut().for_each(|d| *d /= length);
        let (t, ft) = line_search(&mut budget, bounds, &x, &new_dir, fx, length, line_tol);
        if ft < fx {
            for (xi, di) in x.iter_mut().zip(&new_dir) {
                *xi += t * di;
            }
            bounds.clamp(&mut x);
            fx = ft;
        }
        dirs.remove(biggest.0);
        steps.remove(biggest.0);
        dirs.push(new_dir);
        steps.push(if t != 0.0 { t.abs() } else { length });
    }
    Minimum {
        x: budget.best_x,
        f: budget.best_f,
        evals: budget.evals,
        trace: budget.trace,
    }
}
