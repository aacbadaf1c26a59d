//! Path simulation of scalar SDEs with Euler–Maruyama or Milstein steps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{SdeModel, StateDomain};
use crate::series::UniformTimeSeries;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    EulerMaruyama,
    Milstein,
}

impl Scheme {
    /// Milstein when the diffusion depends on the state, Euler–Maruyama
    /// otherwise.
    pub fn for_model(model: &dyn SdeModel) -> Self {
        if model.state_dependent_diffusion() {
            Scheme::Milstein
        } else {
            Scheme::EulerMaruyama
        }
    }
}

/// What happens when a step leaves the state domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OnExit {
    Reflect,
    Fail,
}

/// One step of size `h` driven by the Wiener increment `dw`.
pub fn sde_step(model: &dyn SdeModel, theta: &[f64], x: f64, h: f64, dw: f64, scheme: Scheme) -> f64 {
    let g = model.diffusion(x, theta);
    let mut next = x + model.drift(x, theta) * h + g * dw;
    if scheme == Scheme::Milstein {
        next += 0.5 * g * model.diffusion_dx(x, theta) * (dw * dw - h);
    }
    next
}

/// Mirrors `x` back into the open domain; falls back to halfway between
/// `prev` and the crossed boundary when the mirror image is still outside.
pub fn reflect_into(domain: StateDomain, x: f64, prev: f64) -> f64 {
    let mut y = x;
    if y <= domain.lo {
        y = 2.0 * domain.lo - y;
    } else if y >= domain.hi {
        y = 2.0 * domain.hi - y;
    }
    if domain.contains(y) {
        return y;
    }
    if x <= domain.lo {
        0.5 * (prev + domain.lo)
    } else {
        0.5 * (prev + domain.hi)
    }
}

/// Stepping state of one path.
#[derive(Debug)]
pub struct Integrator<'a> {
    model: &'a dyn SdeModel,
    scheme: Scheme,
    on_exit: OnExit,
    pub x: f64,
    pub h: f64,
    /// Steps that left the domain and were reflected.
    pub reflections: usize,
}

impl<'a> Integrator<'a> {
    pub fn new(model: &'a dyn SdeModel, x0: f64, h: f64, scheme: Scheme, on_exit: OnExit) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::contract(format!("step size must be positive, got {h}")));
        }
        model.check_state(x0, None)?;
        Ok(Self {
            model,
            scheme,
            on_exit,
            x: x0,
            h,
            reflections: 0,
        })
    }

    pub fn advance(&mut self, theta: &[f64], dw: f64) -> Result<f64> {
        let next = sde_step(self.model, theta, self.x, self.h, dw, self.scheme);
        let domain = self.model.state_domain();
        self.x = if domain.contains(next) {
            next
        } else if !next.is_finite() {
            return Err(Error::Simulation(format!(
                "non-finite state after a step from x = {} with θ = {theta:?}",
                self.x
            )));
        } else {
            match self.on_exit {
                OnExit::Fail => {
                    return Err(Error::Simulation(format!(
                        "state {next} left the domain of `{}` (step {})",
                        self.model.id(),
                        self.h
                    )))
                }
                OnExit::Reflect => {
                    self.reflections += 1;
                    reflect_into(domain, next, self.x)
                }
            }
        };
        Ok(self.x)
    }
}

/// Simulates with fixed θ, `substeps` internal steps per output step, and
/// reflection at the domain boundary.
pub fn simulate_stationary(
    model: &dyn SdeModel,
    theta: &[f64],
    x0: f64,
    n: usize,
    dt: f64,
    substeps: usize,
    seed: u64,
) -> Result<UniformTimeSeries> {
    model.check_params(theta)?;
    if substeps == 0 {
        return Err(Error::contract("substeps must be positive"));
    }
    let h = dt / substeps as f64;
    let sqrt_h = h.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut it = Integrator::new(model, x0, h, Scheme::for_model(model), OnExit::Reflect)?;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(it.x);
        for _ in 0..substeps {
            let z: f64 = StandardNormal.sample(&mut rng);
            it.advance(theta, sqrt_h * z)?;
        }
    }
    if it.reflections > 0 {
        log::warn!("{} steps reflected at the domain boundary", it.reflections);
    }
    UniformTimeSeries::new(0.0, dt, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{builtin, builtin_ou};

    #[test]
    fn euler_step_by_hand() {
        let m = builtin_ou();
        let x = sde_step(&m, &[1.0, 2.0, 0.5], 1.0, 0.1, 0.2, Scheme::EulerMaruyama);
        assert!((x - (1.0 + (1.0 - 2.0) * 0.1 + 0.5 * 0.2)).abs() < 1e-15);
        // Constant diffusion: the Milstein correction vanishes.
        assert_eq!(x, sde_step(&m, &[1.0, 2.0, 0.5], 1.0, 0.1, 0.2, Scheme::Milstein));
    }

    #[test]
    fn milstein_correction_for_geometric_noise() {
        let m = builtin("logdrift").unwrap();
        let (x, h, dw, th) = (1.5f64, 0.01, 0.05, [1.0, 0.4]);
        let euler = x + (2.0 - x - (x * x).ln()) * h + 0.4 * x * dw;
        let expected = euler + 0.5 * 0.4 * x * 0.4 * (dw * dw - h);
        assert!((sde_step(m.as_ref(), &th, x, h, dw, Scheme::Milstein) - expected).abs() < 1e-15);
    }

    #[test]
    fn reflection_stays_inside() {
        assert_eq!(reflect_into(StateDomain::POSITIVE, -0.5, 1.0), 0.5);
        assert_eq!(reflect_into(StateDomain::POSITIVE, 0.0, 1.0), 0.5);
        let d = StateDomain { lo: 0.0, hi: 1.0 };
        assert!((reflect_into(d, 1.25, 0.9) - 0.75).abs() < 1e-15);
        assert_eq!(reflect_into(d, 3.0, 0.9), 0.95);
    }

    #[test]
    fn zero_noise_is_an_ode() {
        let m = builtin_ou();
        let a = simulate_stationary(&m, &[1.0, 1.0, 0.0], 3.0, 200, 0.05, 10, 1).unwrap();
        let b = simulate_stationary(&m, &[1.0, 1.0, 0.0], 3.0, 200, 0.05, 10, 2).unwrap();
        assert_eq!(a, b);
        let t = a.time(199);
        assert!((a.values[199] - (1.0 + 2.0 * (-t).exp())).abs() < 1e-3);
    }

    #[test]
    fn ou_long_run_moments() {
        let s = simulate_stationary(&builtin_ou(), &[2.0, 1.0, 1.0], 2.0, 200_000, 0.1, 10, 5).unwrap();
        let n = s.len() as f64;
        let mean = s.values.iter().sum::<f64>() / n;
        let var = s.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((mean - 2.0).abs() < 0.05, "{mean}");
        assert!((var - 0.5).abs() < 0.03, "{var}");
    }

    #[test]
    fn fail_policy_reports_domain_exit() {
        let m = builtin("logdrift").unwrap();
        let mut it = Integrator::new(m.as_ref(), 0.5, 0.1, Scheme::EulerMaruyama, OnExit::Fail).unwrap();
        assert!(matches!(it.advance(&[1.0, 1.0], -3.0), Err(Error::Simulation(_))));
    }
}
