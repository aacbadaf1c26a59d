//! Scalar Itô SDE models `dX = f(X; θ) dt + g(X; θ) dW`.
//!
//! Every model carries its Lamperti transform `F` (with `F' = 1/g`), the
//! inverse `F⁻¹`, and the drift `μ` of the unit-diffusion process `Y = F(X)`
//! together with its first five derivatives. The transition density
//! expansion in [`crate::hermite`] consumes those derivatives directly, so the
//! builtin models supply them in closed form.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Open interval `(lo, hi)` of admissible states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateDomain {
    pub lo: f64,
    pub hi: f64,
}

impl StateDomain {
    pub const REAL_LINE: StateDomain = StateDomain {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
    };
    pub const POSITIVE: StateDomain = StateDomain {
        lo: 0.0,
        hi: f64::INFINITY,
    };

    pub fn contains(&self, x: f64) -> bool {
        x > self.lo && x < self.hi
    }
}

pub trait SdeModel: Send + Sync + fmt::Debug {
    /// Identifier used in configs ("ou", "logdrift", "doublewell", ...).
    fn id(&self) -> &str;

    fn n_params(&self) -> usize;

    fn drift(&self, x: f64, theta: &[f64]) -> f64;

    fn diffusion(&self, x: f64, theta: &[f64]) -> f64;

    /// `∂g/∂x`, needed by the Milstein scheme and by the transformed drift.
    fn diffusion_dx(&self, x: f64, theta: &[f64]) -> f64;

    fn lamperti(&self, x: f64, theta: &[f64]) -> f64;

    fn lamperti_inverse(&self, y: f64, theta: &[f64]) -> f64;

    /// `[μ, μ′, μ″, μ⁽³⁾, μ⁽⁴⁾, μ⁽⁵⁾]` at `y`.
    fn transformed_drift_derivs(&self, y: f64, theta: &[f64]) -> [f64; 6];

    fn param_bounds(&self) -> &[(f64, f64)];

    fn state_domain(&self) -> StateDomain;

    /// Whether `g` depends on the state (selects Milstein over Euler–Maruyama).
    fn state_dependent_diffusion(&self) -> bool {
        true
    }

    fn check_state(&self, x: f64, index: Option<usize>) -> Result<()> {
        if x.is_finite() && self.state_domain().contains(x) {
            Ok(())
        } else {
            Err(Error::Domain {
                model: self.id().to_string(),
                value: x,
                index,
            })
        }
    }

    fn check_params(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(Error::contract(format!(
                "model `{}` takes {} parameters, got {}",
                self.id(),
                self.n_params(),
                theta.len()
            )));
        }
        Ok(())
    }
}

/// Shared, thread-safe handle to a model.
pub type ModelRef = Arc<dyn SdeModel>;

/// Transformed drift evaluated from `f`, `g` and `∂g/∂x` at `x = F⁻¹(y)`:
/// `μ(y) = f/g − ½ ∂g/∂x`.
pub fn lamperti_drift(model: &dyn SdeModel, y: f64, theta: &[f64]) -> f64 {
    let x = model.lamperti_inverse(y, theta);
    model.drift(x, theta) / model.diffusion(x, theta) - 0.5 * model.diffusion_dx(x, theta)
}

/// Looks up a builtin model by its identifier.
pub fn builtin(id: &str) -> Result<ModelRef> {
    match id {
        "ou" => Ok(Arc::new(builtin_ou())),
        "logdrift" => Ok(Arc::new(builtin_logdrift())),
        "doublewell" => Ok(Arc::new(builtin_doublewell())),
        other => Err(Error::UnknownModel(other.to_string())),
    }
}

/// `dX = (θ₁ − θ₂X) dt + θ₃ dW`.
#[derive(Debug, Clone)]
pub struct OrnsteinUhlenbeck {
    bounds: Vec<(f64, f64)>,
}

pub fn builtin_ou() -> OrnsteinUhlenbeck {
    OrnsteinUhlenbeck {
        bounds: vec![(-20.0, 20.0), (0.0, 20.0), (0.0, 20.0)],
    }
}

impl OrnsteinUhlenbeck {
    pub fn with_bounds(bounds: Vec<(f64, f64)>) -> Self {
        assert_eq!(bounds.len(), 3);
        Self { bounds }
    }
}

impl SdeModel for OrnsteinUhlenbeck {
    fn id(&self) -> &str {
        "ou"
    }
    fn n_params(&self) -> usize {
        3
    }
    fn drift(&self, x: f64, theta: &[f64]) -> f64 {
        theta[0] - theta[1] * x
    }
    fn diffusion(&self, _x: f64, theta: &[f64]) -> f64 {
        theta[2]
    }
    fn diffusion_dx(&self, _x: f64, _theta: &[f64]) -> f64 {
        0.0
    }
    fn lamperti(&self, x: f64, theta: &[f64]) -> f64 {
        x / theta[2]
    }
    fn lamperti_inverse(&self, y: f64, theta: &[f64]) -> f64 {
        theta[2] * y
    }
    fn transformed_drift_derivs(&self, y: f64, theta: &[f64]) -> [f64; 6] {
        [theta[0] / theta[2] - theta[1] * y, -theta[1], 0.0, 0.0, 0.0, 0.0]
    }
    fn param_bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }
    fn state_domain(&self) -> StateDomain {
        StateDomain::REAL_LINE
    }
    fn state_dependent_diffusion(&self) -> bool {
        false
    }
}

/// `dX = (2 − θ₁X − ln X²) dt + θ₂X dW` on `X > 0`.
#[derive(Debug, Clone)]
pub struct LogDrift {
    bounds: Vec<(f64, f64)>,
}

pub fn builtin_logdrift() -> LogDrift {
    LogDrift {
        bounds: vec![(-10.0, 10.0), (0.0, 10.0)],
    }
}

impl SdeModel for LogDrift {
    fn id(&self) -> &str {
        "logdrift"
    }
    fn n_params(&self) -> usize {
        2
    }
    fn drift(&self, x: f64, theta: &[f64]) -> f64 {
        2.0 - theta[0] * x - (x * x).ln()
    }
    fn diffusion(&self, x: f64, theta: &[f64]) -> f64 {
        theta[1] * x
    }
    fn diffusion_dx(&self, _x: f64, theta: &[f64]) -> f64 {
        theta[1]
    }
    fn lamperti(&self, x: f64, theta: &[f64]) -> f64 {
        x.ln() / theta[1]
    }
    fn lamperti_inverse(&self, y: f64, theta: &[f64]) -> f64 {
        (theta[1] * y).exp()
    }
    fn transformed_drift_derivs(&self, y: f64, theta: &[f64]) -> [f64; 6] {
        // μ(y) = (2/a)(1 − a y) e^{−a y} − θ₁/a − a/2 with a = θ₂, and
        // dⁿ/dyⁿ [(1 − a y) e^{−a y}] = (−a)ⁿ (1 + n − a y) e^{−a y}.
        let a = theta[1];
        let ay = a * y;
        let e = (-ay).exp();
        let mut out = [0.0; 6];
        out[0] = 2.0 / a * (1.0 - ay) * e - theta[0] / a - 0.5 * a;
        let mut pow = 1.0;
        for (n, slot) in out.iter_mut().enumerate().skip(1) {
            pow *= -a;
            *slot = 2.0 / a * pow * (1.0 + n as f64 - ay) * e;
        }
        out
    }
    fn param_bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }
    fn state_domain(&self) -> StateDomain {
        StateDomain::POSITIVE
    }
}

/// `dX = (θ₁X − X³) dt + θ₂√(1 + X²) dW`.
#[derive(Debug, Clone)]
pub struct DoubleWell {
    bounds: Vec<(f64, f64)>,
}

pub fn builtin_doublewell() -> DoubleWell {
    DoubleWell {
        bounds: vec![(-10.0, 10.0), (0.0, 10.0)],
    }
}

impl SdeModel for DoubleWell {
    fn id(&self) -> &str {
        "doublewell"
    }
    fn n_params(&self) -> usize {
        2
    }
    fn drift(&self, x: f64, theta: &[f64]) -> f64 {
        theta[0] * x - x * x * x
    }
    fn diffusion(&self, x: f64, theta: &[f64]) -> f64 {
        theta[1] * (1.0 + x * x).sqrt()
    }
    fn diffusion_dx(&self, x: f64, theta: &[f64]) -> f64 {
        theta[1] * x / (1.0 + x * x).sqrt()
    }
    fn lamperti(&self, x: f64, theta: &[f64]) -> f64 {
        x.asinh() / theta[1]
    }
    fn lamperti_inverse(&self, y: f64, theta: &[f64]) -> f64 {
        (theta[1] * y).sinh()
    }
    fn transformed_drift_derivs(&self, y: f64, theta: &[f64]) -> [f64; 6] {
        // With s = θ₂y: μ = [c tanh s − ½ sinh 2s] / θ₂, c = θ₁ + 1 − θ₂²/2,
        // so μ⁽ⁿ⁾ = θ₂ⁿ⁻¹ [c tanh⁽ⁿ⁾(s) − 2ⁿ⁻¹ sinh⁽ⁿ⁾(2s)].
        let b = theta[1];
        let s = b * y;
        let c = theta[0] + 1.0 - 0.5 * b * b;
        let t = s.tanh();
        let t2 = t * t;
        let sech2 = 1.0 - t2;
        let tanh_d = [
            t,
            sech2,
            -2.0 * t * sech2,
            -2.0 + 8.0 * t2 - 6.0 * t2 * t2,
            16.0 * t - 40.0 * t2 * t + 24.0 * t2 * t2 * t,
            16.0 - 136.0 * t2 + 240.0 * t2 * t2 - 120.0 * t2 * t2 * t2,
        ];
        let (sh, ch) = ((2.0 * s).sinh(), (2.0 * s).cosh());
        let mut out = [0.0; 6];
        let mut bpow = 1.0 / b;
        let mut two_pow = 0.5;
        for (n, slot) in out.iter_mut().enumerate() {
            let hyper = if n % 2 == 0 { sh } else { ch };
            *slot = bpow * (c * tanh_d[n] - two_pow * hyper);
            bpow *= b;
            two_pow *= 2.0;
        }
        out
    }
    fn param_bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }
    fn state_domain(&self) -> StateDomain {
        StateDomain::REAL_LINE
    }
}

type ScalarFn = Box<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// A user model given only `f`, `g`, `F` and `F⁻¹`.
///
/// `∂g/∂x` and the derivatives of `μ` are taken by central finite
/// differences. Fifth-order differences are noisy, so expect the density
/// expansion to be noticeably less accurate than with closed forms.
pub struct FiniteDifferenceModel {
    id: String,
    n_params: usize,
    drift: ScalarFn,
    diffusion: ScalarFn,
    lamperti: ScalarFn,
    lamperti_inverse: ScalarFn,
    bounds: Vec<(f64, f64)>,
    domain: StateDomain,
    /// Relative stencil step for each derivative order of μ (index 0 unused).
    pub steps: [f64; 6],
}

impl fmt::Debug for FiniteDifferenceModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FiniteDifferenceModel")
            .field("id", &self.id)
            .field("n_params", &self.n_params)
            .field("bounds", &self.bounds)
            .field("domain", &self.domain)
            .finish()
    }
}

impl FiniteDifferenceModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: impl Into<String>,
        bounds: Vec<(f64, f64)>,
        domain: StateDomain,
        drift: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        diffusion: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        lamperti: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        lamperti_inverse: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            id: id.into(),
            n_params: bounds.len(),
            drift: Box::new(drift),
            diffusion: Box::new(diffusion),
            lamperti: Box::new(lamperti),
            lamperti_inverse: Box::new(lamperti_inverse),
            bounds,
            domain,
            steps: [0.0, 5e-4, 3e-3, 1e-2, 2e-2, 4e-2],
        }
    }
}

impl SdeModel for FiniteDifferenceModel {
    fn id(&self) -> &str {
        &self.id
    }
    fn n_params(&self) -> usize {
        self.n_params
    }
    fn drift(&self, x: f64, theta: &[f64]) -> f64 {
        (self.drift)(x, theta)
    }
    fn diffusion(&self, x: f64, theta: &[f64]) -> f64 {
        (self.diffusion)(x, theta)
    }
    fn diffusion_dx(&self, x: f64, theta: &[f64]) -> f64 {
        let h = 1e-6 * x.abs().max(1.0);
        ((self.diffusion)(x + h, theta) - (self.diffusion)(x - h, theta)) / (2.0 * h)
    }
    fn lamperti(&self, x: f64, theta: &[f64]) -> f64 {
        (self.lamperti)(x, theta)
    }
    fn lamperti_inverse(&self, y: f64, theta: &[f64]) -> f64 {
        (self.lamperti_inverse)(y, theta)
    }
    fn transformed_drift_derivs(&self, y: f64, theta: &[f64]) -> [f64; 6] {
        let scale = y.abs().max(1.0);
        let m = |h: f64, k: i32| lamperti_drift(self, y + k as f64 * h, theta);
        let mut out = [m(0.0, 0), 0.0, 0.0, 0.0, 0.0, 0.0];
        for (order, slot) in out.iter_mut().enumerate().skip(1) {
            let h = self.steps[order] * scale;
            let s = |k| m(h, k);
            *slot = match order {
                1 => (s(1) - s(-1)) / (2.0 * h),
                2 => (s(1) - 2.0 * s(0) + s(-1)) / (h * h),
                3 => (s(2) - 2.0 * s(1) + 2.0 * s(-1) - s(-2)) / (2.0 * h.powi(3)),
                4 => (s(2) - 4.0 * s(1) + 6.0 * s(0) - 4.0 * s(-1) + s(-2)) / h.powi(4),
                _ => (s(3) - 4.0 * s(2) + 5.0 * s(1) - 5.0 * s(-1) + 4.0 * s(-2) - s(-3)) / (2.0 * h.powi(5)),
            };
        }
        out
    }
    fn param_bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }
    fn state_domain(&self) -> StateDomain {
        self.domain
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn builtins() -> Vec<ModelRef> {
        ["ou", "logdrift", "doublewell"]
            .iter()
            .map(|id| builtin(id).unwrap())
            .collect()
    }

    /// Interior sample from the parameter box, kept away from the open ends.
    fn random_theta(model: &dyn SdeModel, rng: &mut impl Rng) -> Vec<f64> {
        model
            .param_bounds()
            .iter()
            .map(|&(lo, hi)| {
                let (lo, hi) = (lo.max(-5.0), hi.min(5.0));
                let lo = if lo == 0.0 { 0.2 } else { lo };
                rng.random_range(lo..hi)
            })
            .collect()
    }

    fn state_grid(model: &dyn SdeModel) -> Vec<f64> {
        let (lo, hi) = if model.state_domain().lo == 0.0 {
            (0.05, 4.0)
        } else {
            (-3.0, 3.0)
        };
        (0..=40).map(|i| lo + (hi - lo) * i as f64 / 40.0).collect()
    }

    #[test]
    fn ou_examples() {
        let m = builtin_ou();
        assert_eq!(m.drift(0.0, &[2.0, 1.0, 1.0]), 2.0);
        assert_eq!(m.lamperti(3.0, &[0.0, 0.0, 2.0]), 1.5);
        assert_eq!(
            m.transformed_drift_derivs(0.0, &[2.0, 1.0, 1.0]),
            [2.0, -1.0, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn logdrift_examples() {
        let m = builtin_logdrift();
        assert_eq!(m.drift(1.0, &[3.0, 0.0]), -1.0);
        assert_eq!(m.diffusion(2.0, &[0.0, 0.5]), 1.0);
        let th = [1.0, 0.7];
        let back = m.lamperti_inverse(m.lamperti(2.7, &th), &th);
        assert!((back - 2.7).abs() < 1e-12);
        assert!(m.check_state(0.0, Some(3)).is_err());
        assert!(m.check_state(-1.0, None).is_err());
    }

    #[test]
    fn doublewell_examples() {
        let m = builtin_doublewell();
        assert_eq!(m.drift(1.0, &[2.5, 0.0]), 1.5);
        assert_eq!(m.lamperti(0.0, &[0.0, 4.0]), 0.0);
        let th = [0.0, 2.0];
        let h = 1e-6;
        let fprime = (m.lamperti(1.3 + h, &th) - m.lamperti(1.3 - h, &th)) / (2.0 * h);
        assert!((fprime * m.diffusion(1.3, &th) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn lamperti_round_trip_and_unit_diffusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for model in builtins() {
            for _ in 0..20 {
                let th = random_theta(model.as_ref(), &mut rng);
                for &x in &state_grid(model.as_ref()) {
                    let y = model.lamperti(x, &th);
                    let back = model.lamperti_inverse(y, &th);
                    assert!(
                        (back - x).abs() <= 1e-10 * x.abs().max(1.0),
                        "{} round trip at {x}",
                        model.id()
                    );
                    let h = 1e-6 * x.abs().max(1.0);
                    let fp = (model.lamperti(x + h, &th) - model.lamperti(x - h, &th)) / (2.0 * h);
                    assert!(
                        (fp * model.diffusion(x, &th) - 1.0).abs() < 1e-8,
                        "{} F'g at {x}",
                        model.id()
                    );
                }
            }
        }
    }

    #[test]
    fn closed_form_derivatives_match_nested_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for model in builtins() {
            for _ in 0..20 {
                let th = random_theta(model.as_ref(), &mut rng);
                for &x in state_grid(model.as_ref()).iter().step_by(4) {
                    let y = model.lamperti(x, &th);
                    let d = model.transformed_drift_derivs(y, &th);
                    // μ from f, g and a finite-difference ∂g/∂x.
                    let hx = 1e-6 * x.abs().max(1.0);
                    let gx = (model.diffusion(x + hx, &th) - model.diffusion(x - hx, &th)) / (2.0 * hx);
                    let mu_fd = model.drift(x, &th) / model.diffusion(x, &th) - 0.5 * gx;
                    let scale = d[0].abs().max(1.0);
                    assert!((d[0] - mu_fd).abs() < 1e-6 * scale, "{} μ at x={x}", model.id());

                    let h = 1e-4;
                    let mu = |yy: f64| lamperti_drift(model.as_ref(), yy, &th);
                    let d1 = (mu(y + h) - mu(y - h)) / (2.0 * h);
                    let d2 = (mu(y + h) - 2.0 * mu(y) + mu(y - h)) / (h * h);
                    assert!((d[1] - d1).abs() < 1e-5 * d[1].abs().max(1.0), "{} μ'", model.id());
                    assert!((d[2] - d2).abs() < 1e-3 * d[2].abs().max(1.0), "{} μ''", model.id());

                    // Higher orders: differentiate the closed-form lower
                    // derivative, with one Richardson step.
                    for k in 2..5 {
                        let diff = |h: f64| {
                            let up = model.transformed_drift_derivs(y + h, &th)[k];
                            let dn = model.transformed_drift_derivs(y - h, &th)[k];
                            (up - dn) / (2.0 * h)
                        };
                        let fd = (4.0 * diff(h) - diff(2.0 * h)) / 3.0;
                        assert!(
                            (d[k + 1] - fd).abs() < 1e-5 * d[k + 1].abs().max(1.0),
                            "{} order {} at y={y}: {} vs {}",
                            model.id(),
                            k + 1,
                            d[k + 1],
                            fd
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn diffusion_positive_on_state_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for model in builtins() {
            let (lo, hi) = if model.state_domain().lo == 0.0 {
                (1e-3, 50.0)
            } else {
                (-50.0, 50.0)
            };
            for _ in 0..100 {
                let th: Vec<f64> = model
                    .param_bounds()
                    .iter()
                    .map(|&(a, b)| {
                        let v: f64 = rng.random_range(a..b);
                        v.max(a + 1e-9)
                    })
                    .collect();
                for i in 0..1000 {
                    let x = lo + (hi - lo) * i as f64 / 999.0;
                    assert!(model.diffusion(x, &th) > 0.0);
                }
            }
        }
    }

    #[test]
    fn finite_difference_adapter_tracks_closed_form() {
        let fd = FiniteDifferenceModel::new(
            "dw-fd",
            vec![(-10.0, 10.0), (0.0, 10.0)],
            StateDomain::REAL_LINE,
            |x, t| t[0] * x - x * x * x,
            |x, t| t[1] * (1.0 + x * x).sqrt(),
            |x, t| x.asinh() / t[1],
            |y, t| (t[1] * y).sinh(),
        );
        let exact = builtin_doublewell();
        let th = [2.0, 0.8];
        for &y in &[-0.7, 0.0, 0.4, 1.1] {
            let a = exact.transformed_drift_derivs(y, &th);
            let b = fd.transformed_drift_derivs(y, &th);
            for k in 0..6 {
                // Loose: fifth differences lose about half of the digits.
                assert!(
                    (a[k] - b[k]).abs() < 2e-2 * a[k].abs().max(1.0),
                    "order {k}: {} vs {}",
                    a[k],
                    b[k]
                );
            }
        }
    }

    #[test]
    fn unknown_model_is_rejected() {
        assert!(matches!(builtin("heston"), Err(Error::UnknownModel(_))));
    }
}
