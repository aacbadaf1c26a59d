//! Closed-form approximation of the transition density of a scalar diffusion.
//!
//! The state is mapped to unit diffusion by the Lamperti transform,
//! `Y = F(X)`, and the increment is standardized,
//! `Z = (Y − y₀)/√Δt`. The density of `Z` is expanded around the standard
//! normal weight `φ(z)` in Hermite polynomials up to order
//! [`EXPANSION_ORDER`], with coefficients `η_j` that are Taylor polynomials in
//! `Δt` of order [`TAYLOR_ORDER`] built from the derivatives of the
//! transformed drift `μ` at `y₀`. Finally
//!
//! ```text
//! p_X(Δt, x | x₀; θ) = p_Z(z) / (g(x; θ) √Δt).
//! ```

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::models::SdeModel;

/// Number of Hermite terms kept (`J`).
pub const EXPANSION_ORDER: usize = 6;
/// Order of the small-`Δt` expansion of the coefficients (`M = J/2`).
pub const TAYLOR_ORDER: usize = EXPANSION_ORDER / 2;
/// Densities below this value are replaced by it.
pub const DENSITY_FLOOR: f64 = 1e-300;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// `[H₀(z), …, H₆(z)]` with `H_j(z) = e^{z²/2} dʲ/dzʲ e^{−z²/2}`.
pub fn hermite_polynomials(z: f64) -> [f64; 7] {
    let z2 = z * z;
    let z3 = z2 * z;
    let z4 = z2 * z2;
    [
        1.0,
        -z,
        z2 - 1.0,
        3.0 * z - z3,
        3.0 - 6.0 * z2 + z4,
        -15.0 * z + 10.0 * z3 - z4 * z,
        -15.0 + 45.0 * z2 - 15.0 * z4 + z4 * z2,
    ]
}

/// Coefficients `η₀ … η₆` for the transformed-drift derivatives `d` at `y₀`
/// and time step `h`.
pub fn eta_from_derivs(d: &[f64; 6], h: f64) -> [f64; 7] {
    let [m, m1, m2, m3, m4, m5] = *d;
    let sh = h.sqrt();
    let h32 = h * sh;
    let h2 = h * h;
    let h52 = h2 * sh;
    let h3 = h2 * h;
    let (mm, m1s, m2s) = (m * m, m1 * m1, m2 * m2);
    let mmm = mm * m;
    let m4p = mm * mm;

    let eta1 = -m * sh
        - (2.0 * m * m1 + m2) / 4.0 * h32
        - (4.0 * m * m1s + 4.0 * mm * m2 + 6.0 * m1 * m2 + 4.0 * m * m3 + m4) / 24.0 * h52;

    let eta2 = (mm + m1) / 2.0 * h
        + (6.0 * mm * m1 + 4.0 * m1s + 7.0 * m * m2 + 2.0 * m3) / 12.0 * h2
        + (28.0 * mm * m1s
            + 28.0 * mm * m3
            + 16.0 * m1s * m1
            + 16.0 * mmm * m2
            + 88.0 * m * m1 * m2
            + 21.0 * m2s
            + 32.0 * m1 * m3
            + 16.0 * m * m4
            + 3.0 * m5)
            / 96.0
            * h3;

    let eta3 = -(mmm + 3.0 * m * m1 + m2) / 6.0 * h32
        - (12.0 * mmm * m1 + 28.0 * m * m1s + 22.0 * mm * m2 + 24.0 * m1 * m2 + 14.0 * m * m3 + 3.0 * m4) / 48.0 * h52;

    let eta4 = (m4p + 6.0 * mm * m1 + 3.0 * m1s + 4.0 * m * m2 + m3) / 24.0 * h2
        + (20.0 * m4p * m1
            + 50.0 * mmm * m2
            + 100.0 * mm * m1s
            + 50.0 * mm * m3
            + 23.0 * m * m4
            + 180.0 * m * m1 * m2
            + 40.0 * m1s * m1
            + 34.0 * m2s
            + 52.0 * m1 * m3
            + 4.0 * m5)
            / 240.0
            * h3;

    let eta5 = -(m4p * m + 10.0 * mmm * m1 + 15.0 * m * m1s + 10.0 * mm * m2 + 10.0 * m1 * m2 + 5.0 * m * m3 + m4)
        / 120.0
        * h52;

    let eta6 = (m4p * mm
        + 15.0 * m4p * m1
        + 15.0 * m1s * m1
        + 20.0 * mmm * m2
        + 15.0 * m1 * m3
        + 45.0 * mm * m1s
        + 10.0 * m2s
        + 15.0 * mm * m3
        + 60.0 * m * m1 * m2
        + 6.0 * m * m4
        + m5)
        / 720.0
        * h3;

    [1.0, eta1, eta2, eta3, eta4, eta5, eta6]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HermiteCoefficients {
    pub eta: [f64; 7],
    /// Transformed previous state `F(x₀)`.
    pub y0: f64,
}

pub fn eta_coefficients(model: &dyn SdeModel, theta: &[f64], y0: f64, dt: f64) -> Result<HermiteCoefficients> {
    if !(dt > 0.0) {
        return Err(Error::contract(format!("time step must be positive, got {dt}")));
    }
    let d = model.transformed_drift_derivs(y0, theta);
    if let Some(order) = d.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteDerivative { order });
    }
    Ok(HermiteCoefficients {
        eta: eta_from_derivs(&d, dt),
        y0,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct DensityRequest<'a> {
    pub dt: f64,
    pub x_prev: f64,
    pub x_next: f64,
    pub theta: &'a [f64],
}

/// Density value together with a flag telling whether the floor was applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityValue {
    pub density: f64,
    pub floored: bool,
}

/// Transition density from a fixed previous state; the coefficients are
/// computed once and reused for every `x_next`.
#[derive(Debug, Clone)]
pub struct TransitionKernel<'a> {
    model: &'a dyn SdeModel,
    theta: &'a [f64],
    coeffs: HermiteCoefficients,
    sqrt_dt: f64,
}

impl<'a> TransitionKernel<'a> {
    pub fn new(model: &'a dyn SdeModel, theta: &'a [f64], x_prev: f64, dt: f64) -> Result<Self> {
        model.check_params(theta)?;
        model.check_state(x_prev, None)?;
        let y0 = model.lamperti(x_prev, theta);
        let coeffs = eta_coefficients(model, theta, y0, dt)?;
        Ok(Self {
            model,
            theta,
            coeffs,
            sqrt_dt: dt.sqrt(),
        })
    }

    pub fn coefficients(&self) -> &HermiteCoefficients {
        &self.coeffs
    }

    pub fn density(&self, x_next: f64) -> Result<DensityValue> {
        self.density_truncated(x_next, EXPANSION_ORDER)
    }

    pub(crate) fn density_truncated(&self, x_next: f64, order: usize) -> Result<DensityValue> {
        self.model.check_state(x_next, None)?;
        let y = self.model.lamperti(x_next, self.theta);
        let z = (y - self.coeffs.y0) / self.sqrt_dt;
        let raw = expansion(&self.coeffs.eta, z, order) / (self.model.diffusion(x_next, self.theta) * self.sqrt_dt);
        Ok(floor(raw))
    }
}

fn expansion(eta: &[f64; 7], z: f64, order: usize) -> f64 {
    let h = hermite_polynomials(z);
    let series: f64 = eta[..=order].iter().zip(&h).map(|(e, hj)| e * hj).sum();
    INV_SQRT_2PI * (-0.5 * z * z).exp() * series
}

#[inline]
fn floor(raw: f64) -> DensityValue {
    if raw >= DENSITY_FLOOR {
        DensityValue {
            density: raw,
            floored: false,
        }
    } else {
        DensityValue {
            density: DENSITY_FLOOR,
            floored: true,
        }
    }
}

/// Approximate transition density `p_X^{(6)}(Δt, x_next | x_prev; θ)`.
pub fn transition_density(model: &dyn SdeModel, req: &DensityRequest<'_>) -> Result<f64> {
    transition_density_checked(model, req).map(|v| v.density)
}

pub fn transition_density_checked(model: &dyn SdeModel, req: &DensityRequest<'_>) -> Result<DensityValue> {
    TransitionKernel::new(model, req.theta, req.x_prev, req.dt)?.density(req.x_next)
}

/// Density without domain checks, for hot loops over series whose states
/// were validated up front.
#[inline]
pub(crate) fn density_unchecked(
    model: &dyn SdeModel,
    theta: &[f64],
    dt: f64,
    sqrt_dt: f64,
    x_prev: f64,
    x_next: f64,
) -> Result<DensityValue> {
    let y0 = model.lamperti(x_prev, theta);
    let d = model.transformed_drift_derivs(y0, theta);
    if let Some(order) = d.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteDerivative { order });
    }
    let eta = eta_from_derivs(&d, dt);
    let z = (model.lamperti(x_next, theta) - y0) / sqrt_dt;
    let raw = expansion(&eta, z, EXPANSION_ORDER) / (model.diffusion(x_next, theta) * sqrt_dt);
    Ok(floor(raw))
}

/// Exact Gaussian transition density of the OU process, used as an oracle.
pub fn ou_exact_density(theta: &[f64], dt: f64, x_prev: f64, x_next: f64) -> f64 {
    let (a, b, s) = (theta[0], theta[1], theta[2]);
    let e = (-b * dt).exp();
    let mean = x_prev * e + a / b * (1.0 - e);
    let var = s * s * (1.0 - e * e) / (2.0 * b);
    (-(x_next - mean).powi(2) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
}
