//! Equally spaced time series and parameter vectors.

use serde::{Deserialize, Serialize};
use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};

/// Samples `values[i]` observed at `t0 + i * dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformTimeSeries {
    pub t0: f64,
    pub dt: f64,
    pub values: Vec<f64>,
}

impl UniformTimeSeries {
    pub fn new(t0: f64, dt: f64, values: Vec<f64>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::contract(format!("time step must be positive, got {dt}")));
        }
        if values.len() < 2 {
            return Err(Error::contract("a time series needs at least two samples"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!("sample {i} is not finite")));
        }
        Ok(Self { t0, dt, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    /// Total time span `(N - 1) * dt`.
    pub fn horizon(&self) -> f64 {
        (self.len() - 1) as f64 * self.dt
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Standard deviation of the one-step increments.
    pub fn increment_std(&self) -> f64 {
        let n = (self.len() - 1) as f64;
        let (s, s2) = self
            .values
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold((0.0, 0.0), |(s, s2), d| (s + d, s2 + d * d));
        let mean = s / n;
        (s2 / n - mean * mean).max(0.0).sqrt()
    }
}

/// Parameter vector of one SDE model (θ₁ … θₙ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl From<&[f64]> for ParamVector {
    fn from(v: &[f64]) -> Self {
        Self(v.to_vec())
    }
}

impl<const N: usize> From<[f64; N]> for ParamVector {
    fn from(v: [f64; N]) -> Self {
        Self(v.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_series() {
        assert!(UniformTimeSeries::new(0.0, 0.0, vec![1.0, 2.0]).is_err());
        assert!(UniformTimeSeries::new(0.0, 0.1, vec![1.0]).is_err());
        assert!(UniformTimeSeries::new(0.0, 0.1, vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn increment_std_of_linear_ramp_is_zero() {
        let s = UniformTimeSeries::new(0.0, 1.0, (0..10).map(f64::from).collect()).unwrap();
        assert!(s.increment_std() < 1e-12);
        assert_eq!(s.horizon(), 9.0);
    }
}
