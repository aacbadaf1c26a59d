//! Synthetic non-stationary datasets: a slow auxiliary process from a
//! Butterworth-filtered 4-D Ornstein–Uhlenbeck system, and the three example
//! SDEs whose parameters follow known scaling functions of it.

use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::{Matrix4, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{builtin, ModelRef};
use crate::series::UniformTimeSeries;
use crate::sim::{Integrator, OnExit, Scheme};

/// Normalized 4th-order Butterworth denominator coefficients `a₀…a₃`.
pub const BUTTERWORTH_4: [f64; 4] = [1.0, 2.61, 3.41, 2.61];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuxProcessConfig {
    /// Cutoff timescale.
    pub t_c: f64,
    /// Noise amplitude on the last component.
    pub b0: f64,
    pub a: [f64; 4],
    pub x0: [f64; 4],
    pub dt_internal: f64,
    pub seed: u64,
    /// Constant added to the first component.
    pub offset: f64,
}

impl Default for AuxProcessConfig {
    fn default() -> Self {
        Self {
            t_c: 1.0,
            b0: 1.0,
            a: BUTTERWORTH_4,
            x0: [0.0; 4],
            dt_internal: 1e-3,
            seed: 0,
            offset: 0.0,
        }
    }
}

/// Companion matrix whose characteristic polynomial is
/// `s⁴ + a₃s³ + a₂s² + a₁s + a₀`, signed so that `−A` is stable.
pub fn companion_matrix(a: &[f64; 4]) -> Matrix4<f64> {
    Matrix4::new(
        0.0, -1.0, 0.0, 0.0, //
        0.0, 0.0, -1.0, 0.0, //
        0.0, 0.0, 0.0, -1.0, //
        a[0], a[1], a[2], a[3],
    )
}

/// Euler–Maruyama state of the auxiliary system
/// `dU = −(1/T_c) A U dt + b₀ e₄ dW`.
#[derive(Debug, Clone)]
pub struct AuxProcess {
    drift: Matrix4<f64>,
    b0: f64,
    offset: f64,
    state: Vector4<f64>,
    rng: ChaCha8Rng,
}

impl AuxProcess {
    pub fn new(cfg: &AuxProcessConfig) -> Result<Self> {
        if !(cfg.t_c > 0.0) || !(cfg.b0 >= 0.0) {
            return Err(Error::contract("aux process needs t_c > 0 and b0 >= 0"));
        }
        Ok(Self {
            drift: -companion_matrix(&cfg.a) / cfg.t_c,
            b0: cfg.b0,
            offset: cfg.offset,
            state: Vector4::from(cfg.x0),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    /// Observed value `offset + U₁`.
    pub fn value(&self) -> f64 {
        self.offset + self.state[0]
    }

    pub fn step(&mut self, h: f64) {
        let z: f64 = StandardNormal.sample(&mut self.rng);
        let mut next = self.state + self.drift * self.state * h;
        next[3] += self.b0 * h.sqrt() * z;
        self.state = next;
    }
}

fn substeps_for(dt_out: f64, dt_internal: f64) -> Result<usize> {
    if !(dt_internal > 0.0 && dt_internal <= dt_out) {
        return Err(Error::contract(format!(
            "internal step {dt_internal} must be positive and at most the output step {dt_out}"
        )));
    }
    let m = (dt_out / dt_internal).round();
    if ((m * dt_internal - dt_out) / dt_out).abs() > 1e-9 {
        return Err(Error::contract("the internal step must divide the output step"));
    }
    Ok(m as usize)
}

/// First component of the auxiliary system sampled every `dt_out`.
pub fn simulate_aux(cfg: &AuxProcessConfig, n_out: usize, dt_out: f64) -> Result<UniformTimeSeries> {
    let m = substeps_for(dt_out, cfg.dt_internal)?;
    let h = dt_out / m as f64;
    let mut aux = AuxProcess::new(cfg)?;
    let mut values = Vec::with_capacity(n_out);
    for _ in 0..n_out {
        values.push(aux.value());
        for _ in 0..m {
            aux.step(h);
        }
    }
    UniformTimeSeries::new(0.0, dt_out, values)
}

/// The three built-in experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Example {
    Ou,
    Logdrift,
    Doublewell,
}

impl FromStr for Example {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ou" => Ok(Example::Ou),
            "logdrift" | "logdrift_2aux" => Ok(Example::Logdrift),
            "doublewell" => Ok(Example::Doublewell),
            other => Err(Error::UnknownModel(other.to_string())),
        }
    }
}

impl fmt::Display for Example {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.model_id())
    }
}

impl Example {
    pub fn model_id(&self) -> &'static str {
        match self {
            Example::Ou => "ou",
            Example::Logdrift => "logdrift",
            Example::Doublewell => "doublewell",
        }
    }

    /// Names of the auxiliary series, in CSV column order.
    pub fn aux_names(&self) -> &'static [&'static str] {
        match self {
            Example::Logdrift => &["u", "v"],
            _ => &["u"],
        }
    }

    /// Human-readable scaling functions, one per parameter.
    pub fn scaling_ids(&self) -> &'static [&'static str] {
        match self {
            Example::Ou => &["2u", "1/((u-1)^4+0.1)", "(u-1)^2+0.1"],
            Example::Logdrift => &["(u+1)^4+0.1", "-2v+2"],
            Example::Doublewell => &["-0.4(u-1)^2+2.5", "-4u+5"],
        }
    }

    /// True parameters for the auxiliary values `aux` (one per series).
    pub fn scaling(&self, aux: &[f64], theta: &mut [f64]) {
        match self {
            Example::Ou => {
                let u = aux[0];
                theta[0] = 2.0 * u;
                theta[1] = 1.0 / ((u - 1.0).powi(4) + 0.1);
                theta[2] = (u - 1.0).powi(2) + 0.1;
            }
            Example::Logdrift => {
                theta[0] = (aux[0] + 1.0).powi(4) + 0.1;
                theta[1] = -2.0 * aux[1] + 2.0;
            }
            Example::Doublewell => {
                let u = aux[0];
                theta[0] = -0.4 * (u - 1.0).powi(2) + 2.5;
                theta[1] = -4.0 * u + 5.0;
            }
        }
    }

    pub fn default_config(&self, seed: u64) -> ExampleConfig {
        let aux = |t_c: f64, b0: f64, x0: [f64; 4], offset: f64, stream: u64| AuxProcessConfig {
            t_c,
            b0,
            x0,
            offset,
            dt_internal: 1e-4,
            seed: stream_seed(seed, stream),
            ..Default::default()
        };
        match self {
            Example::Ou => ExampleConfig {
                example: *self,
                n: 16384,
                dt: 0.1,
                dt_internal: 1e-4,
                x0: 0.0,
                seed,
                aux: vec![aux(10.0, 0.15, [0.0; 4], 1.0, 1)],
            },
            Example::Logdrift => ExampleConfig {
                example: *self,
                n: 131072,
                dt: 0.01,
                dt_internal: 1e-4,
                x0: 1.0,
                seed,
                aux: vec![aux(5.0, 0.2, [0.0; 4], 0.0, 1), aux(20.0, 0.15, [0.0; 4], 0.0, 2)],
            },
            Example::Doublewell => ExampleConfig {
                example: *self,
                n: 65536,
                dt: 0.01,
                dt_internal: 1e-4,
                x0: 0.0,
                seed,
                aux: vec![aux(15.0, 0.2, [1.0, 0.0, 0.0, 0.0], 0.0, 1)],
            },
        }
    }
}

/// Independent stream seed derived from a dataset seed.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleConfig {
    pub example: Example,
    pub n: usize,
    pub dt: f64,
    /// Integration step of the target SDE and the auxiliary processes.
    pub dt_internal: f64,
    pub x0: f64,
    /// Seed of the target SDE's Wiener stream.
    pub seed: u64,
    pub aux: Vec<AuxProcessConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub model: String,
    pub example: Option<Example>,
    pub scaling: Vec<String>,
    pub seed: Option<u64>,
    pub aux_seeds: Vec<u64>,
    pub dt_internal: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub x: UniformTimeSeries,
    pub aux_names: Vec<String>,
    pub aux: Vec<UniformTimeSeries>,
    /// `theta_true[m][i]`: parameter `m` at node `i`.
    pub theta_true: Vec<Vec<f64>>,
    pub gamma_true: Option<Vec<usize>>,
    pub meta: DatasetMeta,
}

/// Most internal-step halvings tried when the state leaves its domain.
const MAX_REFINEMENTS: u32 = 4;

/// Simulates an example dataset.
pub fn generate_example(cfg: &ExampleConfig) -> Result<SyntheticDataset> {
    let ex = cfg.example;
    if cfg.aux.len() != ex.aux_names().len() {
        return Err(Error::contract(format!(
            "example `{ex}` needs {} auxiliary processes",
            ex.aux_names().len()
        )));
    }
    if cfg.n == 0 {
        return Err(Error::contract("the dataset needs at least one sample"));
    }
    let model = builtin(ex.model_id())?;
    let mut dt_internal = cfg.dt_internal;
    for attempt in 0..=MAX_REFINEMENTS {
        match simulate_example(cfg, &model, dt_internal) {
            Err(Error::Simulation(msg)) if attempt < MAX_REFINEMENTS => {
                warn!("{msg}; retrying with internal step {}", dt_internal / 2.0);
                dt_internal /= 2.0;
            }
            other => return other,
        }
    }
    unreachable!("the last attempt returns")
}

fn simulate_example(cfg: &ExampleConfig, model: &ModelRef, dt_internal: f64) -> Result<SyntheticDataset> {
    let ex = cfg.example;
    let m = substeps_for(cfg.dt, dt_internal)?;
    let h = cfg.dt / m as f64;
    let mut procs: Vec<AuxProcess> = cfg.aux.iter().map(AuxProcess::new).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = Integrator::new(
        model.as_ref(),
        cfg.x0,
        h,
        Scheme::for_model(model.as_ref()),
        OnExit::Fail,
    )?;
    let n_params = model.n_params();
    let mut theta = vec![0.0; n_params];
    let mut aux_now = vec![0.0; procs.len()];
    let mut xs = Vec::with_capacity(cfg.n);
    let mut aux_out = vec![Vec::with_capacity(cfg.n); procs.len()];
    let mut theta_true = vec![Vec::with_capacity(cfg.n); n_params];
    let sqrt_h = h.sqrt();
    for _ in 0..cfg.n {
        xs.push(x.x);
        for (j, p) in procs.iter().enumerate() {
            aux_now[j] = p.value();
            aux_out[j].push(aux_now[j]);
        }
        ex.scaling(&aux_now, &mut theta);
        for (row, &t) in theta_true.iter_mut().zip(&theta) {
            row.push(t);
        }
        for _ in 0..m {
            for (j, p) in procs.iter().enumerate() {
                aux_now[j] = p.value();
            }
            ex.scaling(&aux_now, &mut theta);
            let z: f64 = StandardNormal.sample(&mut rng);
            x.advance(&theta, sqrt_h * z)?;
            for p in &mut procs {
                p.step(h);
            }
        }
    }
    let series = |v: Vec<f64>| UniformTimeSeries::new(0.0, cfg.dt, v);
    Ok(SyntheticDataset {
        x: series(xs)?,
        aux_names: ex.aux_names().iter().map(|s| s.to_string()).collect(),
        aux: aux_out.into_iter().map(series).collect::<Result<_>>()?,
        theta_true,
        gamma_true: None,
        meta: DatasetMeta {
            model: ex.model_id().to_string(),
            example: Some(ex),
            scaling: ex.scaling_ids().iter().map(|s| s.to_string()).collect(),
            seed: Some(cfg.seed),
            aux_seeds: cfg.aux.iter().map(|a| a.seed).collect(),
            dt_internal: Some(h),
        },
    })
}
