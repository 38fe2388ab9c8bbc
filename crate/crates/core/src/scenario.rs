//! Renewable availability scenarios: per-unit hourly PV and wind profiles,
//! synthetic generation, historical import, uniform draws, and the blended
//! noise-standard-deviation estimate the optimization loop maintains.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, LogNormal, Normal};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResScenario {
    pub id: usize,
    /// Fraction of rated PV output available each hour, length T.
    pub pv_pu: Vec<f64>,
    /// Fraction of rated wind output available each hour, length T.
    pub wind_pu: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Historical,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub scenarios: Vec<ResScenario>,
    pub source: Source,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseState {
    /// Current noise std estimate, $.
    pub sigma_n: f64,
    /// Blend weight on the prior.
    pub zeta: f64,
    pub sigma_prior: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("value {value} out of [0,1] at row {row} of {path}")]
    OutOfRange { path: String, row: usize, value: f64 },
    #[error("{rows} data rows is not a multiple of T={t}")]
    RowCount { rows: usize, t: usize },
    #[error("scenario set is empty")]
    EmptySet,
    #[error("noise update needs at least 2 observations, got {0}")]
    TooFewObservations(usize),
}

/// Parameters of the synthetic weather generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub t: usize,
    /// Hours with nonzero clear-sky irradiance: [daylight_start, daylight_end].
    pub daylight_start: usize,
    pub daylight_end: usize,
    /// Beta parameters of the day-scale attenuation factor.
    pub beta_a: f64,
    pub beta_b: f64,
    /// Log-std of the multiplicative hourly PV jitter.
    pub pv_jitter_sigma: f64,
    /// Wind availability follows a stationary AR(1) in logit space.
    pub wind_mu_logit: f64,
    pub wind_phi: f64,
    pub wind_sigma: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            t: 24,
            daylight_start: 6,
            daylight_end: 18,
            beta_a: 4.0,
            beta_b: 1.2,
            pv_jitter_sigma: 0.15,
            wind_mu_logit: -0.6,
            wind_phi: 0.75,
            wind_sigma: 0.6,
        }
    }
}

fn logistic(y: f64) -> f64 {
    1.0 / (1.0 + (-y).exp())
}

impl SynthParams {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |msg: &str| Err(ScenarioError::InvalidParams(msg.into()));
        if self.t == 0 {
            return bad("t must be >= 1");
        }
        if self.daylight_start >= self.daylight_end || self.daylight_end >= self.t {
            return bad("daylight window must satisfy start < end < t");
        }
        if self.beta_a <= 0.0 || self.beta_b <= 0.0 {
            return bad("beta parameters must be > 0");
        }
        if self.pv_jitter_sigma < 0.0 {
            return bad("pv jitter sigma must be >= 0");
        }
        if self.wind_phi.abs() >= 1.0 {
            return bad("wind AR(1) coefficient must lie in (-1, 1)");
        }
        if self.wind_sigma < 0.0 {
            return bad("wind noise sigma must be >= 0");
        }
        Ok(())
    }

    /// Clear-sky shape: a sine-squared bell over the daylight window, zero
    /// elsewhere (including both window endpoints).
    pub fn clear_sky(&self, hour: usize) -> f64 {
        if hour <= self.daylight_start || hour >= self.daylight_end {
            return 0.0;
        }
        let frac =
            (hour - self.daylight_start) as f64 / (self.daylight_end - self.daylight_start) as f64;
        (std::f64::consts::PI * frac).sin().powi(2)
    }

    /// Mean of the squashed stationary AR(1), by Gauss-Legendre quadrature
    /// over the stationary normal. This is the generator's own long-run wind
    /// mean, used as the reference value in statistical tests.
    pub fn wind_stationary_mean(&self) -> f64 {
        let sd = self.wind_sigma / (1.0 - self.wind_phi * self.wind_phi).sqrt();
        // Integrate logistic(mu + sd·z) φ(z) dz over z in [-8, 8].
        let steps = 2000;
        let lo = -8.0f64;
        let hi = 8.0f64;
        let h = (hi - lo) / steps as f64;
        let mut acc = 0.0;
        for k in 0..=steps {
            let z = lo + h * k as f64;
            let w = if k == 0 || k == steps { 0.5 } else { 1.0 };
            let phi = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
            acc += w * logistic(self.wind_mu_logit + sd * z) * phi;
        }
        acc * h
    }
}

/// Generates `n` synthetic scenarios. Each scenario gets its own RNG stream
/// derived from (seed, index), so the result is independent of evaluation
/// order and thread count.
pub fn synth_generate(
    n: usize,
    seed: u64,
    params: &SynthParams,
) -> Result<ScenarioSet, ScenarioError> {
    if n == 0 {
        return Err(ScenarioError::InvalidParams("n must be >= 1".into()));
    }
    params.validate()?;
    let beta = Beta::new(params.beta_a, params.beta_b)
        .map_err(|e| ScenarioError::InvalidParams(e.to_string()))?;
    let jitter = if params.pv_jitter_sigma > 0.0 {
        let s = params.pv_jitter_sigma;
        Some(
            LogNormal::new(-0.5 * s * s, s)
                .map_err(|e| ScenarioError::InvalidParams(e.to_string()))?,
        )
    } else {
        None
    };

    let stdnorm = Normal::new(0.0, 1.0).expect("standard normal");

    let mut scenarios = Vec::with_capacity(n);
    for id in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id as u64);
        let attenuation: f64 = beta.sample(&mut rng);
        let mut pv_pu = Vec::with_capacity(params.t);
        for hour in 0..params.t {
            let clear = params.clear_sky(hour);
            let j = match &jitter {
                Some(d) => d.sample(&mut rng),
                None => 1.0,
            };
            pv_pu.push((clear * attenuation * j).clamp(0.0, 1.0));
        }
        // Stationary start, then the AR(1) recursion in logit space.
        let stat_sd = params.wind_sigma / (1.0 - params.wind_phi * params.wind_phi).sqrt();
        let mut y = params.wind_mu_logit + stat_sd * stdnorm.sample(&mut rng);
        let mut wind_pu = Vec::with_capacity(params.t);
        for _ in 0..params.t {
            wind_pu.push(logistic(y).clamp(0.0, 1.0));
            let eps: f64 = stdnorm.sample(&mut rng);
            y = params.wind_mu_logit
                + params.wind_phi * (y - params.wind_mu_logit)
                + params.wind_sigma * eps;
        }
        scenarios.push(ResScenario { id, pv_pu, wind_pu });
    }
    Ok(ScenarioSet {
        scenarios,
        source: Source::Synthetic,
        rng_seed: seed,
    })
}

impl ScenarioSet {
    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    /// Uniform draw; deterministic under a seeded rng.
    pub fn draw(&self, rng: &mut impl Rng) -> Result<&ResScenario, ScenarioError> {
        if self.scenarios.is_empty() {
            return Err(ScenarioError::EmptySet);
        }
        Ok(&self.scenarios[rng.gen_range(0..self.scenarios.len())])
    }

    /// Element-wise mean profile: the deterministic stand-in scenario used
    /// by noiseless runs.
    pub fn typical(&self) -> Result<ResScenario, ScenarioError> {
        if self.scenarios.is_empty() {
            return Err(ScenarioError::EmptySet);
        }
        let t = self.scenarios[0].pv_pu.len();
        let n = self.scenarios.len() as f64;
        let mut pv = vec![0.0; t];
        let mut wind = vec![0.0; t];
        for s in &self.scenarios {
            for h in 0..t {
                pv[h] += s.pv_pu[h] / n;
                wind[h] += s.wind_pu[h] / n;
            }
        }
        Ok(ResScenario {
            id: usize::MAX,
            pv_pu: pv,
            wind_pu: wind,
        })
    }
}

/// Reads scenarios from CSV: header `pv,wind`, then T rows per scenario.
pub fn load_historical(path: &Path, t: usize) -> Result<ScenarioSet, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let perr = |msg: String| ScenarioError::Parse {
        path: path.display().to_string(),
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| perr("empty file".into()))?;
    let cols: Vec<&str> = header.split(',').map(|s| s.trim()).collect();
    if cols != ["pv", "wind"] {
        return Err(perr(format!("expected header `pv,wind`, got `{header}`")));
    }
    let mut pv_all = Vec::new();
    let mut wind_all = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(|s| s.trim()).collect();
        if fields.len() != 2 {
            return Err(perr(format!("row {}: expected 2 fields", lineno + 1)));
        }
        for f in &fields {
            let v: f64 = f
                .parse()
                .map_err(|_| perr(format!("row {}: bad number `{f}`", lineno + 1)))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(ScenarioError::OutOfRange {
                    path: path.display().to_string(),
                    row: lineno + 1,
                    value: v,
                });
            }
        }
        pv_all.push(fields[0].parse::<f64>().unwrap());
        wind_all.push(fields[1].parse::<f64>().unwrap());
    }
    if pv_all.len() % t != 0 || pv_all.is_empty() {
        return Err(ScenarioError::RowCount {
            rows: pv_all.len(),
            t,
        });
    }
    let scenarios = pv_all
        .chunks(t)
        .zip(wind_all.chunks(t))
        .enumerate()
        .map(|(id, (pv, wind))| ResScenario {
            id,
            pv_pu: pv.to_vec(),
            wind_pu: wind.to_vec(),
        })
        .collect();
    Ok(ScenarioSet {
        scenarios,
        source: Source::Historical,
        rng_seed: 0,
    })
}

/// Writes a set in the historical CSV format with full precision, so a
/// round trip reproduces the profiles exactly.
pub fn export_csv(set: &ScenarioSet, path: &Path) -> Result<(), ScenarioError> {
    let mut out = String::from("pv,wind\n");
    for s in &set.scenarios {
        for h in 0..s.pv_pu.len() {
            out.push_str(&format!("{:.17e},{:.17e}\n", s.pv_pu[h], s.wind_pu[h]));
        }
    }
    std::fs::write(path, out).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })
}

impl NoiseState {
    pub fn new(sigma_prior: f64, zeta: f64) -> Self {
        assert!((0.0..=1.0).contains(&zeta), "zeta in [0,1]");
        assert!(sigma_prior >= 0.0, "sigma_prior >= 0");
        Self {
            sigma_n: sigma_prior,
            zeta,
            sigma_prior,
        }
    }
}

/// Blends the prior noise guess with the sample standard deviation
/// (divisor count−1) of all observations so far:
/// sigma_n = ζ·σ_prior + (1−ζ)·s.
pub fn update_sigma(state: &NoiseState, observations: &[f64]) -> Result<NoiseState, ScenarioError> {
    if observations.len() < 2 {
        return Err(ScenarioError::TooFewObservations(observations.len()));
    }
    let n = observations.len() as f64;
    let mean = observations.iter().sum::<f64>() / n;
    let var = observations.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let s = var.sqrt();
    Ok(NoiseState {
        sigma_n: state.zeta * state.sigma_prior + (1.0 - state.zeta) * s,
        zeta: state.zeta,
        sigma_prior: state.sigma_prior,
    })
}
