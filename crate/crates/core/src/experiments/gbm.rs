//! Calibration of a one-dimensional neural SDE to undiscounted call prices
//! of a geometric Brownian motion.
//!
//! Model: `dS = S_0 g(t/T, S/S_0) dt + S_0 f(t/T, S/S_0) ∘ dW` with MLPs
//! `g`, `f`. Both fields are Lipschitz in `S`, so a blow-up comes from the
//! solver and not from the model; the true fields `(r - σ²/2) S` and `σ S`
//! are linear, which LipSwish networks approximate without being exact.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::training::{loss_table, train, EpochOutcome};
use super::{scheme_from_name, timed, CsvTable, ExperimentConfig, RunOutput, RunReport, TrainingCurve};
use crate::drivers::{stream_seed, DriverPath, TimeGrid};
use crate::neuralnet::{Adam, Mlp};
use crate::par::Execution;
use crate::revgrad::{scheme_backprop, ParametricField};
use crate::solvers::{Scheme, VectorField};
use crate::{Error, Result};

const INIT_STREAM: u64 = 0x1417;
const NOISE_STREAM: u64 = 0x9015E;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbmConfig {
    pub width: usize,
    pub depth: usize,
    pub samples: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Per-step learning-rate decay factor.
    pub decay: f64,
    pub t_end: f64,
    pub h: f64,
    pub s0: f64,
    pub r: f64,
    pub sigma: f64,
    pub strikes: Vec<f64>,
    pub maturities: Vec<f64>,
    pub solvers: Vec<String>,
    pub chunk: usize,
}

impl Default for GbmConfig {
    fn default() -> Self {
        Self {
            width: 8,
            depth: 3,
            samples: 20_000,
            epochs: 50,
            lr: 1e-2,
            decay: 0.99,
            t_end: 25.0,
            h: 0.25,
            s0: 100.0,
            r: 0.5,
            sigma: 1.5,
            strikes: (90..=110).map(f64::from).collect(),
            maturities: (1..=10).map(|k| 2.5 * k as f64).collect(),
            solvers: vec!["ees25".into(), "reversible_heun".into()],
            chunk: 256,
        }
    }
}

impl GbmConfig {
    pub fn validate(&self, x: f64) -> Result<()> {
        if self.width == 0 || self.samples == 0 || self.chunk == 0 {
            return Err(Error::Config("gbm: width, samples and chunk must be positive".into()));
        }
        if !(self.h > 0.0 && self.s0 > 0.0 && self.sigma > 0.0 && self.lr > 0.0 && self.decay > 0.0) {
            return Err(Error::Config("gbm: h, s0, sigma, lr and decay must be positive".into()));
        }
        if self.strikes.is_empty() || self.maturities.is_empty() {
            return Err(Error::Config("gbm: strikes and maturities must be non-empty".into()));
        }
        self.observation_steps()?;
        for s in &self.solvers {
            if matches!(scheme_from_name(s, x)?, Scheme::Alf | Scheme::Reversible { .. }) {
                return Err(Error::Config(format!("gbm: solver {s} has no backward pass")));
            }
        }
        Ok(())
    }

    fn steps(&self) -> Result<usize> {
        grid_index(self.t_end, self.h).ok_or_else(|| Error::Config("gbm: t_end must be a multiple of h".into()))
    }

    /// Grid index of each maturity.
    fn observation_steps(&self) -> Result<Vec<usize>> {
        let n = self.steps()?;
        self.maturities
            .iter()
            .map(|&t| match grid_index(t, self.h) {
                Some(k) if k <= n => Ok(k),
                _ => Err(Error::Config(format!("gbm: maturity {t} is not a grid point in (0, t_end]"))),
            })
            .collect()
    }
}

fn grid_index(t: f64, h: f64) -> Option<usize> {
    let n = (t / h).round();
    (n >= 1.0 && (n * h - t).abs() <= 1e-9 * t.abs().max(1.0)).then_some(n as usize)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Undiscounted `E[(S_t - K)^+]` under `dS = rS dt + σS dW`.
pub fn call_price(s0: f64, k: f64, r: f64, sigma: f64, t: f64) -> f64 {
    let sd = sigma * t.sqrt();
    let d1 = ((s0 / k).ln() + (r + 0.5 * sigma * sigma) * t) / sd;
    s0 * (r * t).exp() * normal_cdf(d1) - k * normal_cdf(d1 - sd)
}

/// `S_0 g(t/T, S/S_0) dt + S_0 f(t/T, S/S_0) dW`; channel 0 is time.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometricField {
    pub drift: Mlp,
    pub diffusion: Mlp,
    pub time_scale: f64,
    pub s0: f64,
}

impl GeometricField {
    fn input(&self, t: f64, s: f64) -> [f64; 2] {
        [t * self.time_scale, s / self.s0]
    }
}

impl VectorField for GeometricField {
    fn dim(&self) -> usize {
        1
    }

    fn channels(&self) -> usize {
        2
    }

    fn apply(&self, t: f64, y: &[f64], dx: &[f64], out: &mut [f64]) {
        let x = self.input(t, y[0]);
        let g = self.drift.forward(&x).expect("two inputs")[0];
        let f = self.diffusion.forward(&x).expect("two inputs")[0];
        out[0] = self.s0 * (g * dx[0] + f * dx[1]);
    }
}

impl ParametricField for GeometricField {
    fn num_params(&self) -> usize {
        self.drift.num_params() + self.diffusion.num_params()
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.drift.params().to_vec();
        p.extend_from_slice(self.diffusion.params());
        p
    }

    fn set_params(&mut self, params: &[f64]) {
        let n = self.drift.num_params();
        self.drift.params_mut().copy_from_slice(&params[..n]);
        self.diffusion.params_mut().copy_from_slice(&params[n..]);
    }

    fn vjp(&self, t: f64, y: &[f64], dx: &[f64], cot: &[f64], grad_y: &mut [f64], grad_theta: &mut [f64]) {
        let s = self.s0;
        let x = self.input(t, y[0]);
        let n = self.drift.num_params();
        let (gd, gf) = grad_theta.split_at_mut(n);
        let (mut gi_g, mut gi_f) = ([0.0; 2], [0.0; 2]);
        self.drift
            .backprop_into(&x, &[cot[0] * s * dx[0]], gd, &mut gi_g)
            .expect("two inputs");
        self.diffusion
            .backprop_into(&x, &[cot[0] * s * dx[1]], gf, &mut gi_f)
            .expect("two inputs");
        grad_y[0] = (gi_g[1] + gi_f[1]) / self.s0;
    }
}

impl GeometricField {
    pub fn new(cfg: &GbmConfig, seed: u64) -> Result<Self> {
        let mut drift = Mlp::new(2, cfg.width, cfg.depth, 1, stream_seed(seed, 1))?;
        let mut diffusion = Mlp::new(2, cfg.width, cfg.depth, 1, stream_seed(seed, 2))?;
        drift.scale_output_layer(0.1);
        diffusion.scale_output_layer(0.1);
        Ok(Self {
            drift,
            diffusion,
            time_scale: 1.0 / cfg.t_end,
            s0: cfg.s0,
        })
    }
}

/// Closed-form target prices, maturity-major.
fn targets(cfg: &GbmConfig) -> Vec<f64> {
    cfg.maturities
        .iter()
        .flat_map(|&t| cfg.strikes.iter().map(move |&k| call_price(cfg.s0, k, cfg.r, cfg.sigma, t)))
        .collect()
}

struct EpochContext<'a> {
    cfg: &'a GbmConfig,
    scheme: &'a Scheme,
    grid: TimeGrid,
    obs: Vec<usize>,
    noise_seed: u64,
}

impl EpochContext<'_> {
    fn path(&self, i: usize) -> DriverPath {
        DriverPath::brownian(self.grid, 1, stream_seed(self.noise_seed, i as u64))
    }

    fn simulate(&self, field: &dyn VectorField, i: usize) -> Result<Vec<f64>> {
        let path = self.path(i);
        let mut state = self.scheme.init(&[self.cfg.s0]);
        let mut at_obs = Vec::with_capacity(self.obs.len());
        let mut n = 0;
        for &k in &self.obs {
            while n < k {
                state = self.scheme.step(field, self.grid.time(n), &state, path.increment(n))?;
                n += 1;
            }
            at_obs.push(state.y[0]);
        }
        Ok(at_obs)
    }

    /// Sums of payoffs over samples `range`, maturity-major.
    fn payoff_sums(&self, field: &dyn VectorField, range: std::ops::Range<usize>) -> Vec<f64> {
        let nk = self.cfg.strikes.len();
        let mut acc = vec![0.0; self.obs.len() * nk];
        for i in range {
            let Ok(s) = self.simulate(field, i) else {
                return vec![f64::NAN; acc.len()];
            };
            for (j, sj) in s.iter().enumerate() {
                for (q, k) in self.cfg.strikes.iter().enumerate() {
                    acc[j * nk + q] += (sj - k).max(0.0);
                }
            }
        }
        acc
    }

    /// `weights[j][q] = 2 e^{-2rt} (Ĉ - C) / (|K||T| N)` for maturity `j`,
    /// strike `q`; the price derivative is `1[S > K]`.
    fn gradient(&self, field: &GeometricField, weights: &[f64], range: std::ops::Range<usize>) -> Vec<f64> {
        let nk = self.cfg.strikes.len();
        let mut grad = vec![0.0; field.num_params()];
        for i in range {
            let path = self.path(i);
            let mut state = self.scheme.init(&[self.cfg.s0]);
            for n in 0..self.grid.steps() {
                match self.scheme.step(field, self.grid.time(n), &state, path.increment(n)) {
                    Ok(s) => state = s,
                    Err(_) => return vec![f64::NAN; grad.len()],
                }
            }
            let cot = |n: usize, y: &[f64]| {
                let j = self.obs.iter().position(|&k| k == n)?;
                let g = (0..nk)
                    .filter(|&q| y[0] > self.cfg.strikes[q])
                    .map(|q| weights[j * nk + q])
                    .sum::<f64>();
                Some(vec![g])
            };
            match scheme_backprop(self.scheme, field, &state, &path, cot, None) {
                Ok(g) => {
                    for (a, b) in grad.iter_mut().zip(&g.d_theta) {
                        *a += b;
                    }
                }
                Err(_) => return vec![f64::NAN; grad.len()],
            }
        }
        grad
    }
}

/// Discounted price MSE and its derivative weights.
fn loss_and_weights(cfg: &GbmConfig, sums: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let nk = cfg.strikes.len();
    let m = (nk * cfg.maturities.len()) as f64;
    let n = cfg.samples as f64;
    let mut loss = 0.0;
    let mut w = vec![0.0; sums.len()];
    for (j, &t) in cfg.maturities.iter().enumerate() {
        let disc = (-2.0 * cfg.r * t).exp();
        for q in 0..nk {
            let idx = j * nk + q;
            let diff = sums[idx] / n - target[idx];
            loss += disc * diff * diff / m;
            w[idx] = 2.0 * disc * diff / (m * n);
        }
    }
    (loss, w)
}

/// Loss of a fixed field on one noise draw; useful for sanity checks.
pub fn gbm_loss(cfg: &GbmConfig, scheme: &Scheme, field: &dyn VectorField, seed: u64, exec: Execution) -> Result<f64> {
    let ctx = EpochContext {
        cfg,
        scheme,
        grid: TimeGrid::new(0.0, cfg.t_end, cfg.steps()?)?,
        obs: cfg.observation_steps()?,
        noise_seed: seed,
    };
    let len = cfg.strikes.len() * cfg.maturities.len();
    let sums = exec.chunked_sum(cfg.samples, cfg.chunk, len, |r| ctx.payoff_sums(field, r));
    Ok(loss_and_weights(cfg, &sums, &targets(cfg)).0)
}

pub fn train_gbm(cfg: &GbmConfig, solver: &str, x: f64, seed: u64, exec: Execution) -> Result<TrainingCurve> {
    cfg.validate(x)?;
    let scheme = scheme_from_name(solver, x)?;
    let template = GeometricField::new(cfg, stream_seed(seed, INIT_STREAM))?;
    let mut params = template.params();
    let grid = TimeGrid::new(0.0, cfg.t_end, cfg.steps()?)?;
    let obs = cfg.observation_steps()?;
    let target = targets(cfg);
    let mut adam = Adam::new(params.len(), cfg.lr).with_decay(cfg.decay);
    train(solver, cfg.epochs, &mut params, &mut adam, |p, epoch| {
        let ctx = EpochContext {
            cfg,
            scheme: &scheme,
            grid,
            obs: obs.clone(),
            noise_seed: stream_seed(stream_seed(seed, NOISE_STREAM), epoch as u64),
        };
        let mut field = template.clone();
        field.set_params(p);
        let sums = exec.chunked_sum(cfg.samples, cfg.chunk, target.len(), |r| ctx.payoff_sums(&field, r));
        let (loss, weights) = loss_and_weights(cfg, &sums, &target);
        if !loss.is_finite() {
            return Ok(EpochOutcome { loss, grads: Vec::new() });
        }
        let grads = exec.chunked_sum(cfg.samples, cfg.chunk, p.len(), |r| ctx.gradient(&field, &weights, r));
        Ok(EpochOutcome { loss, grads })
    })
}

/// Exact log-normal Monte Carlo price with its standard error.
pub fn monte_carlo_call(s0: f64, k: f64, r: f64, sigma: f64, t: f64, paths: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (drift, vol) = ((r - 0.5 * sigma * sigma) * t, sigma * t.sqrt());
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..paths {
        let z: f64 = StandardNormal.sample(&mut rng);
        let p = (s0 * (drift + vol * z).exp() - k).max(0.0);
        s += p;
        s2 += p * p;
    }
    let n = paths as f64;
    let mean = s / n;
    (mean, ((s2 / n - mean * mean) / (n - 1.0)).sqrt())
}

pub fn run_gbm(config: &ExperimentConfig) -> Result<RunOutput> {
    let cfg = &config.gbm;
    let mut report = RunReport::new(config);
    report.notes.push(format!(
        "fields: S0 g(t/T, S/S0) dt + S0 f(t/T, S/S0) dW (Stratonovich) with S0 = {}",
        cfg.s0
    ));
    let mut curves = Vec::new();
    for solver in &cfg.solvers {
        let curve = timed(&mut report.timings, &format!("train {solver}"), || {
            train_gbm(cfg, solver, config.x, config.seed, config.execution)
        })?;
        curves.push(curve);
    }
    let table = loss_table(&curves);
    report.training = curves;
    Ok(RunOutput {
        report,
        tables: vec![CsvTable {
            name: "gbm_loss".into(),
            content: table,
        }],
        rasters: Vec::new(),
    })
}
