//! Latent Langevin SDE fitted to a high-volatility Ornstein–Uhlenbeck
//! process.
//!
//! Model: `z_0 = A x_0 + b`, `dz = g(z) dt + f(t) ∘ dW`, read out through
//! `ŷ = C z + d`. The loss is the mean over time steps and components of the
//! squared differences between the samples' empirical means and variances
//! and those of an exact-OU data set. Sample `i` of the model starts from
//! the initial observation of data trajectory `i`.

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

const DATA_STREAM: u64 = 0xDA7A;
const INIT_STREAM: u64 = 0x1417;
const NOISE_STREAM: u64 = 0x9015E;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OuConfig {
    pub latent_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub samples: usize,
    pub epochs: usize,
    pub lr: f64,
    pub t_end: f64,
    pub h: f64,
    pub nu: f64,
    pub mu: f64,
    pub sigma: f64,
    pub obs_dim: usize,
    /// Standard deviation of the data's initial observations around `mu`.
    pub x0_std: f64,
    pub solvers: Vec<String>,
    /// Samples per gradient-reduction chunk.
    pub chunk: usize,
}

impl Default for OuConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            width: 32,
            depth: 2,
            samples: 5000,
            epochs: 50,
            lr: 1e-3,
            t_end: 10.0,
            h: 0.1,
            nu: 0.2,
            mu: 0.1,
            sigma: 2.0,
            obs_dim: 2,
            x0_std: 1.0,
            solvers: vec!["ees25".into(), "reversible_heun".into()],
            chunk: 64,
        }
    }
}

impl OuConfig {
    pub fn validate(&self, x: f64) -> Result<()> {
        if self.latent_dim == 0 || self.width == 0 || self.samples < 2 || self.obs_dim == 0 || self.chunk == 0 {
            return Err(Error::Config("ou: dimensions, samples (>= 2) and chunk must be positive".into()));
        }
        if !(self.h > 0.0 && self.t_end > 0.0 && self.nu > 0.0 && self.sigma >= 0.0 && self.lr > 0.0) {
            return Err(Error::Config("ou: h, t_end, nu, lr must be positive and sigma non-negative".into()));
        }
        self.steps()?;
        for s in &self.solvers {
            if matches!(scheme_from_name(s, x)?, Scheme::Alf | Scheme::Reversible { .. }) {
                return Err(Error::Config(format!("ou: solver {s} has no backward pass")));
            }
        }
        Ok(())
    }

    fn steps(&self) -> Result<usize> {
        let n = (self.t_end / self.h).round();
        if (n * self.h - self.t_end).abs() > 1e-9 * self.t_end || n < 1.0 {
            return Err(Error::Config("ou: t_end must be a multiple of h".into()));
        }
        Ok(n as usize)
    }
}

/// Exact OU transition over `h` with standard normal draw `z`.
pub fn ou_exact_step(y: f64, nu: f64, mu: f64, sigma: f64, h: f64, z: f64) -> f64 {
    let decay = (-nu * h).exp();
    mu + (y - mu) * decay + sigma * ((1.0 - (-2.0 * nu * h).exp()) / (2.0 * nu)).sqrt() * z
}

/// Exact-OU data: initial observations and per-step moments.
#[derive(Clone, Debug, PartialEq)]
pub struct OuData {
    pub x0: Vec<Vec<f64>>,
    /// `mean[n][c]`, `var[n][c]` for `n = 0..=N`.
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
}

pub fn ou_data(cfg: &OuConfig, seed: u64) -> Result<OuData> {
    let steps = cfg.steps()?;
    let d = cfg.obs_dim;
    let mut sum = vec![vec![0.0; d]; steps + 1];
    let mut sq = vec![vec![0.0; d]; steps + 1];
    let mut x0 = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, i as u64));
        let mut y: Vec<f64> = (0..d)
            .map(|_| cfg.mu + cfg.x0_std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        x0.push(y.clone());
        for n in 0..=steps {
            if n > 0 {
                for v in y.iter_mut() {
                    *v = ou_exact_step(*v, cfg.nu, cfg.mu, cfg.sigma, cfg.h, StandardNormal.sample(&mut rng));
                }
            }
            for c in 0..d {
                sum[n][c] += y[c];
                sq[n][c] += y[c] * y[c];
            }
        }
    }
    let m = cfg.samples as f64;
    let mean: Vec<Vec<f64>> = sum.iter().map(|r| r.iter().map(|s| s / m).collect()).collect();
    let var = sq
        .iter()
        .zip(&mean)
        .map(|(r, mr)| r.iter().zip(mr).map(|(s, mu)| s / m - mu * mu).collect())
        .collect();
    Ok(OuData { x0, mean, var })
}

/// `dz = g(z) dt + diag(f(t)) dW` with one Brownian channel per latent
/// component.
#[derive(Clone, Debug, PartialEq)]
pub struct LangevinField {
    pub drift: Mlp,
    pub diffusion: Mlp,
    pub time_scale: f64,
}

impl VectorField for LangevinField {
    fn dim(&self) -> usize {
        self.drift.output_dim()
    }

    fn channels(&self) -> usize {
        self.drift.output_dim() + 1
    }

    fn apply(&self, t: f64, y: &[f64], dx: &[f64], out: &mut [f64]) {
        let g = self.drift.forward(y).expect("latent dimension checked by the solver");
        let f = self
            .diffusion
            .forward(&[t * self.time_scale])
            .expect("scalar time input");
        for i in 0..y.len() {
            out[i] = g[i] * dx[0] + f[i] * dx[i + 1];
        }
    }
}

impl ParametricField for LangevinField {
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
        let n = self.drift.num_params();
        let (gd, gf) = grad_theta.split_at_mut(n);
        let cot_g: Vec<f64> = cot.iter().map(|c| c * dx[0]).collect();
        self.drift
            .backprop_into(y, &cot_g, gd, grad_y)
            .expect("dimensions fixed at construction");
        let cot_f: Vec<f64> = cot.iter().enumerate().map(|(i, c)| c * dx[i + 1]).collect();
        let mut gt = [0.0];
        self.diffusion
            .backprop_into(&[t * self.time_scale], &cot_f, gf, &mut gt)
            .expect("dimensions fixed at construction");
    }
}

/// Flat parameter layout: encoder `A` (`d_z x obs`), `b`, readout `C`
/// (`obs x d_z`), `d`, then drift and diffusion networks.
#[derive(Clone, Debug)]
pub struct OuModel {
    pub latent: usize,
    pub obs: usize,
    pub template: LangevinField,
}

impl OuModel {
    pub fn new(cfg: &OuConfig, seed: u64) -> Result<(Self, Vec<f64>)> {
        let (dz, d) = (cfg.latent_dim, cfg.obs_dim);
        let mut drift = Mlp::new(dz, cfg.width, cfg.depth, dz, stream_seed(seed, 1))?;
        let mut diffusion = Mlp::new(1, cfg.width, cfg.depth, dz, stream_seed(seed, 2))?;
        drift.scale_output_layer(0.1);
        diffusion.scale_output_layer(0.1);
        let template = LangevinField {
            drift,
            diffusion,
            time_scale: 1.0 / cfg.t_end,
        };
        let enc = Mlp::new(d, 1, 0, dz, stream_seed(seed, 3))?;
        let dec = Mlp::new(dz, 1, 0, d, stream_seed(seed, 4))?;
        let mut params = enc.params().to_vec();
        params.extend_from_slice(dec.params());
        params.extend(template.params());
        Ok((
            Self {
                latent: dz,
                obs: d,
                template,
            },
            params,
        ))
    }

    fn head_len(&self) -> usize {
        self.latent * (self.obs + 1) + self.obs * (self.latent + 1)
    }

    pub fn field(&self, params: &[f64]) -> LangevinField {
        let mut f = self.template.clone();
        f.set_params(&params[self.head_len()..]);
        f
    }

    pub fn encode(&self, params: &[f64], x0: &[f64]) -> Vec<f64> {
        let (dz, d) = (self.latent, self.obs);
        let (w, b) = params[..dz * (d + 1)].split_at(dz * d);
        (0..dz)
            .map(|i| b[i] + (0..d).map(|j| w[i * d + j] * x0[j]).sum::<f64>())
            .collect()
    }

    pub fn decode(&self, params: &[f64], z: &[f64]) -> Vec<f64> {
        let (dz, d) = (self.latent, self.obs);
        let off = dz * (d + 1);
        let (w, b) = params[off..off + d * (dz + 1)].split_at(d * dz);
        (0..d)
            .map(|c| b[c] + (0..dz).map(|j| w[c * dz + j] * z[j]).sum::<f64>())
            .collect()
    }
}

struct EpochContext<'a> {
    cfg: &'a OuConfig,
    model: &'a OuModel,
    data: &'a OuData,
    scheme: &'a Scheme,
    grid: TimeGrid,
    noise_seed: u64,
}

impl EpochContext<'_> {
    fn path(&self, i: usize) -> DriverPath {
        DriverPath::brownian(self.grid, self.model.latent, stream_seed(self.noise_seed, i as u64))
    }

    /// Per-step sums of decoded values and their squares over samples `range`.
    fn moment_sums(&self, params: &[f64], field: &LangevinField, range: std::ops::Range<usize>) -> Vec<f64> {
        let (steps, d) = (self.grid.steps(), self.model.obs);
        let mut acc = vec![0.0; 2 * (steps + 1) * d];
        for i in range {
            let path = self.path(i);
            let mut state = self.scheme.init(&self.model.encode(params, &self.data.x0[i]));
            for n in 0..=steps {
                if n > 0 {
                    match self.scheme.step(field, self.grid.time(n - 1), &state, path.increment(n - 1)) {
                        Ok(s) => state = s,
                        Err(_) => return vec![f64::NAN; acc.len()],
                    }
                }
                let y = self.model.decode(params, &state.y);
                for c in 0..d {
                    acc[2 * (n * d + c)] += y[c];
                    acc[2 * (n * d + c) + 1] += y[c] * y[c];
                }
            }
        }
        acc
    }

    /// Gradient contribution of samples `range` given the model moments.
    fn gradient(&self, params: &[f64], field: &LangevinField, mean: &[Vec<f64>], var: &[Vec<f64>], range: std::ops::Range<usize>) -> Vec<f64> {
        let (steps, d, dz) = (self.grid.steps(), self.model.obs, self.model.latent);
        let m = self.cfg.samples as f64;
        let scale = 2.0 / ((steps + 1) * d) as f64 / m;
        let head = self.model.head_len();
        let dec_off = dz * (d + 1);
        let mut grad = vec![0.0; params.len()];
        let dec_w = &params[dec_off..dec_off + d * dz];
        for i in range {
            let path = self.path(i);
            let x0 = &self.data.x0[i];
            let z0 = self.model.encode(params, x0);
            let mut state = self.scheme.init(&z0);
            for n in 0..steps {
                match self.scheme.step(field, self.grid.time(n), &state, path.increment(n)) {
                    Ok(s) => state = s,
                    Err(_) => return vec![f64::NAN; grad.len()],
                }
            }
            let mut dec_grad = vec![0.0; d * (dz + 1)];
            let cot = |n: usize, z: &[f64]| {
                let y = self.model.decode(params, z);
                let gy: Vec<f64> = (0..d)
                    .map(|c| {
                        scale
                            * ((mean[n][c] - self.data.mean[n][c])
                                + 2.0 * (var[n][c] - self.data.var[n][c]) * (y[c] - mean[n][c]))
                    })
                    .collect();
                for c in 0..d {
                    for j in 0..dz {
                        dec_grad[c * dz + j] += gy[c] * z[j];
                    }
                    dec_grad[d * dz + c] += gy[c];
                }
                Some((0..dz).map(|j| (0..d).map(|c| dec_w[c * dz + j] * gy[c]).sum()).collect())
            };
            let g = match scheme_backprop(self.scheme, field, &state, &path, cot, None) {
                Ok(g) => g,
                Err(_) => return vec![f64::NAN; grad.len()],
            };
            for k in 0..dz {
                for j in 0..d {
                    grad[k * d + j] += g.d_y0[k] * x0[j];
                }
                grad[dz * d + k] += g.d_y0[k];
            }
            for (a, b) in grad[dec_off..head].iter_mut().zip(&dec_grad) {
                *a += b;
            }
            for (a, b) in grad[head..].iter_mut().zip(&g.d_theta) {
                *a += b;
            }
        }
        grad
    }
}

/// Mean/variance from per-step sums; returns the loss as well.
fn moments_and_loss(sums: &[f64], data: &OuData, samples: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, f64) {
    let steps1 = data.mean.len();
    let d = data.mean[0].len();
    let m = samples as f64;
    let mut mean = vec![vec![0.0; d]; steps1];
    let mut var = vec![vec![0.0; d]; steps1];
    let mut loss = 0.0;
    for n in 0..steps1 {
        for c in 0..d {
            let mu = sums[2 * (n * d + c)] / m;
            let v = sums[2 * (n * d + c) + 1] / m - mu * mu;
            mean[n][c] = mu;
            var[n][c] = v;
            loss += (mu - data.mean[n][c]).powi(2) + (v - data.var[n][c]).powi(2);
        }
    }
    (mean, var, loss / (steps1 * d) as f64)
}

/// Trains one solver; identical seeds across solvers give identical
/// initial parameters, data and noise.
pub fn train_ou(cfg: &OuConfig, solver: &str, x: f64, seed: u64, exec: Execution) -> Result<TrainingCurve> {
    cfg.validate(x)?;
    let scheme = scheme_from_name(solver, x)?;
    let data = ou_data(cfg, stream_seed(seed, DATA_STREAM))?;
    let (model, mut params) = OuModel::new(cfg, stream_seed(seed, INIT_STREAM))?;
    let grid = TimeGrid::new(0.0, cfg.t_end, cfg.steps()?)?;
    let mut adam = Adam::new(params.len(), cfg.lr);
    train(solver, cfg.epochs, &mut params, &mut adam, |p, epoch| {
        let ctx = EpochContext {
            cfg,
            model: &model,
            data: &data,
            scheme: &scheme,
            grid,
            noise_seed: stream_seed(stream_seed(seed, NOISE_STREAM), epoch as u64),
        };
        let field = model.field(p);
        let len = 2 * (grid.steps() + 1) * cfg.obs_dim;
        let sums = exec.chunked_sum(cfg.samples, cfg.chunk, len, |r| ctx.moment_sums(p, &field, r));
        let (mean, var, loss) = moments_and_loss(&sums, &data, cfg.samples);
        if !loss.is_finite() {
            return Ok(EpochOutcome { loss, grads: Vec::new() });
        }
        let grads = exec.chunked_sum(cfg.samples, cfg.chunk, p.len(), |r| ctx.gradient(p, &field, &mean, &var, r));
        Ok(EpochOutcome { loss, grads })
    })
}

pub fn run_ou(config: &ExperimentConfig) -> Result<RunOutput> {
    let cfg = &config.ou;
    let mut report = RunReport::new(config);
    report.notes.push(
        "loss: mean over time steps and components of squared differences of per-step sample means and variances against exact-OU data; encoder reads x_0; affine read-out".into(),
    );
    let mut curves = Vec::new();
    for solver in &cfg.solvers {
        let curve = timed(&mut report.timings, &format!("train {solver}"), || {
            train_ou(cfg, solver, config.x, config.seed, config.execution)
        })?;
        curves.push(curve);
    }
    let table = loss_table(&curves);
    report.training = curves;
    Ok(RunOutput {
        report,
        tables: vec![CsvTable {
            name: "ou_loss".into(),
            content: table,
        }],
        rasters: Vec::new(),
    })
}
