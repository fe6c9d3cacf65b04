//! Forward and backward-recovery convergence on
//! `dy = cos(y) dX¹ + sin(y) dX²`, `y_0 = 1`, driven by fractional Brownian
//! motion.
//!
//! The forward error compares each step size against a reference solution
//! of the same scheme on a finer grid of the same realization. The backward
//! error is `max_n |y_0 - ŷ_n|`, where `ŷ_n` runs the reverse map `n` times
//! from the forward state `y_n`.

use serde::{Deserialize, Serialize};

use super::{fit_loglog, scheme_from_name, timed, CsvTable, ExperimentConfig, RunOutput, RunReport};
use crate::drivers::{stream_seed, DriverPath, TimeGrid};
use crate::par::Execution;
use crate::solvers::{integrate, max_recovery_error, reconstruct_backward, ChannelField, Scheme, VectorField};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub hurst: Vec<f64>,
    pub realizations: usize,
    /// Step sizes `h = t_end 2^-k`.
    pub log2_steps: Vec<u32>,
    /// Reference step is the finest `h` divided by this factor.
    pub reference_factor: usize,
    pub t_end: f64,
    pub y0: f64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            hurst: vec![0.4, 0.5, 0.6],
            realizations: 10,
            log2_steps: vec![4, 5, 6, 7, 8],
            reference_factor: 32,
            t_end: 1.0,
            y0: 1.0,
        }
    }
}

impl ConvergenceConfig {
    pub fn validate(&self) -> Result<()> {
        for &h in &self.hurst {
            if !(h > 0.25 && h < 1.0) {
                return Err(Error::Config(format!("Hurst index {h} outside (1/4, 1)")));
            }
        }
        if self.log2_steps.is_empty() || self.log2_steps.iter().any(|&k| k > 20) {
            return Err(Error::Config("log2_steps must be non-empty with entries at most 20".into()));
        }
        if self.realizations == 0 || self.reference_factor == 0 {
            return Err(Error::Config("realizations and reference_factor must be positive".into()));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::Config("t_end must be positive".into()));
        }
        Ok(())
    }

    fn reference_steps(&self) -> usize {
        (1usize << self.log2_steps.iter().max().copied().unwrap_or(0)) * self.reference_factor
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub h: f64,
    pub steps: usize,
    /// Mean over realizations of `max_n |y(t_n) - y_n|`.
    pub forward_error: f64,
    /// Mean over realizations of `max_n |y_0 - ŷ_n|`.
    pub backward_error: f64,
    /// Mean over realizations of `|y_0 - ŷ_0|` after the full reverse pass.
    pub terminal_recovery: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub scheme: String,
    pub hurst: f64,
    pub realizations: usize,
    pub rows: Vec<ConvergenceRow>,
    pub forward_slope: Option<(f64, f64)>,
    pub backward_slope: Option<(f64, f64)>,
    pub recovery_slope: Option<(f64, f64)>,
    /// `2H - 1/2`.
    pub expected_forward: f64,
    /// `6H - 1`.
    pub expected_backward: f64,
}

/// `cos(y)` on channel 1, `sin(y)` on channel 2, nothing on time.
pub fn cos_sin_field() -> impl VectorField {
    ChannelField::new(1, 3, |m, _, y: &[f64], out: &mut [f64]| {
        out[0] = match m {
            1 => y[0].cos(),
            2 => y[0].sin(),
            _ => 0.0,
        }
    })
}

struct Sample {
    forward: Vec<f64>,
    backward: Vec<f64>,
    recovery: Vec<f64>,
}

fn one_realization(
    scheme: &Scheme,
    cfg: &ConvergenceConfig,
    hurst: f64,
    seed: u64,
) -> Result<Sample> {
    let field = cos_sin_field();
    let ref_steps = cfg.reference_steps();
    let path = DriverPath::fbm(TimeGrid::new(0.0, cfg.t_end, ref_steps)?, 2, hurst, seed)?;
    let y0 = [cfg.y0];
    let reference = integrate(scheme, &field, &y0, &path)?;
    let mut out = Sample {
        forward: Vec::new(),
        backward: Vec::new(),
        recovery: Vec::new(),
    };
    for &k in &cfg.log2_steps {
        let steps = 1usize << k;
        let coarse = path.coarsen(ref_steps / steps)?;
        let factor = ref_steps / steps;
        let traj = integrate(scheme, &field, &y0, &coarse)?;
        let fwd = traj
            .states
            .iter()
            .enumerate()
            .map(|(n, y)| (y[0] - reference.states[n * factor][0]).abs())
            .fold(0.0, f64::max);
        let back = reconstruct_backward(scheme, &field, &traj.terminal, &coarse)?;
        out.forward.push(fwd);
        out.backward.push(max_recovery_error(scheme, &field, &y0, &coarse)?);
        out.recovery.push((back[0][0] - cfg.y0).abs());
    }
    Ok(out)
}

fn slope_or_none(h: &[f64], e: &[f64]) -> Option<(f64, f64)> {
    fit_loglog(h, e).ok()
}

/// Error table for one Hurst index.
pub fn convergence_table(
    scheme: &Scheme,
    cfg: &ConvergenceConfig,
    hurst: f64,
    seed: u64,
    exec: Execution,
) -> Result<ConvergenceTable> {
    cfg.validate()?;
    let samples = exec.try_map(cfg.realizations, |i| {
        one_realization(scheme, cfg, hurst, stream_seed(seed, i as u64))
    })?;
    let m = cfg.realizations as f64;
    let mean = |pick: &dyn Fn(&Sample) -> &Vec<f64>, j: usize| samples.iter().map(|s| pick(s)[j]).sum::<f64>() / m;
    let rows: Vec<ConvergenceRow> = cfg
        .log2_steps
        .iter()
        .enumerate()
        .map(|(j, &k)| ConvergenceRow {
            h: cfg.t_end / (1u64 << k) as f64,
            steps: 1 << k,
            forward_error: mean(&|s| &s.forward, j),
            backward_error: mean(&|s| &s.backward, j),
            terminal_recovery: mean(&|s| &s.recovery, j),
        })
        .collect();
    let h: Vec<f64> = rows.iter().map(|r| r.h).collect();
    let pick = |f: fn(&ConvergenceRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    Ok(ConvergenceTable {
        scheme: scheme.name(),
        hurst,
        realizations: cfg.realizations,
        forward_slope: slope_or_none(&h, &pick(|r| r.forward_error)),
        backward_slope: slope_or_none(&h, &pick(|r| r.backward_error)),
        recovery_slope: slope_or_none(&h, &pick(|r| r.terminal_recovery)),
        expected_forward: 2.0 * hurst - 0.5,
        expected_backward: 6.0 * hurst - 1.0,
        rows,
    })
}

pub fn run_convergence(config: &ExperimentConfig) -> Result<RunOutput> {
    let cfg = &config.convergence;
    cfg.validate()?;
    let scheme = scheme_from_name(&config.solver, config.x)?;
    let mut report = RunReport::new(config);
    let mut csv = String::from("hurst,h,steps,forward_error,backward_error,terminal_recovery\n");
    let mut slopes = String::from(
        "hurst,forward_slope,forward_se,expected_forward,backward_slope,backward_se,expected_backward,recovery_slope,recovery_se\n",
    );
    for (i, &hurst) in cfg.hurst.iter().enumerate() {
        let table = timed(&mut report.timings, &format!("hurst {hurst}"), || {
            convergence_table(&scheme, cfg, hurst, stream_seed(config.seed, i as u64), config.execution)
        })?;
        for r in &table.rows {
            csv.push_str(&format!(
                "{hurst},{},{},{:e},{:e},{:e}\n",
                r.h, r.steps, r.forward_error, r.backward_error, r.terminal_recovery
            ));
        }
        let fmt = |s: Option<(f64, f64)>| s.map_or("nan,nan".to_string(), |(a, b)| format!("{a},{b}"));
        slopes.push_str(&format!(
            "{hurst},{},{},{},{},{}\n",
            fmt(table.forward_slope),
            table.expected_forward,
            fmt(table.backward_slope),
            table.expected_backward,
            fmt(table.recovery_slope)
        ));
        report.convergence.push(table);
    }
    Ok(RunOutput {
        report,
        tables: vec![
            CsvTable {
                name: "convergence".into(),
                content: csv,
            },
            CsvTable {
                name: "slopes".into(),
                content: slopes,
            },
        ],
        rasters: Vec::new(),
    })
}
