//! One-step maps and trajectory integration.
//!
//! The explicit RK scheme for rough drivers advances
//! `y' = y + Σ_i b_i F(k_i, dX)` with stages `k_i = y + Σ_{j<i} a_ij F(k_j, dX)`,
//! where `F(y, dX) = Σ_m f_m(y) dX^m` contracts the vector fields with the
//! increment (channel 0 is time). Its reverse map is the same step with the
//! increment negated. The two-state baselines (Reversible Heun, ALF and the
//! coupled wrapper) are exactly invertible and carry an auxiliary state `v`.

use std::io::Write;

use crate::drivers::DriverPath;
use crate::tableau::ButcherTableau;
use crate::{Error, Result};

/// Vector fields contracted with a driver increment.
pub trait VectorField: Sync {
    /// State dimension `q`.
    fn dim(&self) -> usize;

    /// Channel count `d + 1`, time included.
    fn channels(&self) -> usize;

    /// `out = Σ_m f_m(t, y) dx[m]`.
    fn apply(&self, t: f64, y: &[f64], dx: &[f64], out: &mut [f64]);
}

impl<F: VectorField + ?Sized> VectorField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn channels(&self) -> usize {
        (**self).channels()
    }
    fn apply(&self, t: f64, y: &[f64], dx: &[f64], out: &mut [f64]) {
        (**self).apply(t, y, dx, out)
    }
}

/// A vector field given channel by channel: `eval(m, t, y, out)` writes
/// `f_m(t, y)`.
pub struct ChannelField<F> {
    dim: usize,
    channels: usize,
    eval: F,
}

impl<F> ChannelField<F>
where
    F: Fn(usize, f64, &[f64], &mut [f64]) + Sync,
{
    pub fn new(dim: usize, channels: usize, eval: F) -> Self {
        Self {
            dim,
            channels,
            eval,
        }
    }
}

impl<F> VectorField for ChannelField<F>
where
    F: Fn(usize, f64, &[f64], &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn apply(&self, t: f64, y: &[f64], dx: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut tmp = vec![0.0; self.dim];
        for (m, &w) in dx.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            (self.eval)(m, t, y, &mut tmp);
            for (o, v) in out.iter_mut().zip(&tmp) {
                *o += w * v;
            }
        }
    }
}

/// Autonomous ODE `dy = f(y) dt` from a closure writing `f(y)`.
#[allow(clippy::type_complexity)]
pub fn ode_field<F>(dim: usize, f: F) -> ChannelField<impl Fn(usize, f64, &[f64], &mut [f64]) + Sync>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    ChannelField::new(dim, 1, move |_, _, y, out| f(y, out))
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::BlowUp { step: 0 })
    }
}

fn at_step(err: Error, step: usize) -> Error {
    match err {
        Error::BlowUp { .. } => Error::BlowUp { step },
        other => other,
    }
}

fn check_dims(field: &dyn VectorField, q: usize, dx: &[f64]) -> Result<()> {
    if field.dim() != q {
        return Err(Error::Dimension {
            expected: field.dim(),
            got: q,
        });
    }
    if field.channels() != dx.len() {
        return Err(Error::Dimension {
            expected: field.channels(),
            got: dx.len(),
        });
    }
    Ok(())
}

/// Scratch buffers for RK steps: stages `k_i` and contracted evaluations
/// `z_i = F(k_i, dX)`, each `s x q` row-major.
#[derive(Clone, Debug, Default)]
pub struct RkWorkspace {
    pub stages: Vec<f64>,
    pub evals: Vec<f64>,
}

impl RkWorkspace {
    pub fn new(stages: usize, dim: usize) -> Self {
        Self {
            stages: vec![0.0; stages * dim],
            evals: vec![0.0; stages * dim],
        }
    }

    fn ensure(&mut self, stages: usize, dim: usize) {
        self.stages.resize(stages * dim, 0.0);
        self.evals.resize(stages * dim, 0.0);
    }

    pub fn stage(&self, i: usize, dim: usize) -> &[f64] {
        &self.stages[i * dim..(i + 1) * dim]
    }
}

/// One explicit RK step into `y_out`, leaving stages and evaluations in `ws`.
/// Stage `i` is evaluated at time `t + c_i dx[0]`.
pub fn rk_step_into(
    tableau: &ButcherTableau,
    field: &dyn VectorField,
    t: f64,
    y: &[f64],
    dx: &[f64],
    ws: &mut RkWorkspace,
    y_out: &mut [f64],
) -> Result<()> {
    let q = y.len();
    check_dims(field, q, dx)?;
    let s = tableau.stages();
    ws.ensure(s, q);
    for i in 0..s {
        let (done, rest) = ws.evals.split_at_mut(i * q);
        let k = &mut ws.stages[i * q..(i + 1) * q];
        k.copy_from_slice(y);
        for (j, &a) in tableau.a_row(i).iter().enumerate() {
            if a != 0.0 {
                for (kv, zv) in k.iter_mut().zip(&done[j * q..(j + 1) * q]) {
                    *kv += a * zv;
                }
            }
        }
        check_finite(k)?;
        let z = &mut rest[..q];
        field.apply(t + tableau.c()[i] * dx[0], k, dx, z);
        check_finite(z)?;
    }
    y_out.copy_from_slice(y);
    for (i, &b) in tableau.b().iter().enumerate() {
        if b != 0.0 {
            for (o, z) in y_out.iter_mut().zip(&ws.evals[i * q..(i + 1) * q]) {
                *o += b * z;
            }
        }
    }
    check_finite(y_out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RkStep {
    pub y: Vec<f64>,
    pub stages: Vec<Vec<f64>>,
}

/// One step of the simplified RK scheme, returning the new state and stages.
pub fn rk_step(
    tableau: &ButcherTableau,
    field: &dyn VectorField,
    t: f64,
    y: &[f64],
    dx: &[f64],
) -> Result<RkStep> {
    let q = y.len();
    let mut ws = RkWorkspace::new(tableau.stages(), q);
    let mut out = vec![0.0; q];
    rk_step_into(tableau, field, t, y, dx, &mut ws, &mut out)?;
    let stages = ws.stages.chunks(q).map(<[f64]>::to_vec).collect();
    Ok(RkStep { y: out, stages })
}

/// Reverse map: the forward step from `t_next` with the increment negated.
pub fn rk_step_reverse(
    tableau: &ButcherTableau,
    field: &dyn VectorField,
    t_next: f64,
    y_next: &[f64],
    dx: &[f64],
) -> Result<Vec<f64>> {
    let neg: Vec<f64> = dx.iter().map(|v| -v).collect();
    Ok(rk_step(tableau, field, t_next, y_next, &neg)?.y)
}

/// State of a one- or two-state scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverState {
    pub y: Vec<f64>,
    pub v: Option<Vec<f64>>,
    pub step: usize,
}

impl SolverState {
    pub fn single(y: Vec<f64>) -> Self {
        Self {
            y,
            v: None,
            step: 0,
        }
    }

    pub fn pair(y: Vec<f64>, v: Vec<f64>) -> Self {
        Self {
            y,
            v: Some(v),
            step: 0,
        }
    }

    fn aux(&self) -> Result<&[f64]> {
        self.v
            .as_deref()
            .ok_or_else(|| Error::Config("two-state scheme needs an auxiliary state".into()))
    }
}

/// Reversible Heun: `v' = 2y - v + F(t, v)`, then
/// `y' = y + (F(t, v) + F(t + dt, v')) / 2`.
pub fn reversible_heun_step(
    field: &dyn VectorField,
    t: f64,
    state: &SolverState,
    dx: &[f64],
) -> Result<SolverState> {
    let (y, v) = (&state.y, state.aux()?);
    check_dims(field, y.len(), dx)?;
    let q = y.len();
    let mut f0 = vec![0.0; q];
    field.apply(t, v, dx, &mut f0);
    let v_next: Vec<f64> = (0..q).map(|i| 2.0 * y[i] - v[i] + f0[i]).collect();
    let mut f1 = vec![0.0; q];
    field.apply(t + dx[0], &v_next, dx, &mut f1);
    let y_next: Vec<f64> = (0..q).map(|i| y[i] + 0.5 * (f0[i] + f1[i])).collect();
    check_finite(&y_next)?;
    check_finite(&v_next)?;
    Ok(SolverState {
        y: y_next,
        v: Some(v_next),
        step: state.step + 1,
    })
}

/// Exact algebraic inverse of [`reversible_heun_step`].
pub fn reversible_heun_reverse(
    field: &dyn VectorField,
    t_next: f64,
    state: &SolverState,
    dx: &[f64],
) -> Result<SolverState> {
    let (y1, v1) = (&state.y, state.aux()?);
    check_dims(field, y1.len(), dx)?;
    let q = y1.len();
    let mut f1 = vec![0.0; q];
    field.apply(t_next, v1, dx, &mut f1);
    let v0: Vec<f64> = (0..q).map(|i| 2.0 * y1[i] - v1[i] - f1[i]).collect();
    let mut f0 = vec![0.0; q];
    field.apply(t_next - dx[0], &v0, dx, &mut f0);
    let y0: Vec<f64> = (0..q).map(|i| y1[i] - 0.5 * (f0[i] + f1[i])).collect();
    check_finite(&y0)?;
    check_finite(&v0)?;
    Ok(SolverState {
        y: y0,
        v: Some(v0),
        step: state.step.saturating_sub(1),
    })
}

fn require_ode(field: &dyn VectorField) -> Result<()> {
    if field.channels() != 1 {
        return Err(Error::Config(
            "ALF integrates ODEs only (time channel alone)".into(),
        ));
    }
    Ok(())
}

/// Asynchronous leapfrog: with `u = y + h v / 2` and `w = f(t + h/2, u)`,
/// `y' = y + h w` and `v' = 2w - v`.
pub fn alf_step(field: &dyn VectorField, t: f64, state: &SolverState, h: f64) -> Result<SolverState> {
    require_ode(field)?;
    let (y, v) = (&state.y, state.aux()?);
    let q = y.len();
    let u: Vec<f64> = (0..q).map(|i| y[i] + 0.5 * h * v[i]).collect();
    let mut w = vec![0.0; q];
    field.apply(t + 0.5 * h, &u, &[1.0], &mut w);
    let y_next: Vec<f64> = (0..q).map(|i| y[i] + h * w[i]).collect();
    let v_next: Vec<f64> = (0..q).map(|i| 2.0 * w[i] - v[i]).collect();
    check_finite(&y_next)?;
    check_finite(&v_next)?;
    Ok(SolverState {
        y: y_next,
        v: Some(v_next),
        step: state.step + 1,
    })
}

/// Exact inverse of [`alf_step`].
pub fn alf_reverse(field: &dyn VectorField, t_next: f64, state: &SolverState, h: f64) -> Result<SolverState> {
    require_ode(field)?;
    let (y1, v1) = (&state.y, state.aux()?);
    let q = y1.len();
    let u: Vec<f64> = (0..q).map(|i| y1[i] - 0.5 * h * v1[i]).collect();
    let mut w = vec![0.0; q];
    field.apply(t_next - 0.5 * h, &u, &[1.0], &mut w);
    let v0: Vec<f64> = (0..q).map(|i| 2.0 * w[i] - v1[i]).collect();
    let y0: Vec<f64> = (0..q).map(|i| u[i] - 0.5 * h * v0[i]).collect();
    check_finite(&y0)?;
    check_finite(&v0)?;
    Ok(SolverState {
        y: y0,
        v: Some(v0),
        step: state.step.saturating_sub(1),
    })
}

fn check_coupling(coupling: f64) -> Result<()> {
    if coupling > 0.0 && coupling <= 1.0 {
        Ok(())
    } else {
        Err(Error::Domain {
            name: "coupling",
            value: coupling,
            reason: "must lie in (0, 1]",
        })
    }
}

/// Increment `Ψ(t, y, dx) = Φ(y) - y` of one base RK step.
fn base_increment(
    base: &ButcherTableau,
    field: &dyn VectorField,
    t: f64,
    y: &[f64],
    dx: &[f64],
) -> Result<Vec<f64>> {
    let next = rk_step(base, field, t, y, dx)?.y;
    Ok(next.iter().zip(y).map(|(a, b)| a - b).collect())
}

/// Coupled reversible wrapper around a base method `Ψ`:
/// `y' = λ y + (1-λ) v + Ψ_h(t, v)`, `v' = v - Ψ_{-h}(t + h, y')`.
pub fn reversible_wrap_step(
    base: &ButcherTableau,
    coupling: f64,
    field: &dyn VectorField,
    t: f64,
    state: &SolverState,
    dx: &[f64],
) -> Result<SolverState> {
    check_coupling(coupling)?;
    let (y, v) = (&state.y, state.aux()?);
    let q = y.len();
    let psi = base_increment(base, field, t, v, dx)?;
    let y_next: Vec<f64> = (0..q)
        .map(|i| coupling * y[i] + (1.0 - coupling) * v[i] + psi[i])
        .collect();
    let neg: Vec<f64> = dx.iter().map(|x| -x).collect();
    let psi_back = base_increment(base, field, t + dx[0], &y_next, &neg)?;
    let v_next: Vec<f64> = (0..q).map(|i| v[i] - psi_back[i]).collect();
    check_finite(&y_next)?;
    check_finite(&v_next)?;
    Ok(SolverState {
        y: y_next,
        v: Some(v_next),
        step: state.step + 1,
    })
}

/// Exact inverse of [`reversible_wrap_step`].
pub fn reversible_wrap_reverse(
    base: &ButcherTableau,
    coupling: f64,
    field: &dyn VectorField,
    t_next: f64,
    state: &SolverState,
    dx: &[f64],
) -> Result<SolverState> {
    check_coupling(coupling)?;
    let (y1, v1) = (&state.y, state.aux()?);
    let q = y1.len();
    let neg: Vec<f64> = dx.iter().map(|x| -x).collect();
    let psi_back = base_increment(base, field, t_next, y1, &neg)?;
    let v0: Vec<f64> = (0..q).map(|i| v1[i] + psi_back[i]).collect();
    let psi = base_increment(base, field, t_next - dx[0], &v0, dx)?;
    let y0: Vec<f64> = (0..q)
        .map(|i| (y1[i] - (1.0 - coupling) * v0[i] - psi[i]) / coupling)
        .collect();
    check_finite(&y0)?;
    check_finite(&v0)?;
    Ok(SolverState {
        y: y0,
        v: Some(v0),
        step: state.step.saturating_sub(1),
    })
}

/// A one-step method with a forward and a reverse map.
#[derive(Clone, Debug, PartialEq)]
pub enum Scheme {
    RungeKutta(ButcherTableau),
    ReversibleHeun,
    Alf,
    Reversible { base: ButcherTableau, coupling: f64 },
}

impl Scheme {
    pub fn name(&self) -> String {
        match self {
            Scheme::RungeKutta(t) => t.name().to_string(),
            Scheme::ReversibleHeun => "reversible_heun".into(),
            Scheme::Alf => "alf".into(),
            Scheme::Reversible { base, coupling } => format!("reversible({},{coupling})", base.name()),
        }
    }

    pub fn is_two_state(&self) -> bool {
        !matches!(self, Scheme::RungeKutta(_))
    }

    /// Initial state; two-state schemes start from `v_0 = y_0`.
    pub fn init(&self, y0: &[f64]) -> SolverState {
        if self.is_two_state() {
            SolverState::pair(y0.to_vec(), y0.to_vec())
        } else {
            SolverState::single(y0.to_vec())
        }
    }

    pub fn step(&self, field: &dyn VectorField, t: f64, state: &SolverState, dx: &[f64]) -> Result<SolverState> {
        match self {
            Scheme::RungeKutta(tab) => Ok(SolverState {
                y: rk_step(tab, field, t, &state.y, dx)?.y,
                v: None,
                step: state.step + 1,
            }),
            Scheme::ReversibleHeun => reversible_heun_step(field, t, state, dx),
            Scheme::Alf => alf_step(field, t, state, dx[0]),
            Scheme::Reversible { base, coupling } => {
                reversible_wrap_step(base, *coupling, field, t, state, dx)
            }
        }
    }

    /// Maps the state at `t_next` back across the increment `dx`.
    pub fn reverse(&self, field: &dyn VectorField, t_next: f64, state: &SolverState, dx: &[f64]) -> Result<SolverState> {
        match self {
            Scheme::RungeKutta(tab) => Ok(SolverState {
                y: rk_step_reverse(tab, field, t_next, &state.y, dx)?,
                v: None,
                step: state.step.saturating_sub(1),
            }),
            Scheme::ReversibleHeun => reversible_heun_reverse(field, t_next, state, dx),
            Scheme::Alf => alf_reverse(field, t_next, state, dx[0]),
            Scheme::Reversible { base, coupling } => {
                reversible_wrap_reverse(base, *coupling, field, t_next, state, dx)
            }
        }
    }
}

/// States `y_0..y_N` on the grid of the driving path.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Final full state (carries `v` for two-state schemes).
    pub terminal: SolverState,
}

impl Trajectory {
    /// CSV with header `step,t,y_0,..,y_{q-1}`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let q = self.states.first().map_or(0, Vec::len);
        let header: Vec<String> = ["step".to_string(), "t".to_string()]
            .into_iter()
            .chain((0..q).map(|i| format!("y_{i}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for (n, (t, y)) in self.times.iter().zip(&self.states).enumerate() {
            write!(w, "{n},{t}")?;
            for v in y {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Integrates from `y0` over every increment of `path`.
pub fn integrate(scheme: &Scheme, field: &dyn VectorField, y0: &[f64], path: &DriverPath) -> Result<Trajectory> {
    let grid = path.grid();
    let mut state = scheme.init(y0);
    let mut states = Vec::with_capacity(path.steps() + 1);
    states.push(y0.to_vec());
    for n in 0..path.steps() {
        state = scheme
            .step(field, grid.time(n), &state, path.increment(n))
            .map_err(|e| at_step(e, n))?;
        states.push(state.y.clone());
    }
    Ok(Trajectory {
        times: (0..=path.steps()).map(|n| grid.time(n)).collect(),
        states,
        terminal: state,
    })
}

/// Runs the reverse map from the terminal state down to `t_0`. Entry `n` of
/// the result approximates `y_n`; entry 0 is the recovered initial state.
pub fn reconstruct_backward(
    scheme: &Scheme,
    field: &dyn VectorField,
    terminal: &SolverState,
    path: &DriverPath,
) -> Result<Vec<Vec<f64>>> {
    let grid = path.grid();
    let n_steps = path.steps();
    let mut out = vec![Vec::new(); n_steps + 1];
    let mut state = terminal.clone();
    out[n_steps] = state.y.clone();
    for n in (0..n_steps).rev() {
        state = scheme
            .reverse(field, grid.time(n + 1), &state, path.increment(n))
            .map_err(|e| at_step(e, n))?;
        out[n] = state.y.clone();
    }
    Ok(out)
}

/// `max_n |y_0 - ŷ_n|` where `ŷ_n` applies the reverse map `n` times to the
/// forward state `y_n`. Costs `O(N^2)` steps.
pub fn max_recovery_error(
    scheme: &Scheme,
    field: &dyn VectorField,
    y0: &[f64],
    path: &DriverPath,
) -> Result<f64> {
    let grid = path.grid();
    let mut forward = scheme.init(y0);
    let mut worst = 0.0f64;
    for n in 0..path.steps() {
        forward = scheme
            .step(field, grid.time(n), &forward, path.increment(n))
            .map_err(|e| at_step(e, n))?;
        let mut back = forward.clone();
        for k in (0..=n).rev() {
            back = scheme
                .reverse(field, grid.time(k + 1), &back, path.increment(k))
                .map_err(|e| at_step(e, k))?;
        }
        let err = back
            .y
            .iter()
            .zip(y0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drivers::TimeGrid;
    use crate::tableau::{classical, ees25};

    fn linear(lambda: f64) -> impl VectorField {
        ode_field(1, move |y, out| out[0] = lambda * y[0])
    }

    fn ees() -> ButcherTableau {
        ees25(0.1).unwrap()
    }

    fn r_ees(rho: f64) -> f64 {
        1.0 + rho + rho * rho / 2.0 + rho.powi(3) / 8.0
    }

    #[test]
    fn linear_step_is_stability_polynomial() {
        let out = rk_step(&ees(), &linear(1.0), 0.0, &[1.0], &[0.1]).unwrap();
        assert!((out.y[0] - 1.105125).abs() < 1e-15);
        assert_eq!(out.stages.len(), 3);
    }

    #[test]
    fn zero_increment_is_identity() {
        let field = ChannelField::new(2, 3, |m, _, y: &[f64], out: &mut [f64]| {
            out[0] = (m as f64 + 1.0) * y[1].sin();
            out[1] = y[0].cos();
        });
        let out = rk_step(&ees(), &field, 0.3, &[0.2, -0.7], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(out.y, vec![0.2, -0.7]);
        for k in &out.stages {
            assert_eq!(k, &vec![0.2, -0.7]);
        }
        let back = rk_step_reverse(&ees(), &field, 0.3, &out.y, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(back, vec![0.2, -0.7]);
    }

    fn cos_sin() -> impl VectorField {
        ChannelField::new(1, 3, |m, _, y: &[f64], out: &mut [f64]| {
            out[0] = match m {
                0 => 0.0,
                1 => y[0].cos(),
                _ => y[0].sin(),
            }
        })
    }

    #[test]
    fn cos_sin_step_matches_hand_unrolled_stages() {
        let (x1, x2) = (0.1, -0.05);
        let f = |y: f64| y.cos() * x1 + y.sin() * x2;
        let y = 1.0f64;
        let k1 = y;
        let z1 = f(k1);
        let k2 = y + z1 / 3.0;
        let z2 = f(k2);
        let k3 = y - 5.0 / 48.0 * z1 + 15.0 / 16.0 * z2;
        let z3 = f(k3);
        let want = y + 0.1 * z1 + 0.5 * z2 + 0.4 * z3;
        let got = rk_step(&ees(), &cos_sin(), 0.0, &[1.0], &[0.0, x1, x2]).unwrap();
        assert!((got.y[0] - want).abs() < 1e-14);
        assert!((got.stages[2][0] - k3).abs() < 1e-14);
    }

    #[test]
    fn reverse_after_forward_is_stability_product() {
        let rho = 0.1;
        let y1 = rk_step(&ees(), &linear(1.0), 0.0, &[1.0], &[rho]).unwrap().y;
        let y0 = rk_step_reverse(&ees(), &linear(1.0), rho, &y1, &[rho]).unwrap();
        let want = r_ees(rho) * r_ees(-rho);
        assert!((y0[0] - want).abs() < 1e-15);
        assert!((1.0 - want - 1.5625e-8).abs() < 1e-10);
    }

    #[test]
    fn one_step_residual_is_sixth_order() {
        let field = ode_field(1, |y, out| out[0] = y[0].sin());
        let hs = [0.1, 0.05, 0.025, 0.0125];
        let res: Vec<f64> = hs
            .iter()
            .map(|&h| {
                let y1 = rk_step(&ees(), &field, 0.0, &[1.0], &[h]).unwrap().y;
                let y0 = rk_step_reverse(&ees(), &field, h, &y1, &[h]).unwrap();
                (y0[0] - 1.0).abs()
            })
            .collect();
        // ratios of successive halvings approach 2^6
        for w in res.windows(2).take(2) {
            let ratio = w[0] / w[1];
            assert!(ratio > 50.0 && ratio < 80.0, "{res:?}");
        }
    }

    #[test]
    fn euler_tableau_is_euler_maruyama() {
        let path = DriverPath::brownian(TimeGrid::new(0.0, 1.0, 50).unwrap(), 1, 5);
        let field = ChannelField::new(1, 2, |m, t, y: &[f64], out: &mut [f64]| {
            out[0] = if m == 0 { -y[0] + t } else { 0.3 * y[0].cos() };
        });
        let traj = integrate(&Scheme::RungeKutta(classical("euler").unwrap()), &field, &[0.5], &path).unwrap();
        let mut y = 0.5f64;
        for n in 0..50 {
            let dx = path.increment(n);
            let t = path.grid().time(n);
            y = y + (-y + t) * dx[0] + 0.3 * y.cos() * dx[1];
            assert!((traj.states[n + 1][0] - y).abs() <= 1e-15);
        }
    }

    #[test]
    fn integrate_linear_decay() {
        let path = DriverPath::deterministic(TimeGrid::new(0.0, 1.0, 10).unwrap());
        let traj = integrate(&Scheme::RungeKutta(ees()), &linear(-1.0), &[1.0], &path).unwrap();
        assert_eq!(traj.states.len(), 11);
        let want = r_ees(-0.1).powi(10);
        assert!((traj.states[10][0] - want).abs() < 1e-14);
        assert!((want - 0.368_032_266_596_46).abs() < 1e-12);

        let back = reconstruct_backward(&Scheme::RungeKutta(ees()), &linear(-1.0), &traj.terminal, &path).unwrap();
        let closed = r_ees(0.1).powi(10) * r_ees(-0.1).powi(10);
        assert!((back[0][0] - closed).abs() < 1e-14);
    }

    #[test]
    fn zero_driver_keeps_state() {
        let grid = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let path = DriverPath::from_increments(grid, 2, (0..8).flat_map(|_| [0.125, 0.0, 0.0]).collect()).unwrap();
        let field = ChannelField::new(1, 3, |m, _, y: &[f64], out: &mut [f64]| {
            out[0] = if m == 0 { 0.0 } else { y[0].sin() };
        });
        let traj = integrate(&Scheme::RungeKutta(ees()), &field, &[0.4], &path).unwrap();
        assert!(traj.states.iter().all(|y| y[0] == 0.4));
    }

    #[test]
    fn unstable_linear_grows_and_reports_blow_up() {
        let h = 0.1;
        let path = DriverPath::deterministic(TimeGrid::with_step(0.0, h, 50).unwrap());
        let traj = integrate(&Scheme::RungeKutta(ees()), &linear(-32.0), &[1.0], &path).unwrap();
        assert!(traj.states[50][0].abs() > 1e3);

        let long = DriverPath::deterministic(TimeGrid::with_step(0.0, h, 5000).unwrap());
        match integrate(&Scheme::RungeKutta(ees()), &linear(-32.0), &[1.0], &long) {
            Err(Error::BlowUp { step }) => assert!(step > 100 && step < 5000),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    fn nonlinear_sde() -> impl VectorField {
        ChannelField::new(2, 3, |m, t, y: &[f64], out: &mut [f64]| match m {
            0 => {
                out[0] = -y[1] + 0.1 * t;
                out[1] = y[0] - 0.5 * y[1].powi(3);
            }
            1 => {
                out[0] = 0.4 * y[1].cos();
                out[1] = 0.2;
            }
            _ => {
                out[0] = 0.1 * y[0];
                out[1] = 0.3 * (y[0] * y[1]).sin();
            }
        })
    }

    #[test]
    fn reversible_heun_is_exactly_invertible() {
        let field = nonlinear_sde();
        let state = SolverState::pair(vec![0.3, -0.2], vec![0.31, -0.19]);
        let dx = [0.05, 0.2, -0.1];
        let next = reversible_heun_step(&field, 0.4, &state, &dx).unwrap();
        let back = reversible_heun_reverse(&field, 0.45, &next, &dx).unwrap();
        for (a, b) in back.y.iter().chain(back.v.as_ref().unwrap()).zip(state.y.iter().chain(state.v.as_ref().unwrap())) {
            assert!((a - b).abs() < 1e-13);
        }
        // g = f = 0
        let zero = ChannelField::new(1, 2, |_, _, _: &[f64], out: &mut [f64]| out[0] = 0.0);
        let s = reversible_heun_step(&zero, 0.0, &SolverState::pair(vec![2.0], vec![0.5]), &[0.1, 0.3]).unwrap();
        assert_eq!(s.y, vec![2.0]);
        assert_eq!(s.v, Some(vec![3.5]));
    }

    #[test]
    fn reversible_heun_diverges_outside_imaginary_segment() {
        let path = DriverPath::deterministic(TimeGrid::with_step(0.0, 0.5, 200).unwrap());
        let traj = integrate(&Scheme::ReversibleHeun, &linear(-1.0), &[1.0], &path).unwrap();
        let norm = |s: &SolverState| s.y[0].abs().max(s.v.as_ref().unwrap()[0].abs());
        assert!(norm(&traj.terminal) > 1e10);
        let back = reconstruct_backward(&Scheme::ReversibleHeun, &linear(-1.0), &traj.terminal, &path);
        // the reverse map is exact in exact arithmetic; round-off is amplified here
        assert!(back.is_ok());
    }

    #[test]
    fn reversible_heun_reconstruction_is_exact() {
        let path = DriverPath::brownian(TimeGrid::new(0.0, 1.0, 100).unwrap(), 2, 3);
        let field = nonlinear_sde();
        let traj = integrate(&Scheme::ReversibleHeun, &field, &[0.5, 0.1], &path).unwrap();
        let back = reconstruct_backward(&Scheme::ReversibleHeun, &field, &traj.terminal, &path).unwrap();
        assert!((back[0][0] - 0.5).abs() < 1e-12 && (back[0][1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn alf_behaviour() {
        let zero = ode_field(1, |_, out| out[0] = 0.0);
        let s = alf_step(&zero, 0.0, &SolverState::pair(vec![1.5], vec![0.7]), 0.1).unwrap();
        assert_eq!(s.y, vec![1.5]);
        assert_eq!(s.v, Some(vec![-0.7]));

        let field = ode_field(1, |y, out| out[0] = (2.0 * y[0]).sin() + 0.3);
        let state = SolverState::pair(vec![0.2], vec![0.4]);
        let next = alf_step(&field, 0.0, &state, 0.3).unwrap();
        let back = alf_reverse(&field, 0.3, &next, 0.3).unwrap();
        assert!((back.y[0] - 0.2).abs() < 1e-14 && (back.v.unwrap()[0] - 0.4).abs() < 1e-14);

        // rotation y'' = -ω² y with ωh = 0.5: λh = ±0.5i
        let rot = ode_field(2, |y, out| {
            out[0] = 5.0 * y[1];
            out[1] = -5.0 * y[0];
        });
        let path = DriverPath::deterministic(TimeGrid::with_step(0.0, 0.1, 1000).unwrap());
        let traj = integrate(&Scheme::Alf, &rot, &[1.0, 0.0], &path).unwrap();
        assert!(traj.states.iter().all(|y| y[0].hypot(y[1]) < 3.0));

        let decay = DriverPath::deterministic(TimeGrid::with_step(0.0, 0.5, 300).unwrap());
        let traj = integrate(&Scheme::Alf, &linear(-1.0), &[1.0], &decay).unwrap();
        assert!(traj.terminal.y[0].abs() > 1e10);

        let sde = DriverPath::brownian(TimeGrid::new(0.0, 1.0, 4).unwrap(), 1, 0);
        assert!(integrate(&Scheme::Alf, &nonlinear_sde(), &[0.0, 0.0], &sde).is_err());
    }

    #[test]
    fn reversible_wrap_behaviour() {
        let zero = ode_field(1, |_, out| out[0] = 0.0);
        let s = reversible_wrap_step(&ees(), 0.3, &zero, 0.0, &SolverState::pair(vec![2.0], vec![1.0]), &[0.1]).unwrap();
        assert!((s.y[0] - (0.3 * 2.0 + 0.7)).abs() < 1e-15);
        assert_eq!(s.v, Some(vec![1.0]));

        let field = nonlinear_sde();
        let state = SolverState::pair(vec![0.3, -0.2], vec![0.1, 0.05]);
        let dx = [0.1, 0.3, -0.2];
        let next = reversible_wrap_step(&ees(), 0.7, &field, 0.0, &state, &dx).unwrap();
        let back = reversible_wrap_reverse(&ees(), 0.7, &field, 0.1, &next, &dx).unwrap();
        for (a, b) in back.y.iter().chain(back.v.as_ref().unwrap()).zip(state.y.iter().chain(state.v.as_ref().unwrap())) {
            assert!((a - b).abs() < 1e-13);
        }
        assert!(reversible_wrap_step(&ees(), 0.0, &field, 0.0, &state, &dx).is_err());
        assert!(reversible_wrap_step(&ees(), 1.5, &field, 0.0, &state, &dx).is_err());
    }

    #[test]
    fn reversible_wrap_euler_hand_recurrence() {
        // λ = 1, Ψ = Euler on dy = -y: y' = y - h v, v' = v + (-h) y'... with Ψ_{-h}(y') = h y'
        let h = 0.2;
        let euler = classical("euler").unwrap();
        let field = linear(-1.0);
        let path = DriverPath::deterministic(TimeGrid::with_step(0.0, h, 3).unwrap());
        let scheme = Scheme::Reversible {
            base: euler,
            coupling: 1.0,
        };
        let traj = integrate(&scheme, &field, &[1.0], &path).unwrap();
        let (mut y, mut v) = (1.0f64, 1.0f64);
        for n in 0..3 {
            y += -h * v;
            v -= h * y;
            assert!((traj.states[n + 1][0] - y).abs() < 1e-15);
        }
        assert!((traj.terminal.v.as_ref().unwrap()[0] - v).abs() < 1e-15);
    }

    #[test]
    fn trajectories_are_deterministic_and_export_csv() {
        let path = DriverPath::brownian(TimeGrid::new(0.0, 1.0, 4).unwrap(), 2, 8);
        let a = integrate(&Scheme::RungeKutta(ees()), &nonlinear_sde(), &[0.1, 0.2], &path).unwrap();
        let b = integrate(&Scheme::RungeKutta(ees()), &nonlinear_sde(), &[0.1, 0.2], &path).unwrap();
        assert_eq!(a, b);
        let mut out = Vec::new();
        a.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("step,t,y_0,y_1"));
        assert_eq!(lines.next(), Some("0,0,0.1,0.2"));
        assert_eq!(text.lines().count(), 6);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let err = rk_step(&ees(), &cos_sin(), 0.0, &[1.0], &[0.1, 0.2]);
        assert!(matches!(err, Err(Error::Dimension { .. })));
        let err = rk_step(&ees(), &cos_sin(), 0.0, &[1.0, 2.0], &[0.1, 0.2, 0.3]);
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }
}
