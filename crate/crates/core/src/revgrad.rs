//! Reversible backpropagation through explicit RK schemes and Reversible
//! Heun, with stored-trajectory baselines used as gradient oracles.
//!
//! The reversible pass receives only the terminal state and the driver
//! increments. Each backward step reconstructs `y_n` with the reverse map,
//! recomputes the stages from it and propagates cotangents through them, so
//! retained memory does not grow with the number of steps.

use crate::drivers::DriverPath;
use crate::solvers::{
    reversible_heun_reverse, reversible_heun_step, rk_step_into, RkWorkspace, Scheme, SolverState,
    VectorField,
};
use crate::tableau::ButcherTableau;
use crate::{Error, Result};

/// Default spacing of checksum entries recorded during the forward pass.
pub const DEFAULT_CHECKSUM_EVERY: usize = 64;

/// A vector field with trainable parameters and a vector-Jacobian product.
pub trait ParametricField: VectorField {
    fn num_params(&self) -> usize;

    fn params(&self) -> Vec<f64>;

    fn set_params(&mut self, params: &[f64]);

    /// With `F = Σ_m f_m(t, y) dx[m]`: writes `(∂F/∂y)ᵀ cot` into `grad_y` and
    /// adds `(∂F/∂θ)ᵀ cot` into `grad_theta`.
    fn vjp(&self, t: f64, y: &[f64], dx: &[f64], cot: &[f64], grad_y: &mut [f64], grad_theta: &mut [f64]);
}

/// Forward-pass fingerprint used to measure reconstruction drift: the
/// initial state and the component sum of every `every`-th state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checksum {
    pub every: usize,
    pub y0: Vec<f64>,
    pub sums: Vec<(usize, f64)>,
}

impl Checksum {
    fn new(every: usize, y0: &[f64]) -> Self {
        Self {
            every: every.max(1),
            y0: y0.to_vec(),
            sums: Vec::new(),
        }
    }

    fn record(&mut self, n: usize, y: &[f64]) {
        if n.is_multiple_of(self.every) {
            self.sums.push((n, y.iter().sum()));
        }
    }

    fn drift(&self, n: usize, y: &[f64]) -> Option<f64> {
        if n == 0 {
            return Some(
                y.iter()
                    .zip(&self.y0)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max),
            );
        }
        if !n.is_multiple_of(self.every) {
            return None;
        }
        let idx = self.sums.binary_search_by_key(&n, |e| e.0).ok()?;
        Some((self.sums[idx].1 - y.iter().sum::<f64>()).abs())
    }
}

/// Integrates without retaining the trajectory, recording a checksum.
pub fn forward_with_checksum(
    scheme: &Scheme,
    field: &dyn VectorField,
    y0: &[f64],
    path: &DriverPath,
    every: usize,
) -> Result<(SolverState, Checksum)> {
    let grid = path.grid();
    let mut checksum = Checksum::new(every, y0);
    let mut state = scheme.init(y0);
    checksum.record(0, &state.y);
    for n in 0..path.steps() {
        state = scheme
            .step(field, grid.time(n), &state, path.increment(n))
            .map_err(|e| with_step(e, n))?;
        checksum.record(n + 1, &state.y);
    }
    Ok((state, checksum))
}

fn with_step(err: Error, step: usize) -> Error {
    match err {
        Error::BlowUp { .. } => Error::BlowUp { step },
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub d_theta: Vec<f64>,
    pub d_y0: Vec<f64>,
    /// Initial state as seen by the backward pass (reconstructed or stored).
    pub y0: Vec<f64>,
    /// Largest deviation from the checksum, when one was supplied.
    pub drift: Option<f64>,
}

impl Gradients {
    /// Fails when the reconstruction drift exceeds `tolerance`.
    pub fn check_drift(&self, tolerance: f64) -> Result<()> {
        match self.drift {
            Some(drift) if drift.is_nan() || drift > tolerance => Err(Error::Divergence { drift, tolerance }),
            _ => Ok(()),
        }
    }
}

/// One backward step of the reversible adjoint for a known `y_n`: recomputes the stages
/// and returns `∂L/∂y_n` (without the loss term at step `n`), adding the
/// parameter gradient into `grad_theta`.
#[allow(clippy::too_many_arguments)]
pub fn backprop_rk_step<F: ParametricField>(
    tableau: &ButcherTableau,
    field: &F,
    t: f64,
    y: &[f64],
    dx: &[f64],
    cot_next: &[f64],
    grad_theta: &mut [f64],
    ws: &mut RkWorkspace,
) -> Result<Vec<f64>> {
    let q = y.len();
    let s = tableau.stages();
    let mut scratch = vec![0.0; q];
    rk_step_into(tableau, field as &dyn VectorField, t, y, dx, ws, &mut scratch)?;
    let mut cot_k = vec![0.0; s * q];
    let mut cot_z = vec![0.0; q];
    let mut grad = vec![0.0; q];
    for i in (0..s).rev() {
        let b = tableau.b()[i];
        for (z, c) in cot_z.iter_mut().zip(cot_next) {
            *z = b * c;
        }
        for j in i + 1..s {
            let a = tableau.a(j, i);
            if a != 0.0 {
                for (z, c) in cot_z.iter_mut().zip(&cot_k[j * q..(j + 1) * q]) {
                    *z += a * c;
                }
            }
        }
        field.vjp(t + tableau.c()[i] * dx[0], ws.stage(i, q), dx, &cot_z, &mut grad, grad_theta);
        cot_k[i * q..(i + 1) * q].copy_from_slice(&grad);
    }
    let mut out = cot_next.to_vec();
    for i in 0..s {
        for (o, c) in out.iter_mut().zip(&cot_k[i * q..(i + 1) * q]) {
            *o += c;
        }
    }
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::BlowUp { step: 0 })
    }
}

fn add_into(acc: &mut [f64], extra: Option<Vec<f64>>) -> Result<()> {
    if let Some(extra) = extra {
        if extra.len() != acc.len() {
            return Err(Error::Dimension {
                expected: acc.len(),
                got: extra.len(),
            });
        }
        for (a, e) in acc.iter_mut().zip(extra) {
            *a += e;
        }
    }
    Ok(())
}

/// Reversible adjoint over the whole path. `loss_cot(n, y_n)` returns the explicit
/// loss cotangent at step `n` (given the reconstructed state), or `None`.
pub fn reversible_backprop<F, C>(
    tableau: &ButcherTableau,
    field: &F,
    y_terminal: &[f64],
    path: &DriverPath,
    mut loss_cot: C,
    checksum: Option<&Checksum>,
) -> Result<Gradients>
where
    F: ParametricField,
    C: FnMut(usize, &[f64]) -> Option<Vec<f64>>,
{
    let grid = path.grid();
    let q = y_terminal.len();
    let n_steps = path.steps();
    let mut ws = RkWorkspace::new(tableau.stages(), q);
    let mut grad_theta = vec![0.0; field.num_params()];
    let mut y = y_terminal.to_vec();
    let mut y_prev = vec![0.0; q];
    let mut neg = vec![0.0; path.channels()];
    let mut cot = vec![0.0; q];
    add_into(&mut cot, loss_cot(n_steps, &y))?;
    let mut drift: Option<f64> = None;
    if let Some(c) = checksum {
        drift = c.drift(n_steps, &y);
    }
    for n in (0..n_steps).rev() {
        let dx = path.increment(n);
        for (d, x) in neg.iter_mut().zip(dx) {
            *d = -x;
        }
        rk_step_into(tableau, field as &dyn VectorField, grid.time(n + 1), &y, &neg, &mut ws, &mut y_prev)
            .map_err(|e| with_step(e, n))?;
        std::mem::swap(&mut y, &mut y_prev);
        cot = backprop_rk_step(tableau, field, grid.time(n), &y, dx, &cot, &mut grad_theta, &mut ws)
            .map_err(|e| with_step(e, n))?;
        add_into(&mut cot, loss_cot(n, &y))?;
        if let Some(d) = checksum.and_then(|c| c.drift(n, &y)) {
            drift = Some(drift.map_or(d, |old: f64| old.max(d)));
        }
    }
    Ok(Gradients {
        d_theta: grad_theta,
        d_y0: cot,
        y0: y,
        drift,
    })
}

/// Discretise-then-optimise baseline: stores `y_0..y_N` and differentiates
/// the unrolled solver exactly.
pub fn stored_backprop<F, C>(
    tableau: &ButcherTableau,
    field: &F,
    y0: &[f64],
    path: &DriverPath,
    mut loss_cot: C,
) -> Result<Gradients>
where
    F: ParametricField,
    C: FnMut(usize, &[f64]) -> Option<Vec<f64>>,
{
    let grid = path.grid();
    let q = y0.len();
    let n_steps = path.steps();
    let mut ws = RkWorkspace::new(tableau.stages(), q);
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(y0.to_vec());
    for n in 0..n_steps {
        let mut next = vec![0.0; q];
        rk_step_into(tableau, field as &dyn VectorField, grid.time(n), &states[n], path.increment(n), &mut ws, &mut next)
            .map_err(|e| with_step(e, n))?;
        states.push(next);
    }
    let mut grad_theta = vec![0.0; field.num_params()];
    let mut cot = vec![0.0; q];
    add_into(&mut cot, loss_cot(n_steps, &states[n_steps]))?;
    for n in (0..n_steps).rev() {
        cot = backprop_rk_step(tableau, field, grid.time(n), &states[n], path.increment(n), &cot, &mut grad_theta, &mut ws)
            .map_err(|e| with_step(e, n))?;
        add_into(&mut cot, loss_cot(n, &states[n]))?;
    }
    Ok(Gradients {
        d_theta: grad_theta,
        d_y0: cot,
        y0: y0.to_vec(),
        drift: None,
    })
}

/// Adjoint of one Reversible Heun step at the known pre-step state.
/// Returns `(a_y, a_v)` for the state at step `n`.
fn backprop_heun_step<F: ParametricField>(
    field: &F,
    t: f64,
    state: &SolverState,
    dx: &[f64],
    a_y_next: &[f64],
    a_v_next: &[f64],
    grad_theta: &mut [f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let q = state.y.len();
    let v = state
        .v
        .as_deref()
        .ok_or_else(|| Error::Config("Reversible Heun needs an auxiliary state".into()))?;
    let next = reversible_heun_step(field as &dyn VectorField, t, state, dx)?;
    let v_next = next.v.as_deref().expect("two-state step");
    let mut jac = vec![0.0; q];

    let half: Vec<f64> = a_y_next.iter().map(|a| 0.5 * a).collect();
    field.vjp(t + dx[0], v_next, dx, &half, &mut jac, grad_theta);
    let a_vbar: Vec<f64> = a_v_next.iter().zip(&jac).map(|(a, j)| a + j).collect();

    let a_y: Vec<f64> = (0..q).map(|i| a_y_next[i] + 2.0 * a_vbar[i]).collect();
    let cot_f0: Vec<f64> = (0..q).map(|i| a_vbar[i] + half[i]).collect();
    field.vjp(t, v, dx, &cot_f0, &mut jac, grad_theta);
    let a_v: Vec<f64> = (0..q).map(|i| -a_vbar[i] + jac[i]).collect();
    if a_y.iter().chain(&a_v).all(|x| x.is_finite()) {
        Ok((a_y, a_v))
    } else {
        Err(Error::BlowUp { step: 0 })
    }
}

fn heun_gradients(a_y: Vec<f64>, a_v: Vec<f64>, grad_theta: Vec<f64>, y0: Vec<f64>, drift: Option<f64>) -> Gradients {
    // v_0 = y_0, so both adjoints flow into the initial condition
    Gradients {
        d_theta: grad_theta,
        d_y0: a_y.iter().zip(&a_v).map(|(a, b)| a + b).collect(),
        y0,
        drift,
    }
}

/// Reversible Heun backward pass using its exact algebraic inverse.
pub fn reversible_heun_backprop<F, C>(
    field: &F,
    terminal: &SolverState,
    path: &DriverPath,
    mut loss_cot: C,
    checksum: Option<&Checksum>,
) -> Result<Gradients>
where
    F: ParametricField,
    C: FnMut(usize, &[f64]) -> Option<Vec<f64>>,
{
    let grid = path.grid();
    let q = terminal.y.len();
    let n_steps = path.steps();
    let mut grad_theta = vec![0.0; field.num_params()];
    let mut state = terminal.clone();
    let mut a_y = vec![0.0; q];
    let mut a_v = vec![0.0; q];
    add_into(&mut a_y, loss_cot(n_steps, &state.y))?;
    let mut drift = checksum.and_then(|c| c.drift(n_steps, &state.y));
    for n in (0..n_steps).rev() {
        let dx = path.increment(n);
        state = reversible_heun_reverse(field as &dyn VectorField, grid.time(n + 1), &state, dx)
            .map_err(|e| with_step(e, n))?;
        (a_y, a_v) = backprop_heun_step(field, grid.time(n), &state, dx, &a_y, &a_v, &mut grad_theta)
            .map_err(|e| with_step(e, n))?;
        add_into(&mut a_y, loss_cot(n, &state.y))?;
        if let Some(d) = checksum.and_then(|c| c.drift(n, &state.y)) {
            drift = Some(drift.map_or(d, |old: f64| old.max(d)));
        }
    }
    Ok(heun_gradients(a_y, a_v, grad_theta, state.y, drift))
}

/// Stored-trajectory oracle for Reversible Heun.
pub fn stored_heun_backprop<F, C>(field: &F, y0: &[f64], path: &DriverPath, mut loss_cot: C) -> Result<Gradients>
where
    F: ParametricField,
    C: FnMut(usize, &[f64]) -> Option<Vec<f64>>,
{
    let grid = path.grid();
    let q = y0.len();
    let n_steps = path.steps();
    let mut states = vec![Scheme::ReversibleHeun.init(y0)];
    for n in 0..n_steps {
        let next = reversible_heun_step(field as &dyn VectorField, grid.time(n), &states[n], path.increment(n))
            .map_err(|e| with_step(e, n))?;
        states.push(next);
    }
    let mut grad_theta = vec![0.0; field.num_params()];
    let mut a_y = vec![0.0; q];
    let mut a_v = vec![0.0; q];
    add_into(&mut a_y, loss_cot(n_steps, &states[n_steps].y))?;
    for n in (0..n_steps).rev() {
        (a_y, a_v) = backprop_heun_step(field, grid.time(n), &states[n], path.increment(n), &a_y, &a_v, &mut grad_theta)
            .map_err(|e| with_step(e, n))?;
        add_into(&mut a_y, loss_cot(n, &states[n].y))?;
    }
    Ok(heun_gradients(a_y, a_v, grad_theta, y0.to_vec(), None))
}

/// Backward pass for any supported scheme from its terminal state.
pub fn scheme_backprop<F, C>(
    scheme: &Scheme,
    field: &F,
    terminal: &SolverState,
    path: &DriverPath,
    loss_cot: C,
    checksum: Option<&Checksum>,
) -> Result<Gradients>
where
    F: ParametricField,
    C: FnMut(usize, &[f64]) -> Option<Vec<f64>>,
{
    match scheme {
        Scheme::RungeKutta(t) => reversible_backprop(t, field, &terminal.y, path, loss_cot, checksum),
        Scheme::ReversibleHeun => reversible_heun_backprop(field, terminal, path, loss_cot, checksum),
        other => Err(Error::Config(format!(
            "no reversible backward pass for scheme {}",
            other.name()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drivers::TimeGrid;
    use crate::neuralnet::{NeuralSde, NoiseKind};
    use crate::solvers::integrate;
    use crate::tableau::{classical, ees25};

    /// `dy = θ_0 y dt + θ_1 sin(y) dW`.
    #[derive(Clone)]
    struct Toy {
        theta: Vec<f64>,
        channels: usize,
    }

    impl VectorField for Toy {
        fn dim(&self) -> usize {
            1
        }
        fn channels(&self) -> usize {
            self.channels
        }
        fn apply(&self, _: f64, y: &[f64], dx: &[f64], out: &mut [f64]) {
            out[0] = self.theta[0] * y[0] * dx[0];
            if self.channels > 1 {
                out[0] += self.theta[1] * y[0].sin() * dx[1];
            }
        }
    }

    impl ParametricField for Toy {
        fn num_params(&self) -> usize {
            self.theta.len()
        }
        fn params(&self) -> Vec<f64> {
            self.theta.clone()
        }
        fn set_params(&mut self, p: &[f64]) {
            self.theta.copy_from_slice(p);
        }
        fn vjp(&self, _: f64, y: &[f64], dx: &[f64], cot: &[f64], gy: &mut [f64], gt: &mut [f64]) {
            gy[0] = self.theta[0] * dx[0] * cot[0];
            gt[0] += y[0] * dx[0] * cot[0];
            if self.channels > 1 {
                gy[0] += self.theta[1] * y[0].cos() * dx[1] * cot[0];
                gt[1] += y[0].sin() * dx[1] * cot[0];
            }
        }
    }

    fn ees() -> ButcherTableau {
        ees25(0.1).unwrap()
    }

    fn terminal_only(n_final: usize) -> impl FnMut(usize, &[f64]) -> Option<Vec<f64>> {
        move |n, _| (n == n_final).then(|| vec![1.0])
    }

    #[test]
    fn linear_cotangent_scales_by_stability_polynomial() {
        let field = Toy { theta: vec![1.0], channels: 1 };
        let path = DriverPath::deterministic(TimeGrid::with_step(0.0, 0.1, 1).unwrap());
        let y1 = integrate(&Scheme::RungeKutta(ees()), &field, &[1.0], &path).unwrap();
        let g = stored_backprop(&ees(), &field, &[1.0], &path, terminal_only(1)).unwrap();
        assert!((g.d_y0[0] - 1.105125).abs() < 1e-15);
        let r = reversible_backprop(&ees(), &field, &y1.terminal.y, &path, terminal_only(1), None).unwrap();
        assert!((r.d_y0[0] - 1.105125).abs() < 1e-12);

        let zero = reversible_backprop(&ees(), &field, &y1.terminal.y, &path, |_, _| None, None).unwrap();
        assert_eq!(zero.d_y0, vec![0.0]);
        assert_eq!(zero.d_theta, vec![0.0]);
    }

    #[test]
    fn linear_gradient_is_product_of_factors() {
        let field = Toy { theta: vec![-0.7], channels: 1 };
        let path = DriverPath::deterministic(TimeGrid::with_step(0.0, 0.05, 20).unwrap());
        let g = stored_backprop(&ees(), &field, &[2.0], &path, terminal_only(20)).unwrap();
        let r = ees().stability_polynomial();
        let factor = crate::tableau::eval_poly(&r, -0.7 * 0.05);
        assert!((g.d_y0[0] - factor.powi(20)).abs() < 1e-14);

        let empty = DriverPath::deterministic(TimeGrid::point(0.0));
        let g0 = stored_backprop(&ees(), &field, &[2.0], &empty, |_, _| Some(vec![3.5])).unwrap();
        assert_eq!(g0.d_y0, vec![3.5]);
    }

    fn fd_theta(field: &Toy, y0: f64, path: &DriverPath, tableau: &ButcherTableau, k: usize) -> f64 {
        let eps = 1e-5;
        let eval = |s: f64| {
            let mut f = field.clone();
            f.theta[k] += s;
            let traj = integrate(&Scheme::RungeKutta(tableau.clone()), &f, &[y0], path).unwrap();
            // L = Σ_n y_n² / 2
            traj.states.iter().map(|y| 0.5 * y[0] * y[0]).sum::<f64>()
        };
        (eval(eps) - eval(-eps)) / (2.0 * eps)
    }

    #[test]
    fn stored_backprop_matches_finite_differences() {
        let field = Toy { theta: vec![-0.8, 0.6], channels: 2 };
        let path = DriverPath::brownian(TimeGrid::new(0.0, 0.3, 3).unwrap(), 1, 4);
        let g = stored_backprop(&ees(), &field, &[0.9], &path, |_, y| Some(vec![y[0]])).unwrap();
        for k in 0..2 {
            let fd = fd_theta(&field, 0.9, &path, &ees(), k);
            assert!((g.d_theta[k] - fd).abs() <= 1e-5 * fd.abs(), "{k}: {} vs {fd}", g.d_theta[k]);
        }
    }

    #[test]
    fn reversible_matches_stored_on_small_mlp() {
        let sde = NeuralSde::new(2, 2, NoiseKind::Diagonal, 8, 2, 21).unwrap();
        let path = DriverPath::brownian(TimeGrid::with_step(0.0, 0.01, 5).unwrap(), 2, 2);
        let y0 = [0.5, -0.3];
        let traj = integrate(&Scheme::RungeKutta(ees()), &sde, &y0, &path).unwrap();
        let loss = |_: usize, y: &[f64]| Some(vec![y[0], 2.0 * y[1]]);
        let stored = stored_backprop(&ees(), &sde, &y0, &path, loss).unwrap();
        let rev = reversible_backprop(&ees(), &sde, &traj.terminal.y, &path, loss, None).unwrap();
        let norm = stored.d_theta.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff = stored.d_theta.iter().zip(&rev.d_theta).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(diff <= 1e-6 * norm, "{diff} vs {norm}");
    }

    #[test]
    fn zero_field_passes_cotangent_through() {
        let field = Toy { theta: vec![0.0, 0.0], channels: 2 };
        let path = DriverPath::brownian(TimeGrid::new(0.0, 1.0, 10).unwrap(), 1, 1);
        let g = reversible_backprop(&ees(), &field, &[1.3], &path, |n, _| (n == 10).then(|| vec![-2.5]), None).unwrap();
        assert_eq!(g.d_y0, vec![-2.5]);
        assert_eq!(g.y0, vec![1.3]);
    }

    #[test]
    fn heun_reversible_matches_stored() {
        let sde = NeuralSde::new(2, 2, NoiseKind::Diagonal, 8, 2, 5).unwrap();
        let path = DriverPath::brownian(TimeGrid::new(0.0, 1.0, 40).unwrap(), 2, 9);
        let y0 = [0.2, 0.4];
        let traj = integrate(&Scheme::ReversibleHeun, &sde, &y0, &path).unwrap();
        let loss = |_: usize, y: &[f64]| Some(vec![y[0] * y[1], 0.5 * y[0] * y[0]]);
        let stored = stored_heun_backprop(&sde, &y0, &path, loss).unwrap();
        let rev = reversible_heun_backprop(&sde, &traj.terminal, &path, loss, None).unwrap();
        for (a, b) in stored.d_theta.iter().chain(&stored.d_y0).zip(rev.d_theta.iter().chain(&rev.d_y0)) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn heun_stored_matches_finite_differences() {
        let field = Toy { theta: vec![-0.5, 0.4], channels: 2 };
        let path = DriverPath::brownian(TimeGrid::new(0.0, 0.5, 5).unwrap(), 1, 3);
        let g = stored_heun_backprop(&field, &[0.7], &path, |n, y| (n == 5).then(|| vec![y[0]])).unwrap();
        let eval = |th: Vec<f64>, y0: f64| {
            let f = Toy { theta: th, channels: 2 };
            let y = integrate(&Scheme::ReversibleHeun, &f, &[y0], &path).unwrap().terminal.y[0];
            0.5 * y * y
        };
        let eps = 1e-6;
        let fd0 = (eval(vec![-0.5 + eps, 0.4], 0.7) - eval(vec![-0.5 - eps, 0.4], 0.7)) / (2.0 * eps);
        let fdy = (eval(vec![-0.5, 0.4], 0.7 + eps) - eval(vec![-0.5, 0.4], 0.7 - eps)) / (2.0 * eps);
        assert!((g.d_theta[0] - fd0).abs() < 1e-7 * fd0.abs().max(1.0));
        assert!((g.d_y0[0] - fdy).abs() < 1e-7 * fdy.abs().max(1.0));
    }

    #[test]
    fn checksum_reports_drift() {
        let field = Toy { theta: vec![-1.0, 0.5], channels: 2 };
        let path = DriverPath::brownian(TimeGrid::new(0.0, 1.0, 200).unwrap(), 1, 7);
        let scheme = Scheme::RungeKutta(ees());
        let (terminal, checksum) = forward_with_checksum(&scheme, &field, &[1.0], &path, 64).unwrap();
        assert_eq!(checksum.sums.len(), 4);
        let g = scheme_backprop(&scheme, &field, &terminal, &path, terminal_only(200), Some(&checksum)).unwrap();
        let drift = g.drift.unwrap();
        assert!((0.0..1e-6).contains(&drift));
        assert!(g.check_drift(1e-6).is_ok());
        assert!(matches!(g.check_drift(drift / 2.0), Err(Error::Divergence { .. })) || drift == 0.0);
        let euler = Scheme::RungeKutta(classical("euler").unwrap());
        let (t2, c2) = forward_with_checksum(&euler, &field, &[1.0], &path, 64).unwrap();
        let g2 = scheme_backprop(&euler, &field, &t2, &path, terminal_only(200), Some(&c2)).unwrap();
        assert!(g2.drift.unwrap() > drift);
        assert!(scheme_backprop(&Scheme::Alf, &field, &t2, &path, terminal_only(200), None).is_err());
    }
}
