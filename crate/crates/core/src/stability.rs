//! Linear and mean-square stability of one-step schemes.
//!
//! On `dy = λ y dt + μ y dW` one step of an explicit RK scheme multiplies the
//! state by `R(ρ)` with `ρ = λh + μ ΔW ~ N(λh, μ²h)`. Two-state schemes act on
//! `(y, v)` through a fixed 2x2 matrix on the deterministic test `dy = λ y dt`.

use std::io::{Read, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::par::Execution;
use crate::solvers::Scheme;
use crate::tableau::{eval_poly, ButcherTableau};
use crate::{Error, Result};

pub const GRID_MAGIC: [u8; 8] = *b"EESGRID\0";
pub const GRID_FORMAT_VERSION: u64 = 1;

/// Tolerance on `|eigenvalue| - 1` when classifying two-state recurrences.
pub const UNIT_CIRCLE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeterministicStability {
    pub modulus: f64,
    pub stable: bool,
}

/// `|R(ρ)|` and whether it is below one.
pub fn deterministic_stable(tableau: &ButcherTableau, rho: Complex64) -> DeterministicStability {
    let modulus = eval_poly(&tableau.stability_polynomial(), rho).norm();
    DeterministicStability {
        modulus,
        stable: modulus < 1.0,
    }
}

/// Left end of the stability interval on the negative real axis, found by a
/// scan in steps of `0.01` followed by bisection. `None` if no crossing lies
/// above `-limit`.
pub fn real_axis_boundary(tableau: &ButcherTableau, limit: f64) -> Option<f64> {
    let r = tableau.stability_polynomial();
    let g = |x: f64| eval_poly(&r, x).abs() - 1.0;
    let step = 0.01;
    let mut hi = -step;
    if g(hi) >= 0.0 {
        return None;
    }
    while hi > -limit {
        let lo = hi - step;
        if g(lo) >= 0.0 {
            let (mut a, mut b) = (lo, hi);
            for _ in 0..200 {
                let mid = 0.5 * (a + b);
                if g(mid) >= 0.0 {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            return Some(0.5 * (a + b));
        }
        hi = lo;
    }
    None
}

/// Coefficients of `u ↦ R(z + u)` in ascending powers of `u`.
fn shifted_coefficients(r: &[f64], z: Complex64) -> Vec<Complex64> {
    let deg = r.len();
    let mut binom = vec![vec![0.0f64; deg]; deg];
    for k in 0..deg {
        binom[k][0] = 1.0;
        for j in 1..=k {
            binom[k][j] = binom[k - 1][j - 1] + if j < k { binom[k - 1][j] } else { 0.0 };
        }
    }
    (0..deg)
        .map(|j| {
            (j..deg)
                .map(|k| r[k] * binom[k][j] * z.powu((k - j) as u32))
                .sum()
        })
        .collect()
}

/// `E[u^k]` for `u ~ N(0, var)`.
fn gaussian_moment(k: usize, var: f64) -> f64 {
    if k % 2 == 1 {
        return 0.0;
    }
    let double_factorial: f64 = (1..k).step_by(2).map(|i| i as f64).product();
    var.powi((k / 2) as i32) * double_factorial
}

fn check_variance(var: f64) -> Result<()> {
    if var >= 0.0 && var.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain {
            name: "mu2h",
            value: var,
            reason: "variance must be finite and non-negative",
        })
    }
}

/// `E|R(ρ)|²` with `ρ ~ λh + N(0, μ²h)`, in closed form via Gaussian moments.
pub fn mean_square_expectation(tableau: &ButcherTableau, lambda_h: Complex64, mu2h: f64) -> Result<f64> {
    check_variance(mu2h)?;
    let q = shifted_coefficients(&tableau.stability_polynomial(), lambda_h);
    let mut total = 0.0;
    for (j, qj) in q.iter().enumerate() {
        for (k, qk) in q.iter().enumerate() {
            let m = gaussian_moment(j + k, mu2h);
            if m != 0.0 {
                total += (qj * qk.conj()).re * m;
            }
        }
    }
    Ok(total)
}

/// `E[R(ρ)]` for the same distribution.
pub fn mean_amplification(tableau: &ButcherTableau, lambda_h: Complex64, mu2h: f64) -> Result<Complex64> {
    check_variance(mu2h)?;
    let q = shifted_coefficients(&tableau.stability_polynomial(), lambda_h);
    Ok(q
        .iter()
        .enumerate()
        .map(|(j, qj)| qj * gaussian_moment(j, mu2h))
        .sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub resolution: usize,
}

impl Axis {
    pub fn new(min: f64, max: f64, resolution: usize) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && min < max) || resolution < 2 {
            return Err(Error::Grid(format!(
                "axis needs finite min < max and at least 2 points, got [{min}, {max}] x {resolution}"
            )));
        }
        Ok(Self { min, max, resolution })
    }

    pub fn value(&self, i: usize) -> f64 {
        self.min + (self.max - self.min) * i as f64 / (self.resolution - 1) as f64
    }
}

/// Which two-parameter slice of `(Re λh, Im λh, μ√h)` a raster covers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CrossSection {
    /// x = Re(λh), y = μ√h at fixed Im(λh).
    FixedImag { imag: f64 },
    /// x = Re(λh), y = Im(λh) at fixed μ√h.
    FixedNoise { mu_sqrt_h: f64 },
}

impl CrossSection {
    fn point(&self, x: f64, y: f64) -> (Complex64, f64) {
        match *self {
            CrossSection::FixedImag { imag } => (Complex64::new(x, imag), y * y),
            CrossSection::FixedNoise { mu_sqrt_h } => (Complex64::new(x, y), mu_sqrt_h * mu_sqrt_h),
        }
    }

    pub fn axis_names(&self) -> (&'static str, &'static str) {
        match self {
            CrossSection::FixedImag { .. } => ("re_lambda_h", "mu_sqrt_h"),
            CrossSection::FixedNoise { .. } => ("re_lambda_h", "im_lambda_h"),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            CrossSection::FixedImag { imag } => format!("Im(lambda h) = {imag}"),
            CrossSection::FixedNoise { mu_sqrt_h } => format!("mu sqrt(h) = {mu_sqrt_h}"),
        }
    }
}

/// Grid of `E|R|²` values; a cell is mean-square stable when its value is
/// below one. Values are stored row by row, `y` outer.
#[derive(Clone, Debug, PartialEq)]
pub struct StabilityRaster {
    pub tableau: String,
    pub section: CrossSection,
    pub x: Axis,
    pub y: Axis,
    pub values: Vec<f64>,
}

impl StabilityRaster {
    pub fn value(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.x.resolution + ix]
    }

    pub fn stable(&self, ix: usize, iy: usize) -> bool {
        self.value(ix, iy) < 1.0
    }

    pub fn stable_fraction(&self) -> f64 {
        self.values.iter().filter(|v| **v < 1.0).count() as f64 / self.values.len() as f64
    }

    /// CSV rows `x,y,value,stable` with the axis names in the header.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let (xn, yn) = self.section.axis_names();
        writeln!(w, "{xn},{yn},mean_square,stable")?;
        for iy in 0..self.y.resolution {
            for ix in 0..self.x.resolution {
                let v = self.value(ix, iy);
                writeln!(w, "{},{},{},{}", self.x.value(ix), self.y.value(iy), v, u8::from(v < 1.0))?;
            }
        }
        Ok(())
    }

    /// Binary grid: magic, version, nx, ny, then x/y ranges and the section
    /// parameter as f64, then the values; all little-endian.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&GRID_MAGIC)?;
        for v in [GRID_FORMAT_VERSION, self.x.resolution as u64, self.y.resolution as u64] {
            w.write_all(&v.to_le_bytes())?;
        }
        let (tag, param) = match self.section {
            CrossSection::FixedImag { imag } => (0u64, imag),
            CrossSection::FixedNoise { mu_sqrt_h } => (1u64, mu_sqrt_h),
        };
        w.write_all(&tag.to_le_bytes())?;
        for v in [self.x.min, self.x.max, self.y.min, self.y.max, param] {
            w.write_all(&v.to_le_bytes())?;
        }
        let name = self.tableau.as_bytes();
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name)?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        if word != GRID_MAGIC {
            return Err(Error::Parse("not a stability grid file".into()));
        }
        let mut next_u64 = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut word)?;
            Ok(u64::from_le_bytes(word))
        };
        let version = next_u64(&mut r)?;
        if version != GRID_FORMAT_VERSION {
            return Err(Error::Parse(format!("unsupported grid version {version}")));
        }
        let nx = next_u64(&mut r)? as usize;
        let ny = next_u64(&mut r)? as usize;
        let tag = next_u64(&mut r)?;
        let mut f = [0.0; 5];
        for v in f.iter_mut() {
            *v = f64::from_bits(next_u64(&mut r)?);
        }
        let name_len = next_u64(&mut r)? as usize;
        if name_len > 4096 {
            return Err(Error::Parse("tableau name too long".into()));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let tableau = String::from_utf8(name).map_err(|e| Error::Parse(e.to_string()))?;
        let section = match tag {
            0 => CrossSection::FixedImag { imag: f[4] },
            1 => CrossSection::FixedNoise { mu_sqrt_h: f[4] },
            other => return Err(Error::Parse(format!("unknown cross-section tag {other}"))),
        };
        let x = Axis::new(f[0], f[1], nx)?;
        let y = Axis::new(f[2], f[3], ny)?;
        let mut values = vec![0.0; nx * ny];
        let mut buf = [0u8; 8];
        for v in values.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        Ok(Self {
            tableau,
            section,
            x,
            y,
            values,
        })
    }
}

/// Evaluates `E|R|²` on every cell of the cross-section.
pub fn ms_raster(
    tableau: &ButcherTableau,
    section: CrossSection,
    x: Axis,
    y: Axis,
    exec: Execution,
) -> Result<StabilityRaster> {
    let r = tableau.stability_polynomial();
    let nx = x.resolution;
    let rows = exec.try_map(y.resolution, |iy| -> Result<Vec<f64>> {
        let yv = y.value(iy);
        (0..nx)
            .map(|ix| {
                let (lh, var) = section.point(x.value(ix), yv);
                let q = shifted_coefficients(&r, lh);
                let mut total = 0.0;
                for (j, qj) in q.iter().enumerate() {
                    for (k, qk) in q.iter().enumerate() {
                        let m = gaussian_moment(j + k, var);
                        if m != 0.0 {
                            total += (qj * qk.conj()).re * m;
                        }
                    }
                }
                if total.is_finite() {
                    Ok(total)
                } else {
                    Err(Error::Grid(format!("non-finite E|R|^2 at ({}, {yv})", x.value(ix))))
                }
            })
            .collect()
    })?;
    Ok(StabilityRaster {
        tableau: tableau.name().to_string(),
        section,
        x,
        y,
        values: rows.into_iter().flatten().collect(),
    })
}

/// Update matrix of a scheme on `dy = λ y dt` with `z = λh`: 1x1 for RK
/// schemes, 2x2 on `(y, v)` for two-state schemes (ALF uses `(y, h v)`).
pub fn update_matrix(scheme: &Scheme, z: Complex64) -> Vec<Vec<Complex64>> {
    let one = Complex64::new(1.0, 0.0);
    match scheme {
        Scheme::RungeKutta(t) => vec![vec![eval_poly(&t.stability_polynomial(), z)]],
        Scheme::ReversibleHeun => vec![vec![one + z, z * z * 0.5], vec![2.0 * one, z - 1.0]],
        Scheme::Alf => vec![vec![one + z, z * 0.5], vec![2.0 * z, z - 1.0]],
        Scheme::Reversible { base, coupling } => {
            let r = base.stability_polynomial();
            let c = *coupling;
            let fwd = eval_poly(&r, z);
            let back = eval_poly(&r, -z) - 1.0;
            vec![
                vec![c * one, fwd - c],
                vec![-back * c, one - back * (fwd - c)],
            ]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoStateReport {
    pub spectral_radius: f64,
    /// A repeated eigenvalue on the unit circle without a full eigenbasis.
    pub defective: bool,
    pub bounded: bool,
    /// Largest state modulus seen when iterating from `y_0 = v_0 = 1`.
    pub iterated_max: f64,
}

fn eigenvalues(m: &[Vec<Complex64>]) -> Vec<Complex64> {
    if m.len() == 1 {
        return vec![m[0][0]];
    }
    let tr = m[0][0] + m[1][1];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let disc = (tr * tr - 4.0 * det).sqrt();
    vec![(tr + disc) * 0.5, (tr - disc) * 0.5]
}

/// Boundedness of the linear two-state recurrence at `λh = z`: spectral
/// radius below one, or on the unit circle with a full eigenbasis.
pub fn two_state_bounded(scheme: &Scheme, z: Complex64, steps: usize) -> TwoStateReport {
    let m = update_matrix(scheme, z);
    let eig = eigenvalues(&m);
    let spectral_radius = eig.iter().map(|e| e.norm()).fold(0.0, f64::max);
    let defective = m.len() == 2 && {
        let repeated = (eig[0] - eig[1]).norm() <= 1e-7 * (1.0 + eig[0].norm());
        let on_circle = (spectral_radius - 1.0).abs() <= 1e-7;
        let scale = m.iter().flatten().map(|v| v.norm()).fold(1.0, f64::max);
        let lambda = (eig[0] + eig[1]) * 0.5;
        let off = [
            m[0][0] - lambda,
            m[0][1],
            m[1][0],
            m[1][1] - lambda,
        ]
        .iter()
        .map(|v| v.norm())
        .fold(0.0, f64::max);
        repeated && on_circle && off > 1e-9 * scale
    };
    let bounded = spectral_radius <= 1.0 + UNIT_CIRCLE_TOL && !defective;

    let mut state = vec![Complex64::new(1.0, 0.0); m.len()];
    let mut iterated_max: f64 = 1.0;
    for _ in 0..steps {
        state = m
            .iter()
            .map(|row| row.iter().zip(&state).map(|(a, s)| a * s).sum())
            .collect();
        let norm = state.iter().map(|s| s.norm()).fold(0.0, f64::max);
        iterated_max = iterated_max.max(norm);
        if !norm.is_finite() {
            break;
        }
    }
    TwoStateReport {
        spectral_radius,
        defective,
        bounded,
        iterated_max,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drivers::{channel_rng, DriverPath, TimeGrid};
    use crate::solvers::{ode_field, integrate};
    use crate::tableau::{classical, ees25};
    use rand_distr::{Distribution, StandardNormal};

    fn ees() -> ButcherTableau {
        ees25(0.1).unwrap()
    }

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn deterministic_examples() {
        let at = |x| deterministic_stable(&ees(), c(x, 0.0));
        assert!(at(-2.0).modulus.abs() < 1e-15 && at(-2.0).stable);
        assert!(!at(0.1).stable);
        assert!(!at(-3.2).stable);
        let b = real_axis_boundary(&ees(), 20.0).unwrap();
        assert!((b + 3.087).abs() < 1e-3, "{b}");
        // real root of R(ρ) = -1
        assert!((b + 3.087_378_03).abs() < 1e-8, "{b}");
        let euler = real_axis_boundary(&classical("euler").unwrap(), 20.0).unwrap();
        assert!((euler + 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_reduces_to_deterministic() {
        let v = mean_square_expectation(&ees(), c(-1.0, 0.0), 0.0).unwrap();
        assert!((v - 0.140625).abs() < 1e-15);
        for (re, im) in [(-0.5, 0.3), (-2.5, 1.0), (0.2, -0.7)] {
            let z = c(re, im);
            let want = deterministic_stable(&ees(), z).modulus.powi(2);
            assert!((mean_square_expectation(&ees(), z, 0.0).unwrap() - want).abs() < 1e-13);
        }
        assert!(mean_square_expectation(&ees(), c(0.0, 0.0), -0.1).is_err());
    }

    #[test]
    fn euler_matches_classical_criterion() {
        let euler = classical("euler").unwrap();
        for (lh, var) in [(-1.0, 0.5), (-0.3, 2.0), (0.4, 0.1)] {
            let got = mean_square_expectation(&euler, c(lh, 0.0), var).unwrap();
            assert!((got - ((1.0 + lh) * (1.0 + lh) + var)).abs() < 1e-14);
        }
    }

    #[test]
    fn closed_form_matches_monte_carlo() {
        // 10^6 samples here; the 10^7 check runs in the acceptance target
        let n = 1_000_000;
        let r = ees().stability_polynomial();
        for (k, (lh, var)) in [(c(-1.0, 0.0), 0.5f64), (c(-0.6, 0.8), 0.3)].into_iter().enumerate() {
            let mut rng = channel_rng(11, k);
            let sd = var.sqrt();
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                let u: f64 = StandardNormal.sample(&mut rng);
                let v = eval_poly(&r, lh + sd * u).norm_sqr();
                s += v;
                s2 += v * v;
            }
            let mean = s / n as f64;
            let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
            let exact = mean_square_expectation(&ees(), lh, var).unwrap();
            assert!((mean - exact).abs() < 3.0 * se, "{mean} {exact} {se}");
        }
    }

    #[test]
    fn jensen_holds_pointwise() {
        for t in [ees(), classical("rk4").unwrap(), classical("kutta_rk3").unwrap()] {
            for re in [-3.0, -1.5, -0.2, 0.5] {
                for im in [0.0, 1.2] {
                    for var in [0.0, 0.3, 1.7] {
                        let m2 = mean_square_expectation(&t, c(re, im), var).unwrap();
                        let m1 = mean_amplification(&t, c(re, im), var).unwrap().norm_sqr();
                        assert!(m2 >= m1 - 1e-12 * (1.0 + m2));
                    }
                }
            }
        }
    }

    #[test]
    fn raster_consistency() {
        let x = Axis::new(-4.0, 1.0, 101).unwrap();
        let y = Axis::new(-2.0, 2.0, 41).unwrap();
        let section = CrossSection::FixedImag { imag: 0.0 };
        let r = ms_raster(&ees(), section, x, y, Execution::Parallel).unwrap();
        let seq = ms_raster(&ees(), section, x, y, Execution::Sequential).unwrap();
        assert_eq!(r, seq);
        let mid = 20;
        assert_eq!(y.value(mid), 0.0);
        for ix in 0..x.resolution {
            assert_eq!(r.stable(ix, mid), deterministic_stable(&ees(), c(x.value(ix), 0.0)).stable);
            for iy in 0..y.resolution {
                let (a, b) = (r.value(ix, iy), r.value(ix, y.resolution - 1 - iy));
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
        let stable_x: Vec<f64> = (0..x.resolution).filter(|&i| r.stable(i, mid)).map(|i| x.value(i)).collect();
        assert!(stable_x[0] >= -3.087 && *stable_x.last().unwrap() < 0.0);

        let euler = ms_raster(&classical("euler").unwrap(), section, x, y, Execution::Sequential).unwrap();
        let outside = (0..r.values.len()).any(|i| r.values[i] < 1.0 && euler.values[i] >= 1.0);
        assert!(outside);
    }

    #[test]
    fn raster_binary_round_trip_and_csv() {
        let x = Axis::new(-1.0, 0.0, 3).unwrap();
        let y = Axis::new(-1.0, 1.0, 2).unwrap();
        let r = ms_raster(&ees(), CrossSection::FixedNoise { mu_sqrt_h: 0.5 }, x, y, Execution::Sequential).unwrap();
        let mut buf = Vec::new();
        r.write_binary(&mut buf).unwrap();
        assert_eq!(StabilityRaster::read_binary(buf.as_slice()).unwrap(), r);
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("re_lambda_h,im_lambda_h,mean_square,stable\n"));
        assert_eq!(text.lines().count(), 7);
        assert!(Axis::new(1.0, 0.0, 5).is_err());
        assert!(StabilityRaster::read_binary(&b"garbage!"[..]).is_err());
    }

    #[test]
    fn reversible_heun_bounded_on_imaginary_segment() {
        let s = Scheme::ReversibleHeun;
        assert!(two_state_bounded(&s, c(0.0, 0.5), 1000).bounded);
        assert!(two_state_bounded(&s, c(0.0, 0.5), 1000).iterated_max < 10.0);
        let out = two_state_bounded(&s, c(-0.5, 0.0), 1000);
        assert!(!out.bounded && out.iterated_max > 1e10);
        assert!(two_state_bounded(&s, c(0.0, 0.0), 1000).bounded);
        // the endpoints carry a Jordan block: linear growth
        let edge = two_state_bounded(&s, c(0.0, 1.0), 1000);
        assert!(edge.defective && !edge.bounded);
        assert!(edge.iterated_max > 100.0);
        assert!(!two_state_bounded(&s, c(0.0, 1.01), 1000).bounded);
        assert!(!two_state_bounded(&s, c(0.01, 0.5), 1000).bounded);
        let alf = two_state_bounded(&Scheme::Alf, c(0.0, -0.9), 1000);
        assert!(alf.bounded && alf.iterated_max < 100.0);
    }

    #[test]
    fn update_matrices_match_solver_steps() {
        // complex z = λh realised as the real rotation-scaling system
        let (a, b, h) = (-0.4, 0.7, 0.5);
        let field = ode_field(2, move |y, out| {
            out[0] = a * y[0] - b * y[1];
            out[1] = b * y[0] + a * y[1];
        });
        let z = c(a * h, b * h);
        let path = DriverPath::deterministic(TimeGrid::with_step(0.0, h, 1).unwrap());
        let schemes = [
            Scheme::ReversibleHeun,
            Scheme::Alf,
            Scheme::Reversible {
                base: ees(),
                coupling: 0.6,
            },
            Scheme::RungeKutta(ees()),
        ];
        for s in schemes {
            let m = update_matrix(&s, z);
            let traj = integrate(&s, &field, &[1.0, 0.0], &path).unwrap();
            let y = c(traj.terminal.y[0], traj.terminal.y[1]);
            // ALF's auxiliary component is h v, and v_0 = y_0
            let x0 = match (&s, m.len()) {
                (_, 1) => vec![c(1.0, 0.0)],
                (Scheme::Alf, _) => vec![c(1.0, 0.0), c(h, 0.0)],
                _ => vec![c(1.0, 0.0), c(1.0, 0.0)],
            };
            let want: Complex64 = m[0].iter().zip(&x0).map(|(a, x)| a * x).sum();
            assert!((y - want).norm() < 1e-14, "{}", s.name());
        }
    }
}
