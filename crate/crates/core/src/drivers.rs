//! Driving signals sampled on an equidistant grid.
//!
//! A [`DriverPath`] stores one increment row per step. Column 0 is the time
//! channel (always `h`) and columns `1..=d` are noise increments, so drift
//! and diffusion enter the schemes through the same channel sum.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::{Error, Result};

/// Magic bytes of the binary increment dump.
pub const PATH_MAGIC: [u8; 8] = *b"EESPATH\0";
pub const PATH_FORMAT_VERSION: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    t_end: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Grid("at least one step is required".into()));
        }
        if !(t0.is_finite() && t_end.is_finite() && t_end > t0) {
            return Err(Error::Grid(format!("interval [{t0}, {t_end}] is empty")));
        }
        Ok(Self { t0, t_end, steps })
    }

    /// Degenerate grid with no steps, for zero-length trajectories.
    pub fn point(t0: f64) -> Self {
        Self {
            t0,
            t_end: t0,
            steps: 0,
        }
    }

    /// Grid on `[t0, t0 + steps * h]`.
    pub fn with_step(t0: f64, h: f64, steps: usize) -> Result<Self> {
        Self::new(t0, t0 + h * steps as f64, steps)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn h(&self) -> f64 {
        if self.steps == 0 {
            return 0.0;
        }
        (self.t_end - self.t0) / self.steps as f64
    }

    pub fn time(&self, n: usize) -> f64 {
        self.t0 + n as f64 * self.h()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriverPath {
    grid: TimeGrid,
    noise_dims: usize,
    hurst: f64,
    seed: u64,
    /// Row-major `steps x (noise_dims + 1)`.
    increments: Vec<f64>,
}

/// Mixes a base seed with an index into an independent seed (SplitMix64).
pub fn stream_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent random stream `channel` of generator `seed`.
pub fn channel_rng(seed: u64, channel: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(channel as u64);
    rng
}

impl DriverPath {
    /// Builds a path from explicit increments; the time column is checked.
    pub fn from_increments(
        grid: TimeGrid,
        noise_dims: usize,
        increments: Vec<f64>,
    ) -> Result<Self> {
        let width = noise_dims + 1;
        if increments.len() != grid.steps() * width {
            return Err(Error::Dimension {
                expected: grid.steps() * width,
                got: increments.len(),
            });
        }
        let h = grid.h();
        if increments.chunks(width).any(|row| (row[0] - h).abs() > 1e-12 * h.abs().max(1.0)) {
            return Err(Error::Grid("time column must equal h on every step".into()));
        }
        Ok(Self {
            grid,
            noise_dims,
            hurst: 0.5,
            seed: 0,
            increments,
        })
    }

    /// Time channel only.
    pub fn deterministic(grid: TimeGrid) -> Self {
        Self {
            grid,
            noise_dims: 0,
            hurst: 0.5,
            seed: 0,
            increments: vec![grid.h(); grid.steps()],
        }
    }

    /// `d` independent Brownian motions: increments i.i.d. `N(0, h)`.
    pub fn brownian(grid: TimeGrid, noise_dims: usize, seed: u64) -> Self {
        let mut path = Self::deterministic_with_noise(grid, noise_dims, 0.5, seed);
        let width = noise_dims + 1;
        let scale = grid.h().sqrt();
        for m in 1..width {
            let mut rng = channel_rng(seed, m);
            for n in 0..grid.steps() {
                let z: f64 = StandardNormal.sample(&mut rng);
                path.increments[n * width + m] = scale * z;
            }
        }
        path
    }

    /// `d` independent fractional Brownian motions with Hurst index `hurst`,
    /// sampled exactly by circulant embedding of the increment covariance.
    pub fn fbm(grid: TimeGrid, noise_dims: usize, hurst: f64, seed: u64) -> Result<Self> {
        if !(hurst > 0.25 && hurst < 1.0) {
            return Err(Error::Domain {
                name: "H",
                value: hurst,
                reason: "Hurst index must lie in (1/4, 1)",
            });
        }
        let mut path = Self::deterministic_with_noise(grid, noise_dims, hurst, seed);
        let sampler = FgnSampler::new(grid.steps(), grid.h(), hurst)?;
        let width = noise_dims + 1;
        for m in 1..width {
            let mut rng = channel_rng(seed, m);
            let fgn = sampler.sample(&mut rng);
            for (n, v) in fgn.into_iter().enumerate() {
                path.increments[n * width + m] = v;
            }
        }
        Ok(path)
    }

    fn deterministic_with_noise(grid: TimeGrid, noise_dims: usize, hurst: f64, seed: u64) -> Self {
        let width = noise_dims + 1;
        let mut increments = vec![0.0; grid.steps() * width];
        for row in increments.chunks_mut(width) {
            row[0] = grid.h();
        }
        Self {
            grid,
            noise_dims,
            hurst,
            seed,
            increments,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn noise_dims(&self) -> usize {
        self.noise_dims
    }

    /// Number of channels including time.
    pub fn channels(&self) -> usize {
        self.noise_dims + 1
    }

    pub fn hurst(&self) -> f64 {
        self.hurst
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Increment over `[t_n, t_{n+1}]`, time channel first.
    #[inline]
    pub fn increment(&self, n: usize) -> &[f64] {
        let w = self.channels();
        &self.increments[n * w..(n + 1) * w]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Path values `X_{t_n} - X_{t_0}` for `n = 0..=N`, row-major.
    pub fn cumulative(&self) -> Vec<f64> {
        let w = self.channels();
        let mut out = vec![0.0; (self.steps() + 1) * w];
        for n in 0..self.steps() {
            for m in 0..w {
                out[(n + 1) * w + m] = out[n * w + m] + self.increments[n * w + m];
            }
        }
        out
    }

    /// All increments negated, time channel included.
    pub fn negated(&self) -> Self {
        let mut out = self.clone();
        out.increments.iter_mut().for_each(|v| *v = -*v);
        out
    }

    /// Sums blocks of `factor` consecutive increments, giving the same
    /// realization on a grid `factor` times coarser.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.steps().is_multiple_of(factor) {
            return Err(Error::Grid(format!(
                "{} steps cannot be coarsened by a factor of {factor}",
                self.steps()
            )));
        }
        let w = self.channels();
        let coarse_steps = self.steps() / factor;
        let mut increments = vec![0.0; coarse_steps * w];
        for n in 0..coarse_steps {
            for k in 0..factor {
                let fine = self.increment(n * factor + k);
                for m in 0..w {
                    increments[n * w + m] += fine[m];
                }
            }
        }
        let grid = TimeGrid::new(self.grid.t0, self.grid.t_end, coarse_steps)?;
        // The summed time column accumulates round-off; pin it to the grid step.
        for row in increments.chunks_mut(w) {
            row[0] = grid.h();
        }
        Ok(Self {
            grid,
            noise_dims: self.noise_dims,
            hurst: self.hurst,
            seed: self.seed,
            increments,
        })
    }

    /// Splits every Brownian increment into `factor` pieces drawn from the
    /// exact Brownian-bridge conditional law, so that [`coarsen`](Self::coarsen)
    /// by `factor` recovers this path up to round-off.
    pub fn refine_brownian(&self, factor: usize, seed: u64) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Grid("refinement factor must be positive".into()));
        }
        if self.hurst != 0.5 {
            return Err(Error::Grid(
                "conditional refinement is only available for Brownian drivers".into(),
            ));
        }
        let w = self.channels();
        let grid = TimeGrid::new(self.grid.t0, self.grid.t_end, self.steps() * factor)?;
        let fine_h = grid.h();
        let mut increments = vec![0.0; grid.steps() * w];
        for row in increments.chunks_mut(w) {
            row[0] = fine_h;
        }
        let scale = fine_h.sqrt();
        let mut pieces = vec![0.0; factor];
        for m in 1..w {
            let mut rng = channel_rng(seed, m);
            for n in 0..self.steps() {
                for p in pieces.iter_mut() {
                    *p = scale * Distribution::<f64>::sample(&StandardNormal, &mut rng);
                }
                let excess = (pieces.iter().sum::<f64>() - self.increment(n)[m]) / factor as f64;
                for (k, p) in pieces.iter().enumerate() {
                    increments[(n * factor + k) * w + m] = p - excess;
                }
            }
        }
        Ok(Self {
            grid,
            noise_dims: self.noise_dims,
            hurst: self.hurst,
            seed,
            increments,
        })
    }

    /// Little-endian dump: eight 8-byte header fields (magic, version, N, d,
    /// round(H * 1e6), seed, t0, T) followed by the `N x (d+1)` increments.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&PATH_MAGIC)?;
        w.write_all(&PATH_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.steps() as u64).to_le_bytes())?;
        w.write_all(&(self.noise_dims as u64).to_le_bytes())?;
        w.write_all(&((self.hurst * 1e6).round() as i64).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.grid.t0.to_le_bytes())?;
        w.write_all(&self.grid.t_end.to_le_bytes())?;
        for v in &self.increments {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut word = [0u8; 8];
        let mut next = |r: &mut R| -> Result<[u8; 8]> {
            r.read_exact(&mut word)?;
            Ok(word)
        };
        if next(&mut r)? != PATH_MAGIC {
            return Err(Error::Parse("not an increment dump (bad magic)".into()));
        }
        let version = u64::from_le_bytes(next(&mut r)?);
        if version != PATH_FORMAT_VERSION {
            return Err(Error::Parse(format!("unsupported dump version {version}")));
        }
        let steps = u64::from_le_bytes(next(&mut r)?) as usize;
        let noise_dims = u64::from_le_bytes(next(&mut r)?) as usize;
        let hurst = i64::from_le_bytes(next(&mut r)?) as f64 / 1e6;
        let seed = u64::from_le_bytes(next(&mut r)?);
        let t0 = f64::from_le_bytes(next(&mut r)?);
        let t_end = f64::from_le_bytes(next(&mut r)?);
        let grid = TimeGrid::new(t0, t_end, steps)?;
        let mut increments = vec![0.0; steps * (noise_dims + 1)];
        for v in increments.iter_mut() {
            *v = f64::from_le_bytes(next(&mut r)?);
        }
        Ok(Self {
            grid,
            noise_dims,
            hurst,
            seed,
            increments,
        })
    }
}

/// Autocovariance of fractional Gaussian noise with step `h`:
/// `γ(k) = h^{2H}/2 (|k+1|^{2H} - 2|k|^{2H} + |k-1|^{2H})`.
pub fn fgn_autocovariance(h: f64, hurst: f64, lag: usize) -> f64 {
    let k = lag as f64;
    let e = 2.0 * hurst;
    0.5 * h.powf(e) * ((k + 1.0).powf(e) - 2.0 * k.powf(e) + (k - 1.0).abs().powf(e))
}

/// Exact fGn sampler (Davies–Harte). Reusable across realizations of the
/// same length.
pub struct FgnSampler {
    steps: usize,
    /// `sqrt(λ_k / 2N)` for the circulant embedding of size `2N`.
    scales: Vec<f64>,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl FgnSampler {
    pub fn new(steps: usize, h: f64, hurst: f64) -> Result<Self> {
        let eigen = circulant_eigenvalues(steps, h, hurst);
        let size = eigen.len();
        let floor = -1e-10 * eigen.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if let Some(bad) = eigen.iter().find(|&&v| v < floor) {
            return Err(Error::Domain {
                name: "circulant eigenvalue",
                value: *bad,
                reason: "embedding is not non-negative definite",
            });
        }
        let scales = eigen
            .iter()
            .map(|&l| (l.max(0.0) / size as f64).sqrt())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(size);
        Ok(Self { steps, scales, fft })
    }

    /// One realization of `N` fGn increments.
    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut buf: Vec<Complex64> = self
            .scales
            .iter()
            .map(|&s| {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                Complex64::new(s * re, s * im)
            })
            .collect();
        self.fft.process(&mut buf);
        buf.truncate(self.steps);
        buf.into_iter().map(|z| z.re).collect()
    }
}

/// Eigenvalues of the `2N` circulant matrix whose first row is
/// `[γ(0), .., γ(N), γ(N-1), .., γ(1)]`.
pub fn circulant_eigenvalues(steps: usize, h: f64, hurst: f64) -> Vec<f64> {
    let size = 2 * steps;
    let mut row: Vec<Complex64> = (0..size)
        .map(|j| {
            let lag = if j <= steps { j } else { size - j };
            Complex64::new(fgn_autocovariance(h, hurst, lag), 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(size).process(&mut row);
    row.into_iter().map(|z| z.re).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(steps: usize, t: f64) -> TimeGrid {
        TimeGrid::new(0.0, t, steps).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        assert!(TimeGrid::new(1.0, 1.0, 4).is_err());
        let g = grid(4, 1.0);
        assert_eq!(g.h(), 0.25);
        assert_eq!(g.time(4), 1.0);
    }

    #[test]
    fn brownian_is_deterministic_and_has_time_column() {
        let a = DriverPath::brownian(grid(64, 1.0), 2, 7);
        let b = DriverPath::brownian(grid(64, 1.0), 2, 7);
        assert_eq!(a, b);
        assert_ne!(a, DriverPath::brownian(grid(64, 1.0), 2, 8));
        for n in 0..64 {
            assert_eq!(a.increment(n)[0], 1.0 / 64.0);
        }
        // channels are independent streams
        let x: Vec<f64> = (0..64).map(|n| a.increment(n)[1]).collect();
        let y: Vec<f64> = (0..64).map(|n| a.increment(n)[2]).collect();
        assert_ne!(x, y);
    }

    #[test]
    fn brownian_increment_variance() {
        let h = 0.01;
        let n = 100_000;
        let path = DriverPath::brownian(TimeGrid::with_step(0.0, h, n).unwrap(), 1, 3);
        let xs: Vec<f64> = (0..n).map(|k| path.increment(k)[1]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // Var of the sample variance of N(0, h) is 2h^2/(n-1)
        let se = (2.0 * h * h / (n - 1) as f64).sqrt();
        assert!((var - h).abs() < 3.0 * se, "var {var}, se {se}");
    }

    #[test]
    fn brownian_terminal_variance() {
        let t = 2.0;
        let m = 10_000;
        let terminal: Vec<f64> = (0..m)
            .map(|i| {
                let p = DriverPath::brownian(grid(16, t), 1, stream_seed(11, i));
                p.cumulative()[16 * 2 + 1]
            })
            .collect();
        let var = terminal.iter().map(|x| x * x).sum::<f64>() / m as f64;
        let se = (2.0 * t * t / m as f64).sqrt();
        assert!((var - t).abs() < 3.0 * se, "var {var}");
    }

    #[test]
    fn fgn_covariance_at_half_is_white() {
        let h = 0.37;
        assert!((fgn_autocovariance(h, 0.5, 0) - h).abs() < 1e-15);
        for lag in 1..20 {
            assert!(fgn_autocovariance(h, 0.5, lag).abs() < 1e-15);
        }
        // implied covariance of the embedding: inverse DFT of the eigenvalues
        let steps = 16;
        for hurst in [0.3, 0.5, 0.75] {
            let eig = circulant_eigenvalues(steps, h, hurst);
            assert!(eig.iter().all(|l| *l > -1e-12));
            for lag in 0..=steps {
                let size = eig.len() as f64;
                let implied: f64 = eig
                    .iter()
                    .enumerate()
                    .map(|(k, l)| {
                        l * (2.0 * std::f64::consts::PI * (k * lag) as f64 / size).cos()
                    })
                    .sum::<f64>()
                    / size;
                assert!((implied - fgn_autocovariance(h, hurst, lag)).abs() < 1e-10);
                if hurst == 0.5 {
                    let want = if lag == 0 { h } else { 0.0 };
                    assert!((implied - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn fbm_rejects_bad_hurst() {
        for hurst in [0.25, 0.1, 1.0, f64::NAN] {
            assert!(DriverPath::fbm(grid(8, 1.0), 1, hurst, 0).is_err());
        }
    }

    #[test]
    fn fbm_path_covariance_matches_analytic() {
        // Cov(B(0.5), B(0.25)) for H = 0.6
        let hurst = 0.6;
        let m = 10_000;
        let mut products = Vec::with_capacity(m);
        let mut sq_half = 0.0;
        for i in 0..m {
            let p = DriverPath::fbm(grid(8, 1.0), 1, hurst, stream_seed(5, i as u64)).unwrap();
            let cum = p.cumulative();
            let at = |n: usize| cum[n * 2 + 1];
            products.push(at(4) * at(2));
            sq_half += at(4) * at(4);
        }
        let e = 2.0 * hurst;
        let want = 0.5 * (0.5f64.powf(e) + 0.25f64.powf(e) - 0.25f64.powf(e));
        assert!((want - 0.2176).abs() < 1e-4);
        let mean = products.iter().sum::<f64>() / m as f64;
        let sd = (products.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt();
        assert!((mean - want).abs() < 3.0 * sd / (m as f64).sqrt(), "{mean} vs {want}");
        let var_half = sq_half / m as f64;
        assert!((var_half - 0.5f64.powf(e)).abs() < 0.05 * 0.5f64.powf(e));
    }

    #[test]
    fn fbm_cumulative_telescopes() {
        let p = DriverPath::fbm(grid(32, 1.0), 2, 0.7, 9).unwrap();
        let cum = p.cumulative();
        for m in 0..3 {
            let total: f64 = (0..32).map(|n| p.increment(n)[m]).sum();
            assert!((cum[32 * 3 + m] - total).abs() < 1e-12);
        }
        assert!((cum[32 * 3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn coarsening_sums_blocks() {
        let fine = DriverPath::brownian(grid(16, 1.0), 2, 1);
        let coarse = fine.coarsen(2).unwrap();
        assert_eq!(coarse.steps(), 8);
        for n in 0..8 {
            for m in 1..3 {
                let sum = fine.increment(2 * n)[m] + fine.increment(2 * n + 1)[m];
                assert_eq!(coarse.increment(n)[m], sum);
            }
            assert_eq!(coarse.increment(n)[0], 0.125);
        }
        let twice = coarse.coarsen(2).unwrap();
        let once = fine.coarsen(4).unwrap();
        for (a, b) in twice.increments().iter().zip(once.increments()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(fine.coarsen(3).is_err());
        assert!(fine.coarsen(0).is_err());
    }

    #[test]
    fn brownian_refinement_is_consistent() {
        let coarse = DriverPath::brownian(grid(10, 1.0), 2, 4);
        let fine = coarse.refine_brownian(4, 99).unwrap();
        assert_eq!(fine.steps(), 40);
        let back = fine.coarsen(4).unwrap();
        for (a, b) in back.increments().iter().zip(coarse.increments()) {
            assert!((a - b).abs() < 1e-14);
        }
        let fbm = DriverPath::fbm(grid(8, 1.0), 1, 0.7, 0).unwrap();
        assert!(fbm.refine_brownian(2, 0).is_err());
    }

    #[test]
    fn negation_flips_every_channel() {
        let p = DriverPath::brownian(grid(5, 1.0), 1, 2);
        let q = p.negated();
        for (a, b) in p.increments().iter().zip(q.increments()) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn binary_dump_round_trips() {
        let p = DriverPath::fbm(TimeGrid::new(0.5, 2.0, 12).unwrap(), 2, 0.6, 42).unwrap();
        let mut buf = Vec::new();
        p.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 64 + 12 * 3 * 8);
        assert_eq!(&buf[..8], b"EESPATH\0");
        assert_eq!(i64::from_le_bytes(buf[32..40].try_into().unwrap()), 600_000);
        let q = DriverPath::read_binary(buf.as_slice()).unwrap();
        assert_eq!(p, q);
        buf[0] = b'X';
        assert!(DriverPath::read_binary(buf.as_slice()).is_err());
    }
}
