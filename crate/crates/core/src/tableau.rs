//! Explicit Runge–Kutta tableaux.
//!
//! A tableau `(A, b, c)` drives both the ODE method and its rough-path
//! analogue: the simplified RDE scheme reuses the same coefficients with the
//! step `h` replaced by the driver increment.

use std::fmt;
use std::str::FromStr;

use crate::{Error, Result};

/// Absolute tolerance for the row-sum and weight-sum invariants.
pub const CONSISTENCY_TOL: f64 = 1e-14;

/// Parameters of the EES(2,5) family closer than this to a pole are rejected.
pub const EES25_POLE_GUARD: f64 = 1e-9;

/// Parameter of the canonical EES(2,5) scheme.
pub const EES25_CANONICAL_X: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct ButcherTableau {
    name: String,
    /// Row-major `s x s`, strictly lower triangular.
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
}

impl ButcherTableau {
    /// Builds a tableau from its coefficients, checking explicitness and
    /// consistency. `a` is row-major `s x s`.
    pub fn new(name: impl Into<String>, a: Vec<f64>, b: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        let s = b.len();
        if s == 0 {
            return Err(Error::InvalidTableau("no stages".into()));
        }
        if a.len() != s * s || c.len() != s {
            return Err(Error::InvalidTableau(format!(
                "shape mismatch: |A| = {}, |b| = {}, |c| = {}",
                a.len(),
                s,
                c.len()
            )));
        }
        if a.iter().chain(&b).chain(&c).any(|v| !v.is_finite()) {
            return Err(Error::InvalidTableau("non-finite coefficient".into()));
        }
        for i in 0..s {
            for j in i..s {
                if a[i * s + j] != 0.0 {
                    return Err(Error::InvalidTableau(format!(
                        "a[{i}][{j}] = {} breaks explicitness",
                        a[i * s + j]
                    )));
                }
            }
            let row: f64 = a[i * s..i * s + i].iter().sum();
            if (row - c[i]).abs() > CONSISTENCY_TOL {
                return Err(Error::InvalidTableau(format!(
                    "c[{i}] = {} but row sum is {row}",
                    c[i]
                )));
            }
        }
        let weight: f64 = b.iter().sum();
        if (weight - 1.0).abs() > CONSISTENCY_TOL {
            return Err(Error::InvalidTableau(format!("weights sum to {weight}")));
        }
        Ok(Self {
            name: name.into(),
            a,
            b,
            c,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn stages(&self) -> usize {
        self.b.len()
    }

    #[inline]
    pub fn a(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.stages() + j]
    }

    /// Row `i` of `A` restricted to the explicit part `j < i`.
    #[inline]
    pub fn a_row(&self, i: usize) -> &[f64] {
        let s = self.stages();
        &self.a[i * s..i * s + i]
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    /// Coefficients `[r_0, .., r_s]` of the stability function
    /// `R(z) = 1 + sum_k (b^T A^{k-1} 1) z^k`, ascending powers.
    pub fn stability_polynomial(&self) -> Vec<f64> {
        let s = self.stages();
        let mut coeffs = Vec::with_capacity(s + 1);
        coeffs.push(1.0);
        // v = A^{k-1} 1
        let mut v = vec![1.0; s];
        for _ in 0..s {
            coeffs.push(self.b.iter().zip(&v).map(|(b, v)| b * v).sum());
            let next: Vec<f64> = (0..s)
                .map(|i| self.a_row(i).iter().zip(&v).map(|(a, v)| a * v).sum())
                .collect();
            v = next;
        }
        coeffs
    }

    /// Writes the plain-text key-value form.
    pub fn to_text(&self) -> String {
        self.to_string()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        text.parse()
    }
}

/// EES(2,5;x): the three-stage explicit scheme of order 2 whose
/// backward-forward composition is the identity up to order 5.
pub fn ees25(x: f64) -> Result<ButcherTableau> {
    for pole in [1.0, 0.5, -0.5] {
        if !x.is_finite() || (x - pole).abs() < EES25_POLE_GUARD {
            return Err(Error::Domain {
                name: "x",
                value: x,
                reason: "EES(2,5;x) requires x not in {1, 1/2, -1/2}",
            });
        }
    }
    let c2 = (1.0 + 2.0 * x) / (4.0 * (1.0 - x));
    let one_minus_4x2 = 1.0 - 4.0 * x * x;
    let a31 = (4.0 * x - 1.0).powi(2) / (4.0 * (x - 1.0) * one_minus_4x2);
    let a32 = (1.0 - x) / one_minus_4x2;
    let a = vec![0.0, 0.0, 0.0, c2, 0.0, 0.0, a31, a32, 0.0];
    // c3 is stored as the row sum so consistency holds to round-off; near the
    // poles the closed form and the row sum cancel differently.
    let c = vec![0.0, c2, a31 + a32];
    let b = vec![x, 0.5, 0.5 - x];
    let name = if x == EES25_CANONICAL_X {
        "ees25".to_string()
    } else {
        format!("ees25({x})")
    };
    ButcherTableau::new(name, a, b, c)
}

/// Standard textbook tableaux: `euler`, `heun2`, `kutta_rk3`, `rk4`, plus
/// `ees25` for the canonical EES scheme.
pub fn classical(name: &str) -> Result<ButcherTableau> {
    let tableau = match name {
        "euler" => ButcherTableau::new("euler", vec![0.0], vec![1.0], vec![0.0]),
        "heun2" => ButcherTableau::new(
            "heun2",
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.5, 0.5],
            vec![0.0, 1.0],
        ),
        "kutta_rk3" => ButcherTableau::new(
            "kutta_rk3",
            vec![0.0, 0.0, 0.0, 0.5, 0.0, 0.0, -1.0, 2.0, 0.0],
            vec![1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
            vec![0.0, 0.5, 1.0],
        ),
        "rk4" => ButcherTableau::new(
            "rk4",
            vec![
                0.0, 0.0, 0.0, 0.0, //
                0.5, 0.0, 0.0, 0.0, //
                0.0, 0.5, 0.0, 0.0, //
                0.0, 0.0, 1.0, 0.0,
            ],
            vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
            vec![0.0, 0.5, 0.5, 1.0],
        ),
        "ees25" => ees25(EES25_CANONICAL_X),
        other => Err(Error::UnknownTableau(other.to_string())),
    }?;
    Ok(tableau)
}

/// Evaluates a real-coefficient polynomial (ascending powers) by Horner.
pub fn eval_poly<T>(coeffs: &[f64], z: T) -> T
where
    T: Copy + std::ops::Mul<Output = T> + std::ops::Add<f64, Output = T> + From<f64>,
{
    coeffs
        .iter()
        .rev()
        .fold(T::from(0.0), |acc, &r| acc * z + r)
}

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

impl fmt::Display for ButcherTableau {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "name = {}", self.name)?;
        writeln!(f, "s = {}", self.stages())?;
        writeln!(f, "A = {}", join(&self.a))?;
        writeln!(f, "b = {}", join(&self.b))?;
        writeln!(f, "c = {}", join(&self.c))
    }
}

impl FromStr for ButcherTableau {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut name = None;
        let mut stages = None;
        let (mut a, mut b, mut c) = (None, None, None);
        let floats = |v: &str| -> Result<Vec<f64>> {
            v.split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| Error::Parse(format!("`{t}`: {e}")))
                })
                .collect()
        };
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("expected `key = value`, got `{line}`")))?;
            let value = value.trim();
            match key.trim() {
                "name" => name = Some(value.to_string()),
                "s" => {
                    stages = Some(
                        value
                            .parse::<usize>()
                            .map_err(|e| Error::Parse(format!("s: {e}")))?,
                    )
                }
                "A" => a = Some(floats(value)?),
                "b" => b = Some(floats(value)?),
                "c" => c = Some(floats(value)?),
                other => return Err(Error::Parse(format!("unknown key `{other}`"))),
            }
        }
        let missing = |k: &str| Error::Parse(format!("missing key `{k}`"));
        let b = b.ok_or_else(|| missing("b"))?;
        let s = stages.ok_or_else(|| missing("s"))?;
        if s != b.len() {
            return Err(Error::Parse(format!("s = {s} but b has {} entries", b.len())));
        }
        ButcherTableau::new(
            name.ok_or_else(|| missing("name"))?,
            a.ok_or_else(|| missing("A"))?,
            b,
            c.ok_or_else(|| missing("c"))?,
        )
    }
}
