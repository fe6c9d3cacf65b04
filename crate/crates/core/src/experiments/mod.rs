//! Experiment configuration, orchestration and reports.
//!
//! Every run returns a [`RunOutput`]: a JSON-serialisable [`RunReport`] that
//! embeds the fully resolved configuration and library version, plus CSV
//! tables and stability rasters. Given the same configuration the numbers
//! are reproduced bit for bit, whatever the execution policy.

pub mod convergence;
pub mod gbm;
pub mod ou;
mod training;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::par::Execution;
use crate::solvers::Scheme;
use crate::stability::{
    ms_raster, real_axis_boundary, Axis, CrossSection, StabilityRaster,
};
use crate::tableau::{classical, ees25};
use crate::trees::{check_effective_symmetry, classical_order, order_residuals, SYMMETRY_TOL};
use crate::{Error, Result};

pub use convergence::{run_convergence, ConvergenceConfig, ConvergenceRow, ConvergenceTable};
pub use gbm::{run_gbm, GbmConfig};
pub use ou::{run_ou, OuConfig};
pub use training::{EpochRecord, TrainingCurve};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    #[default]
    Convergence,
    Ou,
    Gbm,
    Stability,
    Certify,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Convergence => "convergence",
            ExperimentKind::Ou => "ou",
            ExperimentKind::Gbm => "gbm",
            ExperimentKind::Stability => "stability",
            ExperimentKind::Certify => "certify",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityConfig {
    pub tableaux: Vec<String>,
    pub sections: Vec<CrossSection>,
    pub x: Axis,
    pub y: Axis,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            tableaux: vec!["ees25".into(), "kutta_rk3".into(), "rk4".into()],
            sections: vec![
                CrossSection::FixedImag { imag: 0.0 },
                CrossSection::FixedImag { imag: 1.5 },
                CrossSection::FixedNoise { mu_sqrt_h: 0.5 },
                CrossSection::FixedNoise { mu_sqrt_h: 1.0 },
            ],
            x: Axis {
                min: -4.0,
                max: 1.0,
                resolution: 400,
            },
            y: Axis {
                min: -3.0,
                max: 3.0,
                resolution: 400,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifyConfig {
    pub tableaux: Vec<String>,
    pub max_order: usize,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self {
            tableaux: vec!["ees25".into(), "rk4".into(), "kutta_rk3".into(), "heun2".into(), "euler".into()],
            max_order: 6,
        }
    }
}

/// Configuration for every subcommand; unused sections keep their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Scheme for the convergence study: a tableau name, `reversible_heun`
    /// or `alf`.
    pub solver: String,
    /// Free parameter of EES(2,5;x).
    pub x: f64,
    pub seed: u64,
    pub output: PathBuf,
    pub execution: Execution,
    pub convergence: ConvergenceConfig,
    pub ou: OuConfig,
    pub gbm: GbmConfig,
    pub stability: StabilityConfig,
    pub certify: CertifyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentKind::default(),
            solver: "ees25".into(),
            x: crate::tableau::EES25_CANONICAL_X,
            seed: 0,
            output: PathBuf::from("out"),
            execution: Execution::default(),
            convergence: ConvergenceConfig::default(),
            ou: OuConfig::default(),
            gbm: GbmConfig::default(),
            stability: StabilityConfig::default(),
            certify: CertifyConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        scheme_from_name(&self.solver, self.x)?;
        self.convergence.validate()?;
        self.ou.validate(self.x)?;
        self.gbm.validate(self.x)?;
        for name in &self.stability.tableaux {
            tableau_from_name(name, self.x)?;
        }
        Axis::new(self.stability.x.min, self.stability.x.max, self.stability.x.resolution)?;
        Axis::new(self.stability.y.min, self.stability.y.max, self.stability.y.resolution)?;
        for name in &self.certify.tableaux {
            tableau_from_name(name, self.x)?;
        }
        if self.certify.max_order == 0 || self.certify.max_order > crate::trees::MAX_WEIGHT_NODES {
            return Err(Error::Config(format!(
                "certify.max_order must lie in 1..={}",
                crate::trees::MAX_WEIGHT_NODES
            )));
        }
        Ok(())
    }
}

/// `ees25` uses the configured `x`; other names are textbook tableaux.
pub fn tableau_from_name(name: &str, x: f64) -> Result<crate::tableau::ButcherTableau> {
    match name {
        "ees25" => ees25(x),
        other => classical(other),
    }
}

pub fn scheme_from_name(name: &str, x: f64) -> Result<Scheme> {
    match name {
        "reversible_heun" => Ok(Scheme::ReversibleHeun),
        "alf" => Ok(Scheme::Alf),
        other => Ok(Scheme::RungeKutta(tableau_from_name(other, x)?)),
    }
}

/// Least-squares slope of `log y` against `log x` with its standard error.
pub fn fit_loglog(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Config("slope fit needs at least two points".into()));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Config("slope fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let se = if lx.len() > 2 {
        let rss: f64 = lx
            .iter()
            .zip(&ly)
            .map(|(a, b)| (b - my - slope * (a - mx)).powi(2))
            .sum();
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok((slope, se))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub phase: String,
    pub seconds: f64,
}

/// Times `f` and appends the phase to `timings`.
pub(crate) fn timed<T>(timings: &mut Vec<PhaseTiming>, phase: &str, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    timings.push(PhaseTiming {
        phase: phase.to_string(),
        seconds: start.elapsed().as_secs_f64(),
    });
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterSummary {
    pub tableau: String,
    pub section: String,
    pub stable_fraction: f64,
    pub file_stem: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub tableau: String,
    pub order: usize,
    pub symmetry_order: usize,
    /// Largest order-condition residual per order.
    pub order_residuals: Vec<f64>,
    /// Largest `|(φ * φ̄)(τ)|` per order.
    pub symmetry_residuals: Vec<f64>,
    pub real_axis_boundary: Option<f64>,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub experiment: ExperimentKind,
    pub version: String,
    pub config: ExperimentConfig,
    pub timings: Vec<PhaseTiming>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub convergence: Vec<ConvergenceTable>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub training: Vec<TrainingCurve>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub rasters: Vec<RasterSummary>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub certificates: Vec<Certificate>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

impl RunReport {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            experiment: config.experiment,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            timings: Vec::new(),
            convergence: Vec::new(),
            training: Vec::new(),
            rasters: Vec::new(),
            certificates: Vec::new(),
            notes: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsvTable {
    pub name: String,
    pub content: String,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub tables: Vec<CsvTable>,
    pub rasters: Vec<StabilityRaster>,
}

impl RunOutput {
    /// Writes `report.json`, `config.toml`, each table as CSV and each
    /// raster as CSV plus binary grid into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
            let path = dir.join(name);
            fs::write(&path, bytes)?;
            written.push(path);
            Ok(())
        };
        put("report.json".into(), serde_json::to_vec_pretty(&self.report)?)?;
        put("config.toml".into(), self.report.config.to_toml()?.into_bytes())?;
        for table in &self.tables {
            put(format!("{}.csv", table.name), table.content.clone().into_bytes())?;
        }
        for (raster, summary) in self.rasters.iter().zip(&self.report.rasters) {
            let mut csv = Vec::new();
            raster.write_csv(&mut csv)?;
            put(format!("{}.csv", summary.file_stem), csv)?;
            let mut bin = Vec::new();
            raster.write_binary(&mut bin)?;
            put(format!("{}.grid", summary.file_stem), bin)?;
        }
        Ok(written)
    }

    /// True when some training curve recorded a non-finite epoch.
    pub fn any_nonfinite(&self) -> bool {
        self.report.training.iter().any(|c| c.nonfinite_epochs > 0)
    }
}

/// Dispatches on `config.experiment`.
pub fn run(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    match config.experiment {
        ExperimentKind::Convergence => run_convergence(config),
        ExperimentKind::Ou => run_ou(config),
        ExperimentKind::Gbm => run_gbm(config),
        ExperimentKind::Stability => run_stability(config),
        ExperimentKind::Certify => run_certify(config),
    }
}

fn section_slug(section: &CrossSection) -> String {
    match section {
        CrossSection::FixedImag { imag } => format!("im{imag}"),
        CrossSection::FixedNoise { mu_sqrt_h } => format!("mu{mu_sqrt_h}"),
    }
}

/// Mean-square stability rasters for every configured tableau and section.
pub fn run_stability(config: &ExperimentConfig) -> Result<RunOutput> {
    let cfg = &config.stability;
    let mut report = RunReport::new(config);
    let x = Axis::new(cfg.x.min, cfg.x.max, cfg.x.resolution)?;
    let y = Axis::new(cfg.y.min, cfg.y.max, cfg.y.resolution)?;
    let mut rasters = Vec::new();
    let mut boundary_csv = String::from("tableau,real_axis_boundary\n");
    timed(&mut report.timings, "rasters", || -> Result<()> {
        for name in &cfg.tableaux {
            let tableau = tableau_from_name(name, config.x)?;
            let boundary = real_axis_boundary(&tableau, 50.0);
            boundary_csv.push_str(&format!(
                "{name},{}\n",
                boundary.map_or("none".to_string(), |b| b.to_string())
            ));
            for section in &cfg.sections {
                let raster = ms_raster(&tableau, *section, x, y, config.execution)?;
                report.rasters.push(RasterSummary {
                    tableau: name.clone(),
                    section: section.describe(),
                    stable_fraction: raster.stable_fraction(),
                    file_stem: format!("stability_{name}_{}", section_slug(section)),
                });
                rasters.push(raster);
            }
        }
        Ok(())
    })?;
    Ok(RunOutput {
        report,
        tables: vec![CsvTable {
            name: "real_axis_boundary".into(),
            content: boundary_csv,
        }],
        rasters,
    })
}

/// Order and effective-symmetry certificate of one tableau.
pub fn certify(name: &str, x: f64, max_order: usize) -> Result<Certificate> {
    let tableau = tableau_from_name(name, x)?;
    let order_res = order_residuals(&tableau, max_order)?;
    let sym = check_effective_symmetry(&tableau, max_order)?;
    let order = classical_order(&tableau, max_order)?;
    let symmetry_order = sym.iter().take_while(|r| **r <= SYMMETRY_TOL).count();
    let mut text = format!("{}: order {order}", tableau.name());
    if symmetry_order > 0 {
        text.push_str(&format!(
            "; symmetric-composition residuals 0 at orders 1..{symmetry_order}"
        ));
    }
    if symmetry_order < max_order {
        text.push_str(&format!("; nonzero at {}", symmetry_order + 1));
    }
    Ok(Certificate {
        tableau: tableau.name().to_string(),
        order,
        symmetry_order,
        order_residuals: order_res,
        symmetry_residuals: sym,
        real_axis_boundary: real_axis_boundary(&tableau, 50.0),
        text,
    })
}

pub fn run_certify(config: &ExperimentConfig) -> Result<RunOutput> {
    let mut report = RunReport::new(config);
    let certs = timed(&mut report.timings, "certify", || {
        config
            .certify
            .tableaux
            .iter()
            .map(|name| certify(name, config.x, config.certify.max_order))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut text = String::new();
    let mut csv = String::from("tableau,order,symmetry_order");
    for k in 1..=config.certify.max_order {
        csv.push_str(&format!(",symmetry_residual_{k}"));
    }
    csv.push('\n');
    for c in &certs {
        text.push_str(&c.text);
        text.push('\n');
        csv.push_str(&format!("{},{},{}", c.tableau, c.order, c.symmetry_order));
        for r in &c.symmetry_residuals {
            csv.push_str(&format!(",{r:e}"));
        }
        csv.push('\n');
    }
    report.certificates = certs;
    report.notes.push(text);
    Ok(RunOutput {
        report,
        tables: vec![CsvTable {
            name: "certificate".into(),
            content: csv,
        }],
        rasters: Vec::new(),
    })
}
