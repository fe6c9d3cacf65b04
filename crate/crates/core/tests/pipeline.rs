//! End-to-end runs through the configuration layer: every experiment kind
//! writes its artefacts and regenerates them bit-identically from the
//! configuration it saved.

use std::fs;
use std::path::Path;

use ees::experiments::{run, ExperimentConfig, ExperimentKind, GbmConfig, OuConfig};
use ees::par::Execution;
use ees::stability::{Axis, StabilityRaster};

fn small(kind: ExperimentKind, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        experiment: kind,
        output: out.to_path_buf(),
        seed: 42,
        ..Default::default()
    };
    cfg.convergence.hurst = vec![0.5];
    cfg.convergence.realizations = 2;
    cfg.convergence.log2_steps = vec![3, 4, 5, 6];
    cfg.convergence.reference_factor = 4;
    cfg.ou = OuConfig {
        latent_dim: 3,
        width: 6,
        samples: 16,
        epochs: 2,
        t_end: 1.0,
        chunk: 4,
        ..Default::default()
    };
    cfg.gbm = GbmConfig {
        samples: 32,
        epochs: 2,
        t_end: 2.5,
        maturities: vec![1.25, 2.5],
        strikes: vec![95.0, 105.0],
        chunk: 8,
        ..Default::default()
    };
    cfg.stability.tableaux = vec!["ees25".into(), "rk4".into()];
    cfg.stability.x = Axis::new(-4.0, 1.0, 21).unwrap();
    cfg.stability.y = Axis::new(0.0, 2.0, 11).unwrap();
    cfg
}

fn tables(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv" || e == "grid"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn every_experiment_regenerates_from_its_saved_config() {
    let root = tempfile::tempdir().unwrap();
    for kind in [
        ExperimentKind::Convergence,
        ExperimentKind::Ou,
        ExperimentKind::Gbm,
        ExperimentKind::Stability,
        ExperimentKind::Certify,
    ] {
        let first = root.path().join(format!("{}-a", kind.name()));
        let cfg = small(kind, &first);
        let output = run(&cfg).unwrap();
        output.write(&first).unwrap();
        assert!(!output.any_nonfinite());

        let report: serde_json::Value = serde_json::from_slice(&fs::read(first.join("report.json")).unwrap()).unwrap();
        assert_eq!(report["experiment"], kind.name());
        assert_eq!(report["version"], env!("CARGO_PKG_VERSION"));
        assert_eq!(report["config"]["seed"], 42);

        // rerun from the saved config under the other execution policy
        let mut again = ExperimentConfig::load(&first.join("config.toml")).unwrap();
        assert_eq!(again, cfg);
        let second = root.path().join(format!("{}-b", kind.name()));
        again.output = second.clone();
        again.execution = match cfg.execution {
            Execution::Sequential => Execution::Parallel,
            Execution::Parallel => Execution::Sequential,
        };
        run(&again).unwrap().write(&second).unwrap();
        let (a, b) = (tables(&first), tables(&second));
        assert!(!a.is_empty(), "{}", kind.name());
        assert_eq!(a, b, "{} tables differ between runs", kind.name());
    }
}

#[test]
fn stability_grid_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(ExperimentKind::Stability, dir.path());
    let output = run(&cfg).unwrap();
    output.write(dir.path()).unwrap();
    for (raster, summary) in output.rasters.iter().zip(&output.report.rasters) {
        let bytes = fs::read(dir.path().join(format!("{}.grid", summary.file_stem))).unwrap();
        let back = StabilityRaster::read_binary(bytes.as_slice()).unwrap();
        assert_eq!(&back, raster);
    }
    let boundary = fs::read_to_string(dir.path().join("real_axis_boundary.csv")).unwrap();
    assert!(boundary.contains("ees25,-3.0873780"), "{boundary}");
}

#[test]
fn certify_reports_expected_orders() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(ExperimentKind::Certify, dir.path());
    cfg.certify.tableaux = vec!["ees25".into(), "rk4".into()];
    let out = run(&cfg).unwrap();
    let texts: Vec<&str> = out.report.certificates.iter().map(|c| c.text.as_str()).collect();
    assert_eq!(texts[0], "ees25: order 2; symmetric-composition residuals 0 at orders 1..5; nonzero at 6");
    assert!(texts[1].starts_with("rk4: order 4"));
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        "experiment = \"convergence\"\n[convergence]\nhurst = [0.2]\n",
        "solver = \"nope\"\n",
        "x = 0.5\n",
        "unknown_key = 1\n",
        "[gbm]\nmaturities = [0.3]\n",
        "[ou]\nsolvers = [\"alf\"]\n",
    ];
    for text in bad {
        assert!(ExperimentConfig::from_toml(text).is_err(), "{text}");
    }
}
