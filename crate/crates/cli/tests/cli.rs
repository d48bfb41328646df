use std::fs;
use std::io::BufReader;
use std::path::Path;
use std::process::{Command, Output};

use matern_cli::commands;
use matern_cli::config::ExperimentConfig;
use matern_hyper::grid::{Boundary, Field, Grid, Spacing};
use matern_hyper::oracle;
use proptest::prelude::*;

fn matern(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_matern")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL: &str = "[problem]\nunknown = 41\nmeasurements = 21\n\n[hyper]\nfamily = \"constant\"\nell = 1.0\n\n[mcmc]\niterations = 6000\nburn_in = 1000\n";

#[test]
fn defaults_parse_back_for_every_kind() {
    for kind in ["interp1d", "diff1d", "interp2d", "realize"] {
        let o = matern(&["defaults", "--kind", kind]);
        assert!(o.status.success(), "{}", stderr(&o));
        let text = String::from_utf8(o.stdout).unwrap();
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg.problem.kind.name(), kind);
    }
}

#[test]
fn bad_config_exits_with_code_two_and_a_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[mcmc]\niterations = 100\nburn_in = \"many\"\n");
    let o = matern(&["invert", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn make_data_writes_its_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = matern(&["make-data", "--out", out.to_str().unwrap(), "--emit-gnuplot"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["truth.csv", "measurements.csv", "make_data.gp", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let meas = fs::read_to_string(out.join("measurements.csv")).unwrap();
    assert_eq!(meas.lines().count(), 82);
}

#[test]
fn anisotropy_in_one_dimension_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[problem]\nkind = \"realize\"\n\n[realize]\nanisotropy = 3.0\n");
    let o = matern(&["realize", "--config", &cfg, "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn missing_data_directory_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let o = matern(&["invert", "--data", missing.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_flag_is_rejected() {
    let o = matern(&["invert", "--no-such-flag"]);
    assert!(!o.status.success());
}

#[test]
fn constant_ell_chain_matches_the_closed_form_mean() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let cfg_path = write_config(dir.path(), SMALL);
    let o = matern(&["invert", "--config", &cfg_path, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let cfg = ExperimentConfig::load(Path::new(&cfg_path)).unwrap();
    let meas = commands::load_measurements(&cfg, None).unwrap();
    let problem = meas.problem(&cfg.unknown_grid().unwrap()).unwrap();
    let exact = oracle::constant_ell_estimate(&problem, cfg.prior.sigma, 1.0).unwrap();

    let n_samples = (cfg.mcmc.iterations - cfg.mcmc.burn_in) as f64;
    let text = fs::read_to_string(out.join("estimates.csv")).unwrap();
    for (row, want) in text.lines().skip(1).zip(&exact) {
        let cols: Vec<f64> = row.split(',').take(4).map(|c| c.parse().unwrap()).collect();
        let (mean, std) = (cols[2], cols[3]);
        let se = std / n_samples.sqrt();
        assert!((mean - want).abs() < 5.0 * se, "node {}: {mean} vs {want}, se {se}", cols[0]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn field_csv_round_trip_is_byte_identical(
        values in proptest::collection::vec(-1e6f64..1e6, 12),
        two_d in any::<bool>(),
    ) {
        let grid = if two_d {
            Grid::new(2, &[3, 4], &[3.0, 4.0], Boundary::Periodic).unwrap()
        } else {
            Grid::with_spacing(1, &[12], &[10.0], Boundary::Periodic, Spacing::Endpoint).unwrap()
        };
        let field = Field::new(grid, values).unwrap();
        let mut first = Vec::new();
        field.write_csv(&mut first).unwrap();
        let back = Field::read_csv(grid, BufReader::new(first.as_slice())).unwrap();
        let mut second = Vec::new();
        back.write_csv(&mut second).unwrap();
        prop_assert_eq!(&first, &second);
        prop_assert_eq!(back.values(), field.values());
    }
}
