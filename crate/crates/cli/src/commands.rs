//! The five subcommands. Each returns the manifest it wrote.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;
use std::time::Instant;

use matern_hyper::forward::{grid_points, phantom, Measurements, ProblemKind};
use matern_hyper::grid::{Field, Grid};
use matern_hyper::hyper::HyperModel;
use matern_hyper::kde::kde;
use matern_hyper::oracle::{self, BaselineTable};
use matern_hyper::sampler::{run_chain, run_fixed_chain, ChainOutput};
use matern_hyper::spde::{sample_realization_with, AnisoSpec, PrecisionFactor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, Kind};
use crate::gnuplot;
use crate::output::{AcceptanceSummary, ErrorSummary, OutputDir, RunManifest};
use crate::{CliError, Result};

/// Band used for the acceptance summary in manifests.
pub const ACCEPTANCE_BAND: (f64, f64) = (0.20, 0.55);

const KDE_POINTS: usize = 512;

fn problem_kind(cfg: &ExperimentConfig) -> Result<ProblemKind> {
    cfg.problem.kind.problem().ok_or_else(|| {
        CliError::Config(format!("command needs an inverse-problem kind, got {}", cfg.problem.kind.name()))
    })
}

/// Measurements from `data/measurements.csv`, or synthesised from the phantom.
pub fn load_measurements(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<Measurements> {
    let kind = problem_kind(cfg)?;
    match data {
        Some(dir) => {
            let path = dir.join("measurements.csv");
            let file = File::open(&path)
                .map_err(|e| CliError::Config(format!("cannot open {}: {e}", path.display())))?;
            Ok(Measurements::read_csv(kind, cfg.problem.noise_std, BufReader::new(file))?)
        }
        None => {
            let points = grid_points(&cfg.measurement_grid()?);
            Ok(Measurements::synthesize(kind, points, cfg.problem.noise_std, cfg.problem.data_seed))
        }
    }
}

pub fn truth(kind: ProblemKind, grid: &Grid) -> Field {
    Field::from_fn(*grid, |p| phantom(kind, p))
}

fn write_field(out: &mut OutputDir, name: &str, field: &Field) -> Result<()> {
    out.write(name, |w| Ok(field.write_csv(w)?))
}

fn finish(mut manifest: RunManifest, out: &OutputDir, started: Instant) -> Result<RunManifest> {
    manifest.files = out.files().to_vec();
    manifest.runtime_seconds = started.elapsed().as_secs_f64();
    manifest.write_atomic(out.root())?;
    Ok(manifest)
}

pub fn make_data(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let started = Instant::now();
    let kind = problem_kind(cfg)?;
    let grid = cfg.unknown_grid()?;
    let meas = load_measurements(cfg, None)?;
    // Rejects measurement grids that do not sit on the unknown grid.
    meas.problem(&grid)?;
    let mut out = OutputDir::create(&cfg.output.dir)?;
    write_field(&mut out, "truth.csv", &truth(kind, &grid))?;
    out.write("measurements.csv", |w| Ok(meas.write_csv(w)?))?;
    if cfg.output.emit_gnuplot {
        out.write("make_data.gp", |w| Ok(w.write_all(gnuplot::make_data(cfg.dim()).as_bytes())?))?;
    }
    finish(RunManifest::new("make-data", cfg, started), &out, started)
}

fn acceptance_summary(chain: &ChainOutput) -> Option<AcceptanceSummary> {
    let rates: Vec<f64> = chain.acceptance.iter().flatten().copied().collect();
    if rates.is_empty() {
        return None;
    }
    Some(AcceptanceSummary {
        mean: rates.iter().sum::<f64>() / rates.len() as f64,
        min: rates.iter().copied().fold(f64::INFINITY, f64::min),
        max: rates.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        fraction_in_band: chain.acceptance_fraction_within(ACCEPTANCE_BAND.0, ACCEPTANCE_BAND.1),
        non_finite_proposals: chain.non_finite,
    })
}

/// `index,x[,y],mean,lower,upper` with `mean ± k·std`.
fn write_errorbars<W: Write>(mut w: W, grid: &Grid, mean: &[f64], std: &[f64], k: f64) -> Result<()> {
    if grid.dim() == 1 {
        writeln!(w, "index,x,mean,lower,upper")?;
    } else {
        writeln!(w, "index,x,y,mean,lower,upper")?;
    }
    for i in 0..grid.len() {
        let p = grid.position(i);
        if grid.dim() == 1 {
            write!(w, "{i},{},", p[0])?;
        } else {
            write!(w, "{i},{},{},", p[0], p[1])?;
        }
        writeln!(w, "{},{},{}", mean[i], mean[i] - k * std[i], mean[i] + k * std[i])?;
    }
    Ok(())
}

/// One inversion at `cfg.problem.unknown` nodes per axis, written below `out`.
fn invert_one(
    cfg: &ExperimentConfig,
    meas: &Measurements,
    seed: u64,
    out: &mut OutputDir,
) -> Result<(ChainOutput, Field)> {
    let kind = problem_kind(cfg)?;
    let grid = cfg.unknown_grid()?;
    let problem = meas.problem(&grid)?;
    let chain_cfg = cfg.chain_config(seed);
    let result = match cfg.hyper.family() {
        Some(family) => {
            let hyper = HyperModel::new(&grid, family, cfg.hyper.link())?;
            run_chain(&problem, &hyper, &chain_cfg)
        }
        None => run_fixed_chain(&problem, &Field::constant(grid, cfg.hyper.ell), &chain_cfg),
    };
    let chain = match result {
        Ok(c) => c,
        Err(e) => {
            let err = CliError::from(e);
            if let CliError::Numerical(msg) = &err {
                let dump = serde_json::json!({ "error": msg, "seed": seed, "config": cfg });
                out.write("failure.json", |w| {
                    serde_json::to_writer_pretty(&mut *w, &dump).map_err(std::io::Error::other)?;
                    Ok(writeln!(w)?)
                })?;
            }
            return Err(err);
        }
    };
    let truth = truth(kind, &grid);
    write_field(out, "truth.csv", &truth)?;
    out.write("measurements.csv", |w| Ok(meas.write_csv(w)?))?;
    out.write("estimates.csv", |w| Ok(chain.write_estimates_csv(w)?))?;
    out.write("v_errorbars.csv", |w| write_errorbars(w, &grid, &chain.v_mean, &chain.v_std, 3.0))?;
    out.write("ell_errorbars.csv", |w| write_errorbars(w, &grid, &chain.ell_mean, &chain.ell_std, 1.0))?;
    if !chain.traces.is_empty() {
        out.write("traces.csv", |w| Ok(chain.write_traces_csv(w)?))?;
    }
    for &node in &cfg.mcmc.kde_nodes {
        let trace = chain.trace(node).expect("kde nodes are traced");
        let samples = trace.post_burn_in_v(cfg.mcmc.burn_in, cfg.mcmc.thin);
        let density = kde(&samples, None, KDE_POINTS)?;
        out.write(&format!("kde_node{node}.csv"), |w| Ok(density.write_csv(w)?))?;
    }
    if cfg.mcmc.store_samples {
        out.write("samples_v.csv", |w| Ok(chain.write_samples_csv(w, false)?))?;
        out.write("samples_ell.csv", |w| Ok(chain.write_samples_csv(w, true)?))?;
    }
    if cfg.output.emit_gnuplot {
        let script = gnuplot::invert(cfg.dim(), !chain.traces.is_empty(), &cfg.mcmc.kde_nodes);
        out.write("invert.gp", |w| Ok(w.write_all(script.as_bytes())?))?;
    }
    Ok((chain, truth))
}

fn chain_manifest(cfg: &ExperimentConfig, seed: u64, chain: &ChainOutput, truth: &Field, started: Instant) -> Result<RunManifest> {
    let mut m = RunManifest::new("invert", cfg, started);
    m.seed = seed;
    m.acceptance = acceptance_summary(chain);
    let metrics = oracle::metrics(&chain.v_mean, truth.values())?;
    m.error = Some(ErrorSummary { rmse: metrics.rmse, max_abs_error: metrics.max_abs_error });
    Ok(m)
}

/// Relative `L²` distance of `a` from `b` after interpolating both onto `target`.
pub fn relative_l2(a: &Field, b: &Field, target: &Grid) -> Result<f64> {
    let a = a.interpolate_to(target)?;
    let b = b.interpolate_to(target)?;
    let num: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.values().iter().map(|y| y * y).sum();
    Ok((num / den).sqrt())
}

/// Runs the chain; with `refine`, one chain per unknown-grid size on the shared data,
/// concurrently, seeded `seed + N`, each in `N{n}/`.
pub fn invert(cfg: &ExperimentConfig, data: Option<&Path>, refine: Option<&[usize]>) -> Result<RunManifest> {
    let started = Instant::now();
    let meas = load_measurements(cfg, data)?;
    let mut out = OutputDir::create(&cfg.output.dir)?;
    let Some(sizes) = refine else {
        let (chain, truth) = invert_one(cfg, &meas, cfg.mcmc.seed, &mut out)?;
        let m = chain_manifest(cfg, cfg.mcmc.seed, &chain, &truth, started)?;
        return finish(m, &out, started);
    };
    if sizes.len() < 2 {
        return Err(CliError::Config("refinement needs at least two grid sizes".into()));
    }
    let mut subs = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let mut sub = cfg.clone();
        sub.problem.unknown = n;
        let total = n.pow(cfg.dim() as u32);
        sub.mcmc.trace_nodes.retain(|&i| i < total);
        sub.mcmc.kde_nodes.retain(|&i| i < total);
        sub.output.dir = cfg.output.dir.join(format!("N{n}"));
        // Surfaces grid mismatches before any chain starts.
        meas.problem(&sub.unknown_grid()?)?;
        subs.push(sub);
    }
    let results: Vec<Result<(Field, Vec<String>)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = subs
            .iter()
            .map(|sub| {
                let meas = &meas;
                scope.spawn(move || -> Result<(Field, Vec<String>)> {
                    let seed = sub.mcmc.seed + sub.problem.unknown as u64;
                    let sub_started = Instant::now();
                    let mut sub_out = OutputDir::create(&sub.output.dir)?;
                    let (chain, truth) = invert_one(sub, meas, seed, &mut sub_out)?;
                    let m = chain_manifest(sub, seed, &chain, &truth, sub_started)?;
                    finish(m, &sub_out, sub_started)?;
                    let prefix = format!("N{}", sub.problem.unknown);
                    let mut files: Vec<String> = sub_out.files().iter().map(|f| format!("{prefix}/{f}")).collect();
                    files.push(format!("{prefix}/manifest.json"));
                    Ok((chain.cm_v(), files))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("inversion thread panicked")).collect()
    });
    let mut cms = Vec::with_capacity(results.len());
    for r in results {
        let (cm, files) = r?;
        for f in files {
            out.record(f);
        }
        cms.push(cm);
    }
    let finest = *cms.iter().max_by_key(|f| f.len()).expect("non-empty").grid();
    let mut rows = Vec::new();
    for (i, pair) in cms.windows(2).enumerate() {
        rows.push((sizes[i], sizes[i + 1], relative_l2(&pair[0], &pair[1], &finest)?));
    }
    out.write("refinement.csv", |w| {
        writeln!(w, "n_coarse,n_fine,rel_l2")?;
        for (a, b, d) in &rows {
            writeln!(w, "{a},{b},{d}")?;
        }
        Ok(())
    })?;
    finish(RunManifest::new("invert", cfg, started), &out, started)
}

/// Node indices of the configured grid inside a grid padded by `pad` nodes per side.
fn crop_indices(grid: &Grid, padded: &Grid, pad: usize) -> Vec<usize> {
    (0..grid.len())
        .map(|i| {
            let (ix, iy) = grid.coords(i);
            if grid.dim() == 1 {
                ix + pad
            } else {
                padded.index(ix + pad, iy + pad)
            }
        })
        .collect()
}

fn crop(values: &[f64], grid: &Grid, idx: &[usize]) -> Field {
    Field::new(*grid, idx.iter().map(|&i| values[i]).collect()).expect("crop matches grid")
}

pub fn realize(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let started = Instant::now();
    if cfg.problem.kind != Kind::Realize {
        return Err(CliError::Config(format!("realize needs problem.kind = \"realize\", got {}", cfg.problem.kind.name())));
    }
    let dim = cfg.dim();
    if cfg.realize.anisotropy.is_some() && dim != 2 {
        return Err(CliError::Config("anisotropic realisations need dim = 2".into()));
    }
    let grid = cfg.unknown_grid()?;
    let n = cfg.problem.unknown;
    let pad = (cfg.realize.padding * n as f64).round() as usize;
    let padded = Grid::with_spacing(
        dim,
        &vec![n + 2 * pad; dim],
        &vec![cfg.problem.extent + 2.0 * pad as f64 * grid.h(); dim],
        cfg.problem.boundary,
        cfg.problem.spacing,
    )?;
    let idx = crop_indices(&grid, &padded, pad);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.mcmc.seed);
    let (u, ell) = match cfg.hyper.family() {
        Some(family) => {
            let hyper = HyperModel::new(&padded, family, cfg.hyper.link())?;
            let u = hyper.sample(&mut rng)?;
            let ell = hyper.apply_link(&u);
            (Some(u), ell)
        }
        None => (None, Field::constant(padded, cfg.hyper.ell)),
    };
    let factor = match cfg.realize.anisotropy {
        Some(ratio) => {
            let ell2 = Field::new(padded, ell.values().iter().map(|l| l * ratio).collect())?;
            let theta = Field::constant(padded, cfg.realize.theta);
            PrecisionFactor::assemble_anisotropic(&padded, &AnisoSpec { ell1: ell.clone(), ell2, theta }, cfg.prior.sigma)?
        }
        None => PrecisionFactor::assemble(&padded, &ell, cfg.prior.sigma)?,
    };
    let lu = factor.lu()?;
    let mut out = OutputDir::create(&cfg.output.dir)?;
    if let Some(u) = &u {
        write_field(&mut out, "u.csv", &crop(u.values(), &grid, &idx))?;
    }
    write_field(&mut out, "ell.csv", &crop(ell.values(), &grid, &idx))?;
    for k in 0..cfg.realize.count {
        let v = sample_realization_with(&factor, &lu, &mut rng)?;
        write_field(&mut out, &format!("realization_{k}.csv"), &crop(v.values(), &grid, &idx))?;
    }
    if cfg.realize.dense_covariance {
        let cov = oracle::dense_covariance(&factor)?;
        out.write("covariance.csv", |w| {
            for &i in &idx {
                let row: Vec<String> = idx.iter().map(|&j| cov[(i, j)].to_string()).collect();
                writeln!(w, "{}", row.join(","))?;
            }
            Ok(())
        })?;
    }
    if cfg.output.emit_gnuplot {
        let script = gnuplot::realize(dim, cfg.realize.count, u.is_some());
        out.write("realize.gp", |w| Ok(w.write_all(script.as_bytes())?))?;
    }
    finish(RunManifest::new("realize", cfg, started), &out, started)
}

/// `ell,max_abs_error,rmse,min_rmse,min_max_abs`, flagging the minimiser rows.
pub fn write_baseline_table<W: Write>(mut w: W, table: &BaselineTable) -> Result<()> {
    let best_rmse = table.best_rmse();
    let best_mae = table.best_max_abs();
    writeln!(w, "ell,max_abs_error,rmse,min_rmse,min_max_abs")?;
    for r in &table.rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.ell,
            r.max_abs_error,
            r.rmse,
            u8::from(*r == best_rmse),
            u8::from(*r == best_mae)
        )?;
    }
    Ok(())
}

pub fn baseline(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<RunManifest> {
    let started = Instant::now();
    let kind = problem_kind(cfg)?;
    let grid = cfg.unknown_grid()?;
    let meas = load_measurements(cfg, data)?;
    let problem = meas.problem(&grid)?;
    let truth = truth(kind, &grid);
    let b = &cfg.baseline;
    let ells = oracle::log_space(b.ell_min, b.ell_max, b.count);
    let table = oracle::constant_ell_baseline(&problem, cfg.prior.sigma, &ells, truth.values())?;
    let mut out = OutputDir::create(&cfg.output.dir)?;
    write_field(&mut out, "truth.csv", &truth)?;
    out.write("baseline.csv", |w| write_baseline_table(w, &table))?;
    for (name, ell) in [
        ("estimate_min_rmse.csv", table.best_rmse().ell),
        ("estimate_min_max_abs.csv", table.best_max_abs().ell),
        ("estimate_long_ell.csv", b.long_ell),
    ] {
        let est = Field::new(grid, oracle::constant_ell_estimate(&problem, cfg.prior.sigma, ell)?)?;
        write_field(&mut out, name, &est)?;
    }
    if cfg.output.emit_gnuplot {
        out.write("baseline.gp", |w| Ok(w.write_all(gnuplot::baseline(cfg.dim()).as_bytes())?))?;
    }
    let mut m = RunManifest::new("baseline", cfg, started);
    let best = table.best_rmse();
    m.error = Some(ErrorSummary { rmse: best.rmse, max_abs_error: best.max_abs_error });
    finish(m, &out, started)
}

/// The full default configuration for `kind`, as TOML.
pub fn defaults(kind: Kind) -> String {
    ExperimentConfig::defaults(kind).to_toml_string()
}
