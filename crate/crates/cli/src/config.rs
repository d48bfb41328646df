//! Experiment configuration: one TOML table per module.
//!
//! Missing keys fall back to the defaults of the configured `problem.kind`, so a file
//! containing only `[problem]\nkind = "diff1d"` is a complete configuration.

use std::path::{Path, PathBuf};

use matern_hyper::forward::ProblemKind;
use matern_hyper::grid::{Boundary, Grid, Spacing};
use matern_hyper::hyper::{HyperFamily, LinkMap};
use matern_hyper::sampler::{ChainConfig, DetRatioMode};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Interp1d,
    Diff1d,
    Interp2d,
    Realize,
}

impl Kind {
    pub fn problem(self) -> Option<ProblemKind> {
        match self {
            Kind::Interp1d => Some(ProblemKind::Interp1d),
            Kind::Diff1d => Some(ProblemKind::Diff1d),
            Kind::Interp2d => Some(ProblemKind::Interp2d),
            Kind::Realize => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Interp1d => "interp1d",
            Kind::Diff1d => "diff1d",
            Kind::Interp2d => "interp2d",
            Kind::Realize => "realize",
        }
    }
}

impl std::str::FromStr for Kind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "interp1d" => Ok(Kind::Interp1d),
            "diff1d" => Ok(Kind::Diff1d),
            "interp2d" => Ok(Kind::Interp2d),
            "realize" => Ok(Kind::Realize),
            _ => Err(format!("unknown problem kind {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub kind: Kind,
    /// Spatial dimension; only read for `realize`, implied by the kind otherwise.
    pub dim: usize,
    /// Unknown nodes per axis.
    pub unknown: usize,
    /// Measurement nodes per axis.
    pub measurements: usize,
    /// Side length of the domain `[0, extent]^d`.
    pub extent: f64,
    pub noise_std: f64,
    pub data_seed: u64,
    pub boundary: Boundary,
    pub spacing: Spacing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    /// `σ` in `(1 - ℓ²Δ) v = σ √(ℓ^d) w`.
    pub sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyName {
    GaussianMatern,
    CauchyWalk,
    CauchyNoise,
    /// Frozen length-scale `hyper.ell`; no hyperprior.
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperConfig {
    pub family: FamilyName,
    pub ell0: f64,
    pub sigma0: f64,
    /// Cauchy scale; the grid spacing when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    pub ell: f64,
    /// The family's default link when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link: Option<LinkMap>,
}

impl HyperConfig {
    pub fn family(&self) -> Option<HyperFamily> {
        match self.family {
            FamilyName::GaussianMatern => Some(HyperFamily::GaussianMatern { ell0: self.ell0, sigma0: self.sigma0 }),
            FamilyName::CauchyWalk => Some(HyperFamily::CauchyWalk { scale: self.scale }),
            FamilyName::CauchyNoise => Some(HyperFamily::CauchyNoise { scale: self.scale }),
            FamilyName::Constant => None,
        }
    }

    pub fn link(&self) -> LinkMap {
        match (self.link, self.family()) {
            (Some(l), _) => l,
            (None, Some(f)) => f.default_link(),
            (None, None) => LinkMap::Exp,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetRatioName {
    Exact,
    Windowed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub initial_scale: f64,
    pub adapt_interval: usize,
    pub adapt_factor: f64,
    pub det_ratio: DetRatioName,
    pub window_radius: usize,
    pub refresh_limit: usize,
    pub trace_nodes: Vec<usize>,
    pub kde_nodes: Vec<usize>,
    pub store_samples: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealizeConfig {
    pub count: usize,
    /// Extra nodes per side as a fraction of the grid, cropped after sampling.
    pub padding: f64,
    /// `ℓ₂ / ℓ₁`; isotropic when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anisotropy: Option<f64>,
    /// Tilt angle in radians for anisotropic realisations.
    pub theta: f64,
    pub dense_covariance: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub ell_min: f64,
    pub ell_max: f64,
    pub count: usize,
    pub long_ell: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub emit_gnuplot: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub prior: PriorConfig,
    pub hyper: HyperConfig,
    pub mcmc: McmcConfig,
    pub realize: RealizeConfig,
    pub baseline: BaselineConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn defaults(kind: Kind) -> Self {
        let (dim, unknown, measurements, extent, noise_std) = match kind {
            Kind::Interp1d => (1, 161, 81, 10.0, 0.1),
            Kind::Diff1d => (1, 201, 101, 10.0, 0.03),
            Kind::Interp2d => (2, 81, 41, 1.0, 0.025),
            Kind::Realize => (1, 400, 400, 10.0, 0.1),
        };
        let family = match kind {
            Kind::Interp1d | Kind::Realize => FamilyName::CauchyWalk,
            Kind::Diff1d | Kind::Interp2d => FamilyName::GaussianMatern,
        };
        let det_ratio = if kind == Kind::Interp2d { DetRatioName::Windowed } else { DetRatioName::Exact };
        Self {
            problem: ProblemConfig {
                kind,
                dim,
                unknown,
                measurements,
                extent,
                noise_std,
                data_seed: 2024,
                boundary: Boundary::Periodic,
                spacing: Spacing::Endpoint,
            },
            prior: PriorConfig { sigma: if dim == 2 { 2.0 * std::f64::consts::PI.sqrt() } else { 2.0 } },
            hyper: HyperConfig {
                family,
                ell0: if dim == 2 { 0.05 } else { 1.0 },
                sigma0: if dim == 2 { 2.0 * std::f64::consts::PI.sqrt() } else { 2.0 },
                scale: None,
                ell: 0.5,
                link: None,
            },
            mcmc: McmcConfig {
                iterations: 10_000,
                burn_in: 5_000,
                thin: 1,
                seed: 1,
                initial_scale: 0.5,
                adapt_interval: 100,
                adapt_factor: 1.5,
                det_ratio,
                window_radius: 1,
                refresh_limit: 8,
                trace_nodes: Vec::new(),
                kde_nodes: Vec::new(),
                store_samples: false,
            },
            realize: RealizeConfig { count: 4, padding: 0.25, anisotropy: None, theta: 0.0, dense_covariance: false },
            baseline: BaselineConfig { ell_min: 0.05, ell_max: 5.0, count: 40, long_ell: 2.0 },
            output: OutputConfig { dir: PathBuf::from("out"), emit_gnuplot: false },
        }
    }

    /// Parses a configuration, filling absent keys from the kind's defaults.
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let user: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let kind = match user.get("problem").and_then(|p| p.get("kind")) {
            None => Kind::Interp1d,
            Some(toml::Value::String(s)) => s
                .parse::<Kind>()
                .map_err(|e| CliError::Config(located(text, "problem", "kind", &e)))?,
            Some(_) => return Err(CliError::Config(located(text, "problem", "kind", "kind must be a string"))),
        };
        let defaults = toml::Table::try_from(Self::defaults(kind)).expect("defaults serialise");
        let mut merged = defaults.clone();
        merge(&mut merged, user);
        let config: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(locate_serde_error(text, &defaults, &e)))?;
        config.validate(text)?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    pub fn dim(&self) -> usize {
        match self.problem.kind {
            Kind::Realize => self.problem.dim,
            k => k.problem().map(|p| p.dim()).unwrap_or(1),
        }
    }

    fn grid_with(&self, n: usize) -> Result<Grid, CliError> {
        let d = self.dim();
        Grid::with_spacing(d, &vec![n; d], &vec![self.problem.extent; d], self.problem.boundary, self.problem.spacing)
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn unknown_grid(&self) -> Result<Grid, CliError> {
        self.grid_with(self.problem.unknown)
    }

    /// Unknown grid with `n` nodes per axis (refinement sweeps).
    pub fn unknown_grid_n(&self, n: usize) -> Result<Grid, CliError> {
        self.grid_with(n)
    }

    pub fn measurement_grid(&self) -> Result<Grid, CliError> {
        self.grid_with(self.problem.measurements)
    }

    pub fn chain_config(&self, seed: u64) -> ChainConfig {
        let m = &self.mcmc;
        let mut trace_nodes = m.trace_nodes.clone();
        for &n in &m.kde_nodes {
            if !trace_nodes.contains(&n) {
                trace_nodes.push(n);
            }
        }
        ChainConfig {
            iterations: m.iterations,
            burn_in: m.burn_in,
            thin: m.thin,
            seed,
            prior_sigma: self.prior.sigma,
            initial_scale: m.initial_scale,
            adapt_interval: m.adapt_interval,
            adapt_factor: m.adapt_factor,
            det_ratio: match m.det_ratio {
                DetRatioName::Exact => DetRatioMode::Exact,
                DetRatioName::Windowed => DetRatioMode::Windowed { radius: m.window_radius },
            },
            refresh_limit: m.refresh_limit,
            trace_nodes,
            store_samples: m.store_samples,
        }
    }

    /// Validates without source text, e.g. after command-line overrides.
    pub fn check(&self) -> Result<(), CliError> {
        self.validate("")
    }

    fn validate(&self, text: &str) -> Result<(), CliError> {
        let err = |section: &str, key: &str, msg: String| Err(CliError::Config(located(text, section, key, &msg)));
        let p = &self.problem;
        if p.kind == Kind::Realize && !(p.dim == 1 || p.dim == 2) {
            return err("problem", "dim", format!("dim must be 1 or 2, got {}", p.dim));
        }
        if p.unknown < 3 {
            return err("problem", "unknown", format!("need at least 3 unknown nodes, got {}", p.unknown));
        }
        if p.measurements == 0 || (p.kind != Kind::Realize && p.measurements > p.unknown) {
            return err("problem", "measurements", format!("need 1..=unknown measurements, got {}", p.measurements));
        }
        if !(p.extent > 0.0 && p.extent.is_finite()) {
            return err("problem", "extent", format!("extent must be positive, got {}", p.extent));
        }
        if !(p.noise_std > 0.0 && p.noise_std.is_finite()) {
            return err("problem", "noise_std", format!("noise_std must be positive, got {}", p.noise_std));
        }
        if p.kind == Kind::Diff1d && p.noise_std > 0.1 {
            return err(
                "problem",
                "noise_std",
                format!("differentiation needs noise_std <= 0.1, got {}", p.noise_std),
            );
        }
        if !(self.prior.sigma > 0.0 && self.prior.sigma.is_finite()) {
            return err("prior", "sigma", format!("sigma must be positive, got {}", self.prior.sigma));
        }
        let h = &self.hyper;
        for (key, v) in [("ell0", h.ell0), ("sigma0", h.sigma0), ("ell", h.ell)] {
            if !(v > 0.0 && v.is_finite()) {
                return err("hyper", key, format!("{key} must be positive, got {v}"));
            }
        }
        if let Some(s) = h.scale {
            if !(s > 0.0 && s.is_finite()) {
                return err("hyper", "scale", format!("scale must be positive, got {s}"));
            }
        }
        if let Err(e) = h.link().validate() {
            return err("hyper.link", "kind", e.to_string());
        }
        if h.family == FamilyName::CauchyWalk && self.dim() != 1 {
            return err("hyper", "family", "the Cauchy walk needs a 1-D problem".into());
        }
        let m = &self.mcmc;
        if m.iterations <= m.burn_in {
            return err(
                "mcmc",
                "iterations",
                format!("iterations ({}) must exceed burn_in ({})", m.iterations, m.burn_in),
            );
        }
        for (key, v) in [("thin", m.thin), ("adapt_interval", m.adapt_interval), ("refresh_limit", m.refresh_limit)] {
            if v == 0 {
                return err("mcmc", key, format!("{key} must be positive"));
            }
        }
        if m.det_ratio == DetRatioName::Windowed && m.window_radius == 0 {
            return err("mcmc", "window_radius", "window_radius must be at least 1".into());
        }
        if !(m.adapt_factor > 1.0) {
            return err("mcmc", "adapt_factor", format!("adapt_factor must exceed 1, got {}", m.adapt_factor));
        }
        if !(m.initial_scale > 0.0) {
            return err("mcmc", "initial_scale", format!("initial_scale must be positive, got {}", m.initial_scale));
        }
        let n = p.unknown.pow(self.dim() as u32);
        for (key, nodes) in [("trace_nodes", &m.trace_nodes), ("kde_nodes", &m.kde_nodes)] {
            if let Some(&bad) = nodes.iter().find(|&&i| i >= n) {
                return err("mcmc", key, format!("node {bad} out of range for {n} unknowns"));
            }
        }
        let r = &self.realize;
        if !(0.0..=2.0).contains(&r.padding) {
            return err("realize", "padding", format!("padding must lie in [0, 2], got {}", r.padding));
        }
        if let Some(a) = r.anisotropy {
            if !(a > 0.0 && a.is_finite()) {
                return err("realize", "anisotropy", format!("anisotropy must be positive, got {a}"));
            }
        }
        let b = &self.baseline;
        if !(b.ell_min > 0.0 && b.ell_max > b.ell_min && b.count >= 1 && b.long_ell > 0.0) {
            return err("baseline", "ell_min", "need 0 < ell_min < ell_max, count >= 1, long_ell > 0".into());
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) if k != "link" => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Line of `key = ...` inside `[section]`, if present.
pub fn find_line(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            current = name.trim().to_string();
            continue;
        }
        if current == section {
            if let Some((k, _)) = t.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

fn located(text: &str, section: &str, key: &str, msg: &str) -> String {
    match find_line(text, section, key) {
        Some(line) => format!("line {line}: {section}.{key}: {msg}"),
        None => format!("{section}.{key}: {msg}"),
    }
}

/// Finds the offending key by applying each user entry to the defaults on its own.
fn locate_serde_error(text: &str, defaults: &toml::Table, merged_error: &toml::de::Error) -> String {
    let message = merged_error.message().to_string();
    let Ok(doc) = text.parse::<toml::Table>() else {
        return message;
    };
    for (section, value) in &doc {
        let (Some(toml::Value::Table(base)), toml::Value::Table(table)) = (defaults.get(section), value) else {
            return located(text, section, "", &format!("unknown or malformed section: {message}"));
        };
        for (key, v) in table {
            let mut candidate = defaults.clone();
            let mut section_table = base.clone();
            section_table.insert(key.clone(), v.clone());
            candidate.insert(section.clone(), toml::Value::Table(section_table));
            if let Err(e) = candidate.try_into::<ExperimentConfig>() {
                let msg = e.message().to_string();
                return match find_line(text, section, key).or_else(|| find_header(text, &format!("{section}.{key}"))) {
                    Some(line) => format!("line {line}: {section}.{key}: {msg}"),
                    None => format!("{section}.{key}: {msg}"),
                };
            }
        }
    }
    message
}

fn find_header(text: &str, name: &str) -> Option<usize> {
    text.lines().position(|l| l.trim() == format!("[{name}]")).map(|i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        for kind in [Kind::Interp1d, Kind::Diff1d, Kind::Interp2d, Kind::Realize] {
            let d = ExperimentConfig::defaults(kind);
            let text = d.to_toml_string();
            assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), d);
        }
    }

    #[test]
    fn kind_selects_defaults() {
        let c = ExperimentConfig::from_toml_str("[problem]\nkind = \"diff1d\"\n").unwrap();
        assert_eq!(c.problem.measurements, 101);
        assert_eq!(c.problem.noise_std, 0.03);
        let c = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(c.problem.unknown, 161);
        assert_eq!(c.problem.measurements, 81);
        assert_eq!(c.problem.noise_std, 0.1);
        let c = ExperimentConfig::from_toml_str("[problem]\nkind = \"interp2d\"\n").unwrap();
        assert_eq!(c.problem.measurements, 41);
        assert_eq!(c.problem.noise_std, 0.025);
        assert_eq!(c.mcmc.det_ratio, DetRatioName::Windowed);
    }

    #[test]
    fn partial_tables_keep_other_defaults() {
        let c = ExperimentConfig::from_toml_str("[mcmc]\nseed = 9\n").unwrap();
        assert_eq!(c.mcmc.seed, 9);
        assert_eq!(c.mcmc.iterations, 10_000);
    }

    #[test]
    fn link_table_replaces_wholesale() {
        let text = "[hyper]\nfamily = \"gaussian_matern\"\n[hyper.link]\nkind = \"exp\"\n";
        let c = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(c.hyper.link(), LinkMap::Exp);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "[problem]\nkind = \"interp1d\"\nnoise_std = -1.0\n";
        let e = ExperimentConfig::from_toml_str(text).unwrap_err().to_string();
        assert!(e.contains("line 3"), "{e}");
        let text = "[mcmc]\n\niterations = 10\nburn_in = 20\n";
        let e = ExperimentConfig::from_toml_str(text).unwrap_err().to_string();
        assert!(e.contains("line 3"), "{e}");
        let text = "[mcmc]\nseed = \"x\"\n";
        let e = ExperimentConfig::from_toml_str(text).unwrap_err().to_string();
        assert!(e.contains("line 2"), "{e}");
        let text = "[mcmc]\nseed = 2\nbogus = 1\n";
        let e = ExperimentConfig::from_toml_str(text).unwrap_err().to_string();
        assert!(e.contains("line 3"), "{e}");
        let text = "[hyper]\n[hyper.link]\nkind = \"nope\"\n";
        let e = ExperimentConfig::from_toml_str(text).unwrap_err().to_string();
        assert!(e.contains("line 2"), "{e}");
    }

    #[test]
    fn differentiation_noise_floor() {
        let text = "[problem]\nkind = \"diff1d\"\nnoise_std = 0.2\n";
        assert!(ExperimentConfig::from_toml_str(text).is_err());
    }

    #[test]
    fn walk_rejected_in_two_dimensions() {
        let text = "[problem]\nkind = \"interp2d\"\n[hyper]\nfamily = \"cauchy_walk\"\n";
        assert!(ExperimentConfig::from_toml_str(text).is_err());
    }

    #[test]
    fn kde_nodes_are_traced() {
        let mut c = ExperimentConfig::defaults(Kind::Interp1d);
        c.mcmc.trace_nodes = vec![15];
        c.mcmc.kde_nodes = vec![15, 129];
        assert_eq!(c.chain_config(3).trace_nodes, vec![15, 129]);
    }
}
