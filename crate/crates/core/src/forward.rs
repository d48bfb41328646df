//! Linear forward operators, phantoms and synthetic data.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Boundary, Field, Grid, Spacing};
use crate::spde::standard_normals;
use crate::sparse::CsrMatrix;

/// `y = A v + σ_e e`, `e ~ N(0, I)`, with `v` living on `unknown_grid`.
#[derive(Clone, Debug)]
pub struct ForwardProblem {
    pub unknown_grid: Grid,
    pub a: CsrMatrix,
    pub noise_std: f64,
    pub y: Vec<f64>,
}

impl ForwardProblem {
    pub fn new(unknown_grid: Grid, a: CsrMatrix, noise_std: f64, y: Vec<f64>) -> Result<Self> {
        if a.ncols() != unknown_grid.len() {
            return Err(Error::GridMismatch(format!(
                "operator has {} columns, grid has {} nodes",
                a.ncols(),
                unknown_grid.len()
            )));
        }
        if a.nrows() != y.len() {
            return Err(Error::GridMismatch(format!(
                "operator has {} rows, data has {} entries",
                a.nrows(),
                y.len()
            )));
        }
        if !(noise_std > 0.0 && noise_std.is_finite()) {
            return Err(Error::InvalidParameter(format!("noise std must be positive, got {noise_std}")));
        }
        Ok(Self { unknown_grid, a, noise_std, y })
    }
}

/// Problem families shipped with the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Interp1d,
    Diff1d,
    Interp2d,
}

impl ProblemKind {
    pub fn dim(self) -> usize {
        match self {
            ProblemKind::Interp2d => 2,
            _ => 1,
        }
    }
}

fn snap(grid: &Grid, x: f64, axis: usize) -> Result<usize> {
    let n = grid.n_axis(axis);
    let t = (x - grid.origin(axis)) / grid.h();
    let k = t.round();
    if (t - k).abs() > 1e-8 {
        return Err(Error::GridMismatch(format!("point {x} is not a node of the unknown grid")));
    }
    let k = k as i64;
    let wrapped = if grid.boundary() == Boundary::Periodic && grid.spacing() == Spacing::Cell {
        k.rem_euclid(n as i64)
    } else {
        k
    };
    if wrapped < 0 || wrapped >= n as i64 {
        return Err(Error::GridMismatch(format!("point {x} lies outside the unknown grid")));
    }
    Ok(wrapped as usize)
}

/// Point-evaluation operator selecting the unknown nodes that coincide with `points`.
pub fn interp_operator(unknown: &Grid, points: &[[f64; 2]]) -> Result<CsrMatrix> {
    let rows = points
        .iter()
        .map(|p| {
            let ix = snap(unknown, p[0], 0)?;
            let iy = if unknown.dim() == 2 { snap(unknown, p[1], 1)? } else { 0 };
            Ok(vec![(unknown.index(ix, iy), 1.0)])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CsrMatrix::from_rows(unknown.len(), rows))
}

/// Quadrature for `∫_0^{t_j} v(x) dx`: weight `h` for `x_i < t_j`, `h/2` for `x_i = t_j`.
pub fn heaviside_operator(unknown: &Grid, points: &[f64]) -> Result<CsrMatrix> {
    if unknown.dim() != 1 {
        return Err(Error::InvalidParameter("integration operator is one-dimensional".into()));
    }
    let h = unknown.h();
    let tol = 1e-9 * h;
    let rows = points
        .iter()
        .map(|&t| {
            (0..unknown.len())
                .filter_map(|i| {
                    let x = unknown.position(i)[0];
                    if x < t - tol {
                        Some((i, h))
                    } else if (x - t).abs() <= tol {
                        Some((i, h / 2.0))
                    } else {
                        None
                    }
                })
                .collect()
        })
        .collect();
    Ok(CsrMatrix::from_rows(unknown.len(), rows))
}

fn mollifier(x: f64) -> f64 {
    if x > 0.0 && x < 5.0 {
        (4.0 - 25.0 / (x * (5.0 - x))).exp()
    } else {
        0.0
    }
}

fn boxcars(x: f64) -> f64 {
    if (7.0..=8.0).contains(&x) {
        1.0
    } else if x > 8.0 && x <= 9.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mollifier on `(0, 5)` plus boxcars `+1` on `[7, 8]` and `-1` on `(8, 9]`.
pub fn phantom_interp_1d(x: f64) -> f64 {
    mollifier(x) + boxcars(x)
}

/// Derivative of [`phantom_diff_integral`]: differentiated mollifier plus the same boxcars.
pub fn phantom_diff_1d(x: f64) -> f64 {
    let dm = if x > 0.0 && x < 5.0 {
        mollifier(x) * (25.0 / (x * x * (5.0 - x)) - 25.0 / (x * (5.0 - x).powi(2)))
    } else {
        0.0
    };
    dm + boxcars(x)
}

/// Mollifier plus a triangle peaking at `x = 8`.
pub fn phantom_diff_integral(x: f64) -> f64 {
    let tri = if (7.0..=8.0).contains(&x) {
        x - 7.0
    } else if x > 8.0 && x <= 9.0 {
        9.0 - x
    } else {
        0.0
    };
    mollifier(x) + tri
}

/// Box of height 0.75 on `[0.15, 0.4]²` plus a Gaussian bump centred at `(0.65, 0.65)`.
pub fn phantom_2d(p: [f64; 2]) -> f64 {
    let inside = (0.15..=0.4).contains(&p[0]) && (0.15..=0.4).contains(&p[1]);
    let box_part = if inside { 0.75 } else { 0.0 };
    let r2 = (p[0] - 0.65).powi(2) + (p[1] - 0.65).powi(2);
    box_part + (-r2 / (2.0 * 0.12 * 0.12)).exp()
}

pub fn phantom(kind: ProblemKind, p: [f64; 2]) -> f64 {
    match kind {
        ProblemKind::Interp1d => phantom_interp_1d(p[0]),
        ProblemKind::Diff1d => phantom_diff_1d(p[0]),
        ProblemKind::Interp2d => phantom_2d(p),
    }
}

/// `clean + σ_e ξ` with `ξ` drawn from a ChaCha8 stream seeded by `seed`.
pub fn add_noise(clean: &[f64], noise_std: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xi = standard_normals(clean.len(), &mut rng);
    clean.iter().zip(xi).map(|(c, e)| c + noise_std * e).collect()
}

/// `y = A·truth + σ_e ξ`.
pub fn synth_data(a: &CsrMatrix, truth: &Field, noise_std: f64, seed: u64) -> Result<Vec<f64>> {
    if a.ncols() != truth.len() {
        return Err(Error::GridMismatch("operator and truth sizes differ".into()));
    }
    Ok(add_noise(&a.matvec(truth.values()), noise_std, seed))
}

/// Measurement locations and noisy values.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurements {
    pub kind: ProblemKind,
    pub points: Vec<[f64; 2]>,
    pub y: Vec<f64>,
    pub noise_std: f64,
}

impl Measurements {
    /// Noise-free data straight from the phantom, so that the same data serve every unknown grid.
    pub fn synthesize(kind: ProblemKind, points: Vec<[f64; 2]>, noise_std: f64, seed: u64) -> Self {
        let clean: Vec<f64> = points
            .iter()
            .map(|&p| match kind {
                ProblemKind::Diff1d => phantom_diff_integral(p[0]),
                _ => phantom(kind, p),
            })
            .collect();
        let y = add_noise(&clean, noise_std, seed);
        Self { kind, points, y, noise_std }
    }

    pub fn problem(&self, unknown: &Grid) -> Result<ForwardProblem> {
        if unknown.dim() != self.kind.dim() {
            return Err(Error::GridMismatch("grid dimension does not match the problem".into()));
        }
        let a = match self.kind {
            ProblemKind::Diff1d => {
                heaviside_operator(unknown, &self.points.iter().map(|p| p[0]).collect::<Vec<_>>())?
            }
            _ => interp_operator(unknown, &self.points)?,
        };
        ForwardProblem::new(*unknown, a, self.noise_std, self.y.clone())
    }

    /// `t,y` in 1-D, `t1,t2,y` in 2-D.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        if self.kind.dim() == 1 {
            writeln!(out, "t,y")?;
            for (p, y) in self.points.iter().zip(&self.y) {
                writeln!(out, "{},{}", p[0], y)?;
            }
        } else {
            writeln!(out, "t1,t2,y")?;
            for (p, y) in self.points.iter().zip(&self.y) {
                writeln!(out, "{},{},{}", p[0], p[1], y)?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(kind: ProblemKind, noise_std: f64, input: R) -> Result<Self> {
        let dim = kind.dim();
        let mut points = Vec::new();
        let mut y = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let cols = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
            if cols.len() != dim + 1 {
                return Err(Error::Parse(format!("line {}: expected {} columns", lineno + 1, dim + 1)));
            }
            points.push(if dim == 1 { [cols[0], 0.0] } else { [cols[0], cols[1]] });
            y.push(cols[dim]);
        }
        Ok(Self { kind, points, y, noise_std })
    }
}

/// Nodes of `grid` as measurement points.
pub fn grid_points(grid: &Grid) -> Vec<[f64; 2]> {
    grid.positions().collect()
}
