//! Finite-difference discretisation of `(1 - ℓ(x)² Δ) v = σ √(ℓ(x)^d) w`.
//!
//! The precision factor `L(ℓ)` is stored row-scaled: row `n` is the stencil of
//! `1 - ℓ_n² Δ_h` divided by the noise standard deviation
//! `s_n = σ ℓ_n^{d/2} h^{-d/2}`, so that `L v ~ N(0, I)` encodes the prior
//! and the prior precision is `LᵀL`. `L` itself is only symmetric when `ℓ` is
//! constant. The smoothness is fixed at `ν = 2 - d/2`.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::sparse::{CsrMatrix, ProfileLu};

/// A sparse row `(cols, vals)` with columns sorted ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRow {
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl SparseRow {
    pub fn dot(&self, x: &[f64]) -> f64 {
        self.cols.iter().zip(&self.vals).map(|(&c, &v)| v * x[c]).sum()
    }

    fn from_entries(mut entries: Vec<(usize, f64)>) -> Self {
        entries.sort_by_key(|e| e.0);
        let mut cols: Vec<usize> = Vec::with_capacity(entries.len());
        let mut vals: Vec<f64> = Vec::with_capacity(entries.len());
        for (c, v) in entries {
            if cols.last() == Some(&c) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
            }
        }
        Self { cols, vals }
    }
}

/// A proposed single-row change of an isotropic factor; see [`PrecisionFactor::replace_row`].
#[derive(Clone, Debug)]
pub struct RowUpdate {
    pub node: usize,
    pub new_ell: f64,
    pub old_row: SparseRow,
    pub new_row: SparseRow,
}

impl RowUpdate {
    /// `new_row - old_row` on the shared support.
    pub fn delta(&self) -> SparseRow {
        SparseRow {
            cols: self.new_row.cols.clone(),
            vals: self.new_row.vals.iter().zip(&self.old_row.vals).map(|(n, o)| n - o).collect(),
        }
    }
}

/// Anisotropic length-scales `ℓ₁, ℓ₂` with tilt angle `θ` (radians).
#[derive(Clone, Debug)]
pub struct AnisoSpec {
    pub ell1: Field,
    pub ell2: Field,
    pub theta: Field,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Isotropic,
    Anisotropic,
}

#[derive(Clone, Debug)]
pub struct PrecisionFactor {
    grid: Grid,
    sigma: f64,
    ell: Vec<f64>,
    kind: Kind,
    matrix: CsrMatrix,
}

/// Noise standard deviation `σ ℓ^{d/2} h^{-d/2}` of an isotropic row.
pub fn noise_std(sigma: f64, ell: f64, h: f64, dim: usize) -> f64 {
    let d = dim as f64;
    sigma * ell.powf(d / 2.0) * h.powf(-d / 2.0)
}

fn check_ell(node: usize, ell: f64) -> Result<()> {
    if ell > 0.0 && ell.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveLengthScale { node, value: ell })
    }
}

fn isotropic_row(grid: &Grid, node: usize, ell: f64, sigma: f64) -> SparseRow {
    let d = grid.dim() as f64;
    let h2 = grid.h() * grid.h();
    let s = noise_std(sigma, ell, grid.h(), grid.dim());
    let a = ell * ell / h2;
    let stencil = grid.stencil(node).expect("node index checked by caller");
    let mut entries = vec![(node, (1.0 + 2.0 * d * a) / s)];
    entries.extend(stencil.neighbours().map(|j| (j, -a / s)));
    SparseRow::from_entries(entries)
}

impl PrecisionFactor {
    /// Assembles `L(ℓ)` for the isotropic operator on `grid`.
    pub fn assemble(grid: &Grid, ell: &Field, sigma: f64) -> Result<Self> {
        if ell.grid() != grid {
            return Err(Error::GridMismatch("length-scale field lives on a different grid".into()));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
        }
        for (n, &l) in ell.values().iter().enumerate() {
            check_ell(n, l)?;
        }
        let rows = (0..grid.len())
            .map(|n| {
                let r = isotropic_row(grid, n, ell.values()[n], sigma);
                r.cols.into_iter().zip(r.vals).collect()
            })
            .collect();
        Ok(Self {
            grid: *grid,
            sigma,
            ell: ell.values().to_vec(),
            kind: Kind::Isotropic,
            matrix: CsrMatrix::from_rows(grid.len(), rows),
        })
    }

    /// Assembles the 9-point discretisation of `1 - ∇·(H∇)` with
    /// `H = R(θ) diag(ℓ₁², ℓ₂²) R(θ)ᵀ`, evaluated node-locally. Mixed
    /// derivatives use the 4-corner cross difference. Rows are scaled by
    /// `σ (ℓ₁ℓ₂)^{1/2} h^{-1}`.
    pub fn assemble_anisotropic(grid: &Grid, aniso: &AnisoSpec, sigma: f64) -> Result<Self> {
        if grid.dim() != 2 {
            return Err(Error::InvalidGrid("anisotropic factors need a 2-D grid".into()));
        }
        for f in [&aniso.ell1, &aniso.ell2, &aniso.theta] {
            if f.grid() != grid {
                return Err(Error::GridMismatch("anisotropy field lives on a different grid".into()));
            }
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
        }
        let h = grid.h();
        let h2 = h * h;
        let mut rows = Vec::with_capacity(grid.len());
        let mut geo = Vec::with_capacity(grid.len());
        for n in 0..grid.len() {
            let (l1, l2, th) = (aniso.ell1.values()[n], aniso.ell2.values()[n], aniso.theta.values()[n]);
            check_ell(n, l1)?;
            check_ell(n, l2)?;
            let (sn, cs) = th.sin_cos();
            let (q1, q2) = (l1 * l1, l2 * l2);
            let hxx = q1 * cs * cs + q2 * sn * sn;
            let hyy = q1 * sn * sn + q2 * cs * cs;
            let hxy = (q1 - q2) * sn * cs;
            let s = sigma * (l1 * l2).sqrt() / h;
            let mut entries = vec![(n, (1.0 + 2.0 * (hxx + hyy) / h2) / s)];
            let mut push = |dx: isize, dy: isize, v: f64| {
                if v != 0.0 {
                    if let Some(j) = grid.neighbour(n, dx, dy) {
                        entries.push((j, v / s));
                    }
                }
            };
            push(1, 0, -hxx / h2);
            push(-1, 0, -hxx / h2);
            push(0, 1, -hyy / h2);
            push(0, -1, -hyy / h2);
            // v_xy ≈ (v(+,+) - v(+,-) - v(-,+) + v(-,-)) / 4h²
            push(1, 1, -hxy / (2.0 * h2));
            push(-1, -1, -hxy / (2.0 * h2));
            push(1, -1, hxy / (2.0 * h2));
            push(-1, 1, hxy / (2.0 * h2));
            let row = SparseRow::from_entries(entries);
            rows.push(row.cols.into_iter().zip(row.vals).collect());
            geo.push((l1 * l2).sqrt());
        }
        Ok(Self { grid: *grid, sigma, ell: geo, kind: Kind::Anisotropic, matrix: CsrMatrix::from_rows(grid.len(), rows) })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Length-scale per node (geometric mean `√(ℓ₁ℓ₂)` for anisotropic factors).
    pub fn ell(&self) -> &[f64] {
        &self.ell
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn is_anisotropic(&self) -> bool {
        self.kind == Kind::Anisotropic
    }

    pub fn row(&self, node: usize) -> SparseRow {
        let (c, v) = self.matrix.row(node);
        SparseRow { cols: c.to_vec(), vals: v.to_vec() }
    }

    /// Row `node` recomputed for `new_ell`, paired with the current row. `self` is unchanged
    /// until [`PrecisionFactor::commit`] is called.
    pub fn replace_row(&self, node: usize, new_ell: f64) -> Result<RowUpdate> {
        if self.kind != Kind::Isotropic {
            return Err(Error::InvalidParameter("row replacement needs an isotropic factor".into()));
        }
        self.grid.check_index(node)?;
        check_ell(node, new_ell)?;
        Ok(RowUpdate {
            node,
            new_ell,
            old_row: self.row(node),
            new_row: isotropic_row(&self.grid, node, new_ell, self.sigma),
        })
    }

    pub fn commit(&mut self, update: &RowUpdate) {
        debug_assert_eq!(self.matrix.row(update.node).0, update.new_row.cols.as_slice());
        self.matrix.row_values_mut(update.node).copy_from_slice(&update.new_row.vals);
        self.ell[update.node] = update.new_ell;
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.matrix.matvec(v)
    }

    pub fn lu(&self) -> Result<ProfileLu> {
        ProfileLu::factor(&self.matrix)
    }

    /// Writes the factor as `row,col,value` lines.
    pub fn write_coo<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "row,col,value")?;
        for (r, c, v) in self.matrix.triplets() {
            writeln!(out, "{r},{c},{v}")?;
        }
        Ok(())
    }
}

/// Convenience wrapper mirroring the operation table.
pub fn assemble_precision_factor(grid: &Grid, ell: &Field, sigma: f64) -> Result<PrecisionFactor> {
    PrecisionFactor::assemble(grid, ell, sigma)
}

pub fn assemble_anisotropic_factor(grid: &Grid, aniso: &AnisoSpec, sigma: f64) -> Result<PrecisionFactor> {
    PrecisionFactor::assemble_anisotropic(grid, aniso, sigma)
}

/// Cell-average white noise: i.i.d. `N(0, h^{-d})` per node.
pub fn sample_white_noise<R: Rng + ?Sized>(grid: &Grid, rng: &mut R) -> Field {
    let sd = grid.h().powf(-(grid.dim() as f64) / 2.0);
    let values = (0..grid.len()).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
    Field::new(*grid, values).expect("length matches grid")
}

pub fn standard_normals<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Draws `v ~ N(0, (LᵀL)⁻¹)` by solving `L v = w̃`, `w̃ ~ N(0, I)`.
pub fn sample_realization<R: Rng + ?Sized>(factor: &PrecisionFactor, rng: &mut R) -> Result<Field> {
    let lu = factor.lu()?;
    sample_realization_with(factor, &lu, rng)
}

/// As [`sample_realization`] with a precomputed factorisation of `L`.
pub fn sample_realization_with<R: Rng + ?Sized>(
    factor: &PrecisionFactor,
    lu: &ProfileLu,
    rng: &mut R,
) -> Result<Field> {
    let mut w = standard_normals(factor.grid.len(), rng);
    lu.solve_in_place(&mut w);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite realisation".into()));
    }
    Field::new(factor.grid, w)
}
