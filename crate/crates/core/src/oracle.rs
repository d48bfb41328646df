//! Dense, slow reference implementations used to validate the sparse paths.
//!
//! Everything here scales cubically and refuses inputs with more than
//! [`DENSE_LIMIT`] unknowns.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::forward::ForwardProblem;
use crate::grid::Field;
use crate::spde::PrecisionFactor;
use crate::sparse::{CsrMatrix, ProfileCholesky};

pub const DENSE_LIMIT: usize = 4096;

fn guard(n: usize) -> Result<()> {
    if n > DENSE_LIMIT {
        Err(Error::SizeGuard { size: n, limit: DENSE_LIMIT })
    } else {
        Ok(())
    }
}

// Series of 1/Γ(1+x) = Σ c_k x^{k-1}, |x| <= 1/2.
const RGAMMA: [f64; 26] = [
    1.0,
    0.577_215_664_901_532_9,
    -0.655_878_071_520_253_8,
    -0.042_002_635_034_095_2,
    0.166_538_611_382_291_5,
    -0.042_197_734_555_544_3,
    -0.009_621_971_527_877_0,
    0.007_218_943_246_663_0,
    -0.001_165_167_591_859_1,
    -0.000_215_241_674_114_9,
    0.000_128_050_282_388_1,
    -0.000_020_134_854_780_8,
    -0.000_001_250_493_482_1,
    0.000_001_133_027_232_0,
    -0.000_000_205_633_841_7,
    0.000_000_006_116_095_0,
    0.000_000_005_002_007_5,
    -0.000_000_001_181_274_6,
    0.000_000_000_104_342_7,
    0.000_000_000_007_782_3,
    -0.000_000_000_003_696_8,
    0.000_000_000_000_510_0,
    -0.000_000_000_000_020_6,
    -0.000_000_000_000_005_4,
    0.000_000_000_000_001_4,
    0.000_000_000_000_000_1,
];

/// Returns `(gam1, gam2, 1/Γ(1+μ), 1/Γ(1-μ))` for `|μ| <= 1/2`.
fn temme_gammas(mu: f64) -> (f64, f64, f64, f64) {
    let mut gam1 = 0.0;
    let mut gam2 = 0.0;
    let mut plus = 0.0;
    let mut minus = 0.0;
    let mut pow = 1.0;
    for (i, &c) in RGAMMA.iter().enumerate() {
        // term c_{i+1} μ^i
        plus += c * pow;
        minus += if i % 2 == 0 { c * pow } else { -c * pow };
        pow *= mu;
    }
    let mut p = 1.0;
    for (i, &c) in RGAMMA.iter().enumerate() {
        let k = i + 1;
        if k % 2 == 0 {
            gam1 -= c * p;
            p *= mu * mu;
        }
    }
    let mut p = 1.0;
    for (i, &c) in RGAMMA.iter().enumerate() {
        let k = i + 1;
        if k % 2 == 1 {
            gam2 += c * p;
            p *= mu * mu;
        }
    }
    (gam1, gam2, plus, minus)
}

/// Modified Bessel function of the second kind `K_ν(x)` for `ν >= 0`, `x > 0`.
///
/// Temme's series for `x <= 2`, Steed's continued fraction above, followed by
/// upward recurrence in the order.
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    assert!(nu >= 0.0 && x > 0.0, "bessel_k needs nu >= 0 and x > 0");
    const EPS: f64 = 1e-16;
    const MAXIT: usize = 10_000;
    let nl = (nu + 0.5).floor() as usize;
    let mu = nu - nl as f64;
    let mu2 = mu * mu;
    let xi = 1.0 / x;
    let xi2 = 2.0 * xi;
    let (mut kmu, mut k1);
    if x < 2.0 {
        let x2 = 0.5 * x;
        let pimu = std::f64::consts::PI * mu;
        let fact = if pimu.abs() < EPS { 1.0 } else { pimu / pimu.sin() };
        let d = -x2.ln();
        let e = mu * d;
        let fact2 = if e.abs() < EPS { 1.0 } else { e.sinh() / e };
        let (gam1, gam2, gampl, gammi) = temme_gammas(mu);
        let mut ff = fact * (gam1 * e.cosh() + gam2 * fact2 * d);
        let mut sum = ff;
        let ee = e.exp();
        let mut p = 0.5 * ee / gampl;
        let mut q = 0.5 / (ee * gammi);
        let mut c = 1.0;
        let dd = x2 * x2;
        let mut sum1 = p;
        for i in 1..=MAXIT {
            let fi = i as f64;
            ff = (fi * ff + p + q) / (fi * fi - mu2);
            c *= dd / fi;
            p /= fi - mu;
            q /= fi + mu;
            let del = c * ff;
            sum += del;
            sum1 += c * (p - fi * ff);
            if del.abs() < sum.abs() * EPS {
                break;
            }
        }
        kmu = sum;
        k1 = sum1 * xi2;
    } else {
        let mut b = 2.0 * (1.0 + x);
        let mut d = 1.0 / b;
        let mut delh = d;
        let mut h = d;
        let mut q1 = 0.0;
        let mut q2 = 1.0;
        let a1 = 0.25 - mu2;
        let mut q = a1;
        let mut c = a1;
        let mut a = -a1;
        let mut s = 1.0 + q * delh;
        for i in 2..=MAXIT {
            let fi = i as f64;
            a -= 2.0 * (fi - 1.0);
            c = -a * c / fi;
            let qnew = (q1 - b * q2) / a;
            q1 = q2;
            q2 = qnew;
            q += c * qnew;
            b += 2.0;
            d = 1.0 / (b + a * d);
            delh = (b * d - 1.0) * delh;
            h += delh;
            let dels = q * delh;
            s += dels;
            if (dels / s).abs() < EPS {
                break;
            }
        }
        h *= a1;
        kmu = (std::f64::consts::PI / (2.0 * x)).sqrt() * (-x).exp() / s;
        k1 = kmu * (mu + x + 0.5 - h) * xi;
    }
    for i in 1..=nl {
        let next = (mu + i as f64) * xi2 * k1 + kmu;
        kmu = k1;
        k1 = next;
    }
    kmu
}

/// Matérn correlation `2^{1-ν}/Γ(ν) (r/ℓ)^ν K_ν(r/ℓ)`, equal to 1 at `r = 0`.
pub fn matern_cov(r: f64, nu: f64, ell: f64) -> f64 {
    let t = r.abs() / ell;
    if t == 0.0 {
        return 1.0;
    }
    if t > 700.0 {
        return 0.0;
    }
    2f64.powf(1.0 - nu) / gamma(nu) * t.powf(nu) * bessel_k(nu, t)
}

/// Spectral density of the unit-variance Matérn field in `d` dimensions, normalised so
/// that `C(r) = (2π)^{-d} ∫ S(ξ) e^{iξ·r} dξ`.
pub fn power_spectrum(xi: f64, nu: f64, ell: f64, dim: usize) -> f64 {
    let d = dim as f64;
    let num = 2f64.powf(d) * std::f64::consts::PI.powf(d / 2.0) * gamma(nu + d / 2.0);
    let den = gamma(nu) * ell.powf(2.0 * nu);
    num / den * (ell.powi(-2) + xi * xi).powf(-(nu + d / 2.0))
}

/// Marginal variance of the continuum field `(1 - ℓ²Δ) v = σ √(ℓ^d) w` with `ν = 2 - d/2`.
pub fn spde_marginal_variance(dim: usize, sigma: f64) -> f64 {
    let d = dim as f64;
    sigma * sigma * gamma(2.0 - d / 2.0) / (4.0 * std::f64::consts::PI).powf(d / 2.0)
}

pub fn spde_smoothness(dim: usize) -> f64 {
    2.0 - dim as f64 / 2.0
}

/// `(LᵀL)⁻¹` formed as `L⁻¹ L⁻ᵀ`.
pub fn dense_covariance(factor: &PrecisionFactor) -> Result<DMatrix<f64>> {
    let n = factor.grid().len();
    guard(n)?;
    let linv = factor
        .matrix()
        .to_dense()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Singular("dense L".into()))?;
    Ok(&linv * linv.transpose())
}

/// `log det(LᵀL) = 2 log |det L|`.
pub fn dense_logdet(factor: &PrecisionFactor) -> Result<f64> {
    guard(factor.grid().len())?;
    dense_log_abs_det(&factor.matrix().to_dense()).map(|l| 2.0 * l)
}

/// `log |det M|` via dense partial-pivoting LU.
pub fn dense_log_abs_det(m: &DMatrix<f64>) -> Result<f64> {
    guard(m.nrows())?;
    let lu = m.clone().lu();
    let u = lu.u();
    let mut acc = 0.0;
    for i in 0..u.nrows() {
        let d = u[(i, i)];
        if d == 0.0 || !d.is_finite() {
            return Err(Error::Singular("zero pivot".into()));
        }
        acc += d.abs().ln();
    }
    Ok(acc)
}

#[derive(Clone, Debug)]
pub struct DenseGaussian {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl DenseGaussian {
    pub fn std(&self) -> Vec<f64> {
        (0..self.mean.len()).map(|i| self.covariance[(i, i)].sqrt()).collect()
    }
}

/// Posterior `v | y, ℓ` for `y = A v + σ_e e` and prior precision `LᵀL`.
pub fn conditional_gaussian(
    a: &CsrMatrix,
    noise_std: f64,
    y: &[f64],
    factor: &PrecisionFactor,
) -> Result<DenseGaussian> {
    let n = factor.grid().len();
    guard(n)?;
    if a.ncols() != n || a.nrows() != y.len() {
        return Err(Error::GridMismatch("forward operator and data sizes disagree".into()));
    }
    let ad = a.to_dense();
    let ld = factor.matrix().to_dense();
    let s2 = noise_std * noise_std;
    let q = ad.transpose() * &ad / s2 + ld.transpose() * &ld;
    let chol = q.cholesky().ok_or_else(|| Error::Singular("posterior precision".into()))?;
    let rhs = ad.transpose() * DVector::from_column_slice(y) / s2;
    let mean = chol.solve(&rhs);
    Ok(DenseGaussian { mean, covariance: chol.inverse() })
}

/// Posterior mean for a fixed length-scale field, via the sparse Cholesky of the posterior precision.
pub fn conditional_mean(problem: &ForwardProblem, factor: &PrecisionFactor) -> Result<Vec<f64>> {
    let s2 = problem.noise_std * problem.noise_std;
    let q = problem.a.gram(1.0 / s2).add(&factor.matrix().gram(1.0));
    let chol = ProfileCholesky::factor(&q)?;
    let rhs: Vec<f64> = problem.a.tr_matvec(&problem.y).iter().map(|v| v / s2).collect();
    Ok(chol.solve(&rhs))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub max_abs_error: f64,
    pub rmse: f64,
}

/// Error metrics over all nodes.
pub fn metrics(estimate: &[f64], truth: &[f64]) -> Result<Metrics> {
    if estimate.len() != truth.len() || estimate.is_empty() {
        return Err(Error::GridMismatch("estimate and truth lengths differ".into()));
    }
    Ok(metrics_over(estimate, truth, 0..truth.len()))
}

pub fn field_metrics(estimate: &Field, truth: &Field) -> Result<Metrics> {
    if estimate.grid() != truth.grid() {
        return Err(Error::GridMismatch("estimate and truth live on different grids".into()));
    }
    metrics(estimate.values(), truth.values())
}

/// Error metrics restricted to the given node indices.
pub fn metrics_over(estimate: &[f64], truth: &[f64], nodes: impl IntoIterator<Item = usize>) -> Metrics {
    let mut max = 0.0f64;
    let mut sq = 0.0;
    let mut count = 0usize;
    for i in nodes {
        let e = (estimate[i] - truth[i]).abs();
        max = max.max(e);
        sq += e * e;
        count += 1;
    }
    Metrics { max_abs_error: max, rmse: (sq / count.max(1) as f64).sqrt() }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaselineRow {
    pub ell: f64,
    pub max_abs_error: f64,
    pub rmse: f64,
}

#[derive(Clone, Debug)]
pub struct BaselineTable {
    pub rows: Vec<BaselineRow>,
}

impl BaselineTable {
    pub fn best_rmse(&self) -> BaselineRow {
        *self.rows.iter().min_by(|a, b| a.rmse.total_cmp(&b.rmse)).expect("non-empty table")
    }

    pub fn best_max_abs(&self) -> BaselineRow {
        *self
            .rows
            .iter()
            .min_by(|a, b| a.max_abs_error.total_cmp(&b.max_abs_error))
            .expect("non-empty table")
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "ell,max_abs_error,rmse")?;
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.ell, r.max_abs_error, r.rmse)?;
        }
        Ok(())
    }
}

/// Conditional mean under a constant length-scale prior.
pub fn constant_ell_estimate(problem: &ForwardProblem, sigma: f64, ell: f64) -> Result<Vec<f64>> {
    let grid = problem.unknown_grid;
    let factor = PrecisionFactor::assemble(&grid, &Field::constant(grid, ell), sigma)?;
    conditional_mean(problem, &factor)
}

/// Sweeps constant length-scales and scores each conditional mean against `truth`.
pub fn constant_ell_baseline(
    problem: &ForwardProblem,
    sigma: f64,
    ells: &[f64],
    truth: &[f64],
) -> Result<BaselineTable> {
    if ells.is_empty() {
        return Err(Error::InvalidParameter("empty length-scale grid".into()));
    }
    let rows = ells
        .iter()
        .map(|&ell| {
            let est = constant_ell_estimate(problem, sigma, ell)?;
            let m = metrics(&est, truth)?;
            Ok(BaselineRow { ell, max_abs_error: m.max_abs_error, rmse: m.rmse })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BaselineTable { rows })
}

/// `n` log-spaced points on `[lo, hi]`.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// One-sample Kolmogorov–Smirnov statistic against a continuous CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic Kolmogorov p-value with the Stephens small-sample correction.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let t = (sn + 0.12 + 0.11 / sn) * d;
    if t < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * t * t).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// Piecewise-linear CDF of an unnormalised density tabulated on an increasing grid.
pub fn tabulated_cdf(xs: &[f64], density: &[f64]) -> impl Fn(f64) -> f64 {
    let mut cum = vec![0.0; xs.len()];
    for i in 1..xs.len() {
        cum[i] = cum[i - 1] + 0.5 * (density[i] + density[i - 1]) * (xs[i] - xs[i - 1]);
    }
    let total = *cum.last().unwrap_or(&1.0);
    let xs = xs.to_vec();
    let dens = density.to_vec();
    move |x: f64| {
        if x <= xs[0] {
            return 0.0;
        }
        if x >= xs[xs.len() - 1] {
            return 1.0;
        }
        let i = xs.partition_point(|&v| v <= x) - 1;
        let dx = x - xs[i];
        let slope = (dens[i + 1] - dens[i]) / (xs[i + 1] - xs[i]);
        (cum[i] + dens[i] * dx + 0.5 * slope * dx * dx) / total
    }
}
