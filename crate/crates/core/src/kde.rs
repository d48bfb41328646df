//! Gaussian kernel density estimates of chain marginals.

use std::io::Write;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Kde {
    pub xs: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
    /// Set when the samples have zero spread; `xs`/`density` are then empty.
    pub point_mass: Option<f64>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Silverman's rule `0.9 min(s, IQR/1.34) n^{-1/5}`.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

/// Density on `n_points` equispaced points spanning the samples ± 3 bandwidths.
pub fn kde(samples: &[f64], bandwidth: Option<f64>, n_points: usize) -> Result<Kde> {
    if samples.len() < 2 {
        return Err(Error::InvalidParameter("kde needs at least two samples".into()));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite sample".into()));
    }
    let (lo, hi) = samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if lo == hi {
        return Ok(Kde { xs: Vec::new(), density: Vec::new(), bandwidth: 0.0, point_mass: Some(lo) });
    }
    let bw = bandwidth.unwrap_or_else(|| silverman_bandwidth(samples));
    if !(bw > 0.0 && bw.is_finite()) {
        return Err(Error::InvalidParameter(format!("bandwidth must be positive, got {bw}")));
    }
    let n_points = n_points.max(2);
    let (a, b) = (lo - 3.0 * bw, hi + 3.0 * bw);
    let xs: Vec<f64> = (0..n_points).map(|i| a + (b - a) * i as f64 / (n_points - 1) as f64).collect();
    let norm = 1.0 / (samples.len() as f64 * bw * (2.0 * std::f64::consts::PI).sqrt());
    let density = xs
        .iter()
        .map(|&x| {
            samples
                .iter()
                .map(|&s| {
                    let t = (x - s) / bw;
                    (-0.5 * t * t).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect();
    Ok(Kde { xs, density, bandwidth: bw, point_mass: None })
}

impl Kde {
    /// Indices of local maxima whose topographic prominence is at least `fraction` of the
    /// global peak height.
    pub fn modes(&self, fraction: f64) -> Vec<usize> {
        let d = &self.density;
        let peak = d.iter().copied().fold(0.0, f64::max);
        let n = d.len();
        let mut out = Vec::new();
        let mut i = 0;
        while i < n {
            // plateau [i, j]
            let mut j = i;
            while j + 1 < n && d[j + 1] == d[i] {
                j += 1;
            }
            let left_lower = i == 0 || d[i - 1] < d[i];
            let right_lower = j + 1 == n || d[j + 1] < d[i];
            if left_lower && right_lower && d[i] > 0.0 {
                let h = d[i];
                let mut left_min = h;
                let mut k = i;
                while k > 0 && d[k - 1] <= h {
                    k -= 1;
                    left_min = left_min.min(d[k]);
                }
                if k == 0 {
                    left_min = left_min.min(d[0]);
                }
                let mut right_min = h;
                let mut k = j;
                while k + 1 < n && d[k + 1] <= h {
                    k += 1;
                    right_min = right_min.min(d[k]);
                }
                let prominence = h - left_min.max(right_min);
                if prominence >= fraction * peak {
                    out.push((i + j) / 2);
                }
            }
            i = j + 1;
        }
        out
    }

    pub fn count_modes(&self, fraction: f64) -> usize {
        if self.point_mass.is_some() {
            1
        } else {
            self.modes(fraction).len()
        }
    }

    /// Density at `x` by linear interpolation on the evaluation grid.
    pub fn at(&self, x: f64) -> f64 {
        if self.xs.is_empty() || x < self.xs[0] || x > self.xs[self.xs.len() - 1] {
            return 0.0;
        }
        let i = (self.xs.partition_point(|&v| v <= x)).clamp(1, self.xs.len() - 1);
        let (x0, x1) = (self.xs[i - 1], self.xs[i]);
        let w = (x - x0) / (x1 - x0);
        self.density[i - 1] * (1.0 - w) + self.density[i] * w
    }

    /// `x,density`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "x,density")?;
        if let Some(c) = self.point_mass {
            writeln!(out, "{c},inf")?;
        }
        for (x, d) in self.xs.iter().zip(&self.density) {
            writeln!(out, "{x},{d}")?;
        }
        Ok(())
    }
}
