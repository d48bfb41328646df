//! Hyperpriors for the latent field `u` and link maps `ℓ = g(u)`.

use rand::Rng;
use rand_distr::{Cauchy, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::spde::{sample_realization, PrecisionFactor};

const EXP_ARG_LIMIT: f64 = 700.0;

/// Maps the unconstrained latent value `s` to a positive length-scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LinkMap {
    /// `g(s) = exp(s)`.
    Exp,
    /// `g(s) = a / (b + c|s|) + d`, taking values in `(d, a/b + d]`.
    CauchyMap { a: f64, b: f64, c: f64, d: f64 },
    /// `g(s) = clamp(exp(a|s|) - b, lower, upper)`.
    BoundedExp { a: f64, b: f64, lower: f64, upper: f64 },
}

impl LinkMap {
    pub fn default_cauchy() -> Self {
        LinkMap::CauchyMap { a: 1.0, b: 1.0, c: 1.0, d: 0.05 }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("link parameter {name} must be positive, got {v}")))
            }
        };
        match *self {
            LinkMap::Exp => Ok(()),
            LinkMap::CauchyMap { a, b, c, d } => {
                pos("a", a)?;
                pos("b", b)?;
                pos("c", c)?;
                pos("d", d)
            }
            LinkMap::BoundedExp { a, b, lower, upper } => {
                pos("a", a)?;
                pos("lower", lower)?;
                if !(b > 0.0 && b < 1.0) {
                    return Err(Error::InvalidParameter(format!("bounded link needs b in (0, 1), got {b}")));
                }
                if !(upper > lower && upper.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "bounded link needs upper > lower, got [{lower}, {upper}]"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn eval(&self, s: f64) -> f64 {
        match *self {
            LinkMap::Exp => s.clamp(-EXP_ARG_LIMIT, EXP_ARG_LIMIT).exp(),
            LinkMap::CauchyMap { a, b, c, d } => a / (b + c * s.abs()) + d,
            LinkMap::BoundedExp { a, b, lower, upper } => {
                let raw = (a * s.abs()).min(EXP_ARG_LIMIT).exp() - b;
                raw.clamp(lower, upper)
            }
        }
    }

    /// Pointwise `ℓ = g(u)`.
    pub fn apply(&self, u: &Field) -> Field {
        let values = u.values().iter().map(|&s| self.eval(s)).collect();
        Field::new(*u.grid(), values).expect("same grid")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HyperFamily {
    /// Stationary Matérn field `(1 - ℓ₀²Δ) u = σ₀ √(ℓ₀^d) w̃`.
    GaussianMatern { ell0: f64, sigma0: f64 },
    /// 1-D walk with i.i.d. `Cauchy(scale, 0)` increments, anchored at `u(0) = 0`.
    /// `scale` defaults to the grid spacing.
    CauchyWalk { scale: Option<f64> },
    /// i.i.d. `Cauchy(scale, 0)` per node; `scale` defaults to the grid spacing.
    CauchyNoise { scale: Option<f64> },
}

impl HyperFamily {
    /// Link used when a configuration does not name one.
    pub fn default_link(&self) -> LinkMap {
        match self {
            HyperFamily::GaussianMatern { .. } => LinkMap::Exp,
            _ => LinkMap::default_cauchy(),
        }
    }
}

#[derive(Clone, Debug)]
enum Prior {
    Gaussian(PrecisionFactor),
    Walk(f64),
    Noise(f64),
}

/// Hyperprior family, its link map and the grid it lives on.
#[derive(Clone, Debug)]
pub struct HyperModel {
    grid: Grid,
    family: HyperFamily,
    link: LinkMap,
    prior: Prior,
}

impl HyperModel {
    pub fn new(grid: &Grid, family: HyperFamily, link: LinkMap) -> Result<Self> {
        link.validate()?;
        let scale_or_h = |scale: Option<f64>| -> Result<f64> {
            let s = scale.unwrap_or(grid.h());
            if s > 0.0 && s.is_finite() {
                Ok(s)
            } else {
                Err(Error::InvalidParameter(format!("Cauchy scale must be positive, got {s}")))
            }
        };
        let prior = match family {
            HyperFamily::GaussianMatern { ell0, sigma0 } => {
                if !(ell0 > 0.0 && sigma0 > 0.0) {
                    return Err(Error::InvalidParameter("Gaussian hyperprior needs ell0, sigma0 > 0".into()));
                }
                Prior::Gaussian(PrecisionFactor::assemble(grid, &Field::constant(*grid, ell0), sigma0)?)
            }
            HyperFamily::CauchyWalk { scale } => {
                if grid.dim() != 1 {
                    return Err(Error::InvalidGrid("the Cauchy walk is defined on 1-D grids only".into()));
                }
                Prior::Walk(scale_or_h(scale)?)
            }
            HyperFamily::CauchyNoise { scale } => Prior::Noise(scale_or_h(scale)?),
        };
        Ok(Self { grid: *grid, family, link, prior })
    }

    /// Model with the family's default link.
    pub fn with_default_link(grid: &Grid, family: HyperFamily) -> Result<Self> {
        Self::new(grid, family, family.default_link())
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn family(&self) -> HyperFamily {
        self.family
    }

    pub fn link(&self) -> LinkMap {
        self.link
    }

    /// The Gaussian hyperprior's precision factor `L̃`, if any.
    pub fn prior_factor(&self) -> Option<&PrecisionFactor> {
        match &self.prior {
            Prior::Gaussian(f) => Some(f),
            _ => None,
        }
    }

    /// Nodes whose latent value is fixed by the model (the walk's anchor).
    pub fn is_anchored(&self, node: usize) -> bool {
        matches!(self.prior, Prior::Walk(_)) && node == 0
    }

    pub fn apply_link(&self, u: &Field) -> Field {
        self.link.apply(u)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Field> {
        match &self.prior {
            Prior::Gaussian(f) => sample_realization(f, rng),
            Prior::Walk(scale) => {
                let inc = Cauchy::new(0.0, *scale).map_err(|e| Error::InvalidParameter(e.to_string()))?;
                let mut u = Vec::with_capacity(self.grid.len());
                let mut acc = 0.0;
                u.push(acc);
                for _ in 1..self.grid.len() {
                    acc += inc.sample(rng);
                    u.push(acc);
                }
                Field::new(self.grid, u)
            }
            Prior::Noise(scale) => {
                let c = Cauchy::new(0.0, *scale).map_err(|e| Error::InvalidParameter(e.to_string()))?;
                Field::new(self.grid, (0..self.grid.len()).map(|_| c.sample(rng)).collect())
            }
        }
    }

    /// `log D(u)` up to an additive constant.
    pub fn log_density(&self, u: &[f64]) -> f64 {
        match &self.prior {
            Prior::Gaussian(f) => -0.5 * f.apply(u).iter().map(|x| x * x).sum::<f64>(),
            Prior::Walk(g) => u.windows(2).map(|w| cauchy_log_kernel(w[1] - w[0], *g)).sum(),
            Prior::Noise(g) => u.iter().map(|&x| cauchy_log_kernel(x, *g)).sum(),
        }
    }

    /// `log D(u') - log D(u)` where `u'` equals `u` except `u'[node] = new_value`,
    /// evaluated from the terms that involve `node` only.
    pub fn log_density_delta(&self, u: &[f64], node: usize, new_value: f64) -> f64 {
        let old = u[node];
        match &self.prior {
            Prior::Gaussian(f) => {
                let m = f.matrix();
                let step = new_value - old;
                let mut rows: Vec<usize> = self.grid.stencil(node).expect("valid node").neighbours().collect();
                rows.push(node);
                rows.sort_unstable();
                rows.dedup();
                rows.into_iter()
                    .map(|r| {
                        let coeff = m.get(r, node);
                        if coeff == 0.0 {
                            return 0.0;
                        }
                        let (cols, vals) = m.row(r);
                        let cur: f64 = cols.iter().zip(vals).map(|(&c, &v)| v * u[c]).sum();
                        let next = cur + coeff * step;
                        -0.5 * (next * next - cur * cur)
                    })
                    .sum()
            }
            Prior::Walk(g) => {
                let mut delta = 0.0;
                if node > 0 {
                    delta += cauchy_log_kernel(new_value - u[node - 1], *g) - cauchy_log_kernel(old - u[node - 1], *g);
                }
                if node + 1 < u.len() {
                    delta += cauchy_log_kernel(u[node + 1] - new_value, *g) - cauchy_log_kernel(u[node + 1] - old, *g);
                }
                delta
            }
            Prior::Noise(g) => cauchy_log_kernel(new_value, *g) - cauchy_log_kernel(old, *g),
        }
    }
}

/// `log(γ / (γ² + x²))`, the Cauchy log-density without the `1/π`.
fn cauchy_log_kernel(x: f64, gamma: f64) -> f64 {
    gamma.ln() - (gamma * gamma + x * x).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid, Boundary};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid1(n: usize) -> Grid {
        make_grid(1, &[n], &[10.0], Boundary::Periodic).unwrap()
    }

    #[test]
    fn link_values_at_zero() {
        assert_eq!(LinkMap::Exp.eval(0.0), 1.0);
        let cm = LinkMap::CauchyMap { a: 2.0, b: 4.0, c: 1.0, d: 0.1 };
        assert!((cm.eval(0.0) - 0.6).abs() < 1e-15);
        let b = 0.9;
        let be = LinkMap::BoundedExp { a: 1.0, b, lower: 1.0 - b, upper: 3.0 };
        assert!((be.eval(0.0) - (1.0 - b)).abs() < 1e-15);
        assert!(LinkMap::Exp.eval(1e6).is_finite());
        assert!(LinkMap::Exp.eval(-1e6) > 0.0);
    }

    #[test]
    fn link_validation() {
        assert!(LinkMap::CauchyMap { a: 1.0, b: 1.0, c: 1.0, d: 0.0 }.validate().is_err());
        assert!(LinkMap::BoundedExp { a: 1.0, b: 1.5, lower: 0.1, upper: 1.0 }.validate().is_err());
        assert!(LinkMap::BoundedExp { a: 1.0, b: 0.5, lower: 1.0, upper: 0.5 }.validate().is_err());
    }

    #[test]
    fn cauchy_walk_is_1d_only() {
        let g = make_grid(2, &[4, 4], &[1.0, 1.0], Boundary::Periodic).unwrap();
        assert!(HyperModel::with_default_link(&g, HyperFamily::CauchyWalk { scale: None }).is_err());
    }

    #[test]
    fn walk_starts_at_zero_and_node_zero_touches_one_increment() {
        let g = grid1(50);
        let m = HyperModel::with_default_link(&g, HyperFamily::CauchyWalk { scale: None }).unwrap();
        let u = m.sample(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(u.values()[0], 0.0);
        assert!(m.is_anchored(0) && !m.is_anchored(1));
        let mut u2 = u.values().to_vec();
        u2[0] = 0.37;
        let dense = m.log_density(&u2) - m.log_density(u.values());
        let local = m.log_density_delta(u.values(), 0, 0.37);
        assert!((dense - local).abs() < 1e-12);
        let g = g.h();
        let expect = cauchy_log_kernel(u.values()[1] - 0.37, g) - cauchy_log_kernel(u.values()[1], g);
        assert!((local - expect).abs() < 1e-12);
    }

    #[test]
    fn gaussian_draw_collapses_with_tiny_sigma0() {
        let g = grid1(40);
        let m = HyperModel::with_default_link(&g, HyperFamily::GaussianMatern { ell0: 1.0, sigma0: 1e-12 }).unwrap();
        let u = m.sample(&mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(u.values().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn walk_increment_median_is_scale() {
        let g = make_grid(1, &[20_001], &[10.0], Boundary::Periodic).unwrap();
        let m = HyperModel::with_default_link(&g, HyperFamily::CauchyWalk { scale: None }).unwrap();
        let u = m.sample(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut inc: Vec<f64> = u.values().windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        inc.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = inc[inc.len() / 2];
        assert!((median / g.h() - 1.0).abs() < 0.05, "median/h = {}", median / g.h());
    }

    fn dense_check(model: &HyperModel, u: &[f64]) {
        for node in 0..u.len() {
            let nv = u[node] + 0.731 * (node as f64 + 1.0).sin();
            let mut u2 = u.to_vec();
            u2[node] = nv;
            let dense = model.log_density(&u2) - model.log_density(u);
            let local = model.log_density_delta(u, node, nv);
            assert!((dense - local).abs() < 1e-10 * (1.0 + dense.abs()), "node {node}: {dense} vs {local}");
            assert_eq!(model.log_density_delta(u, node, u[node]), 0.0);
        }
    }

    #[test]
    fn local_deltas_match_dense_evaluation() {
        let g1 = grid1(60);
        let g2 = make_grid(2, &[7, 7], &[1.0, 1.0], Boundary::Dirichlet).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (g, fam) in [
            (g1, HyperFamily::GaussianMatern { ell0: 0.8, sigma0: 1.5 }),
            (g1, HyperFamily::CauchyWalk { scale: None }),
            (g1, HyperFamily::CauchyNoise { scale: Some(0.3) }),
            (g2, HyperFamily::GaussianMatern { ell0: 0.1, sigma0: 1.0 }),
            (g2, HyperFamily::CauchyNoise { scale: None }),
        ] {
            let m = HyperModel::with_default_link(&g, fam).unwrap();
            let u = m.sample(&mut rng).unwrap();
            dense_check(&m, u.values());
        }
    }

    proptest! {
        #[test]
        fn links_positive_even_and_bounded(s in -1e3f64..1e3) {
            let cm = LinkMap::CauchyMap { a: 1.0, b: 1.0, c: 1.0, d: 0.05 };
            let v = cm.eval(s);
            prop_assert!(v > 0.05 && v <= 1.05);
            prop_assert_eq!(v, cm.eval(-s));
            let be = LinkMap::BoundedExp { a: 1.0, b: 0.95, lower: 0.05, upper: 2.0 };
            let w = be.eval(s);
            prop_assert!((0.05..=2.0).contains(&w));
            prop_assert_eq!(w, be.eval(-s));
            prop_assert!(LinkMap::Exp.eval(s) > 0.0);
        }

        #[test]
        fn delta_is_antisymmetric(a in -3.0f64..3.0, b in -3.0f64..3.0, node in 0usize..20) {
            let g = grid1(20);
            let m = HyperModel::with_default_link(&g, HyperFamily::GaussianMatern { ell0: 1.0, sigma0: 1.0 }).unwrap();
            let mut u: Vec<f64> = (0..20).map(|i| (i as f64 * 0.4).cos()).collect();
            u[node] = a;
            let fwd = m.log_density_delta(&u, node, b);
            let mut u2 = u.clone();
            u2[node] = b;
            let back = m.log_density_delta(&u2, node, a);
            prop_assert!((fwd + back).abs() < 1e-9 * (1.0 + fwd.abs()));
        }
    }
}
