use matern_hyper::forward::{grid_points, interp_operator, phantom, Measurements, ProblemKind};
use matern_hyper::grid::{Boundary, Field, Grid, Spacing};
use matern_hyper::hyper::{HyperFamily, HyperModel};
use matern_hyper::oracle;
use matern_hyper::sampler::det_ratio_exact;
use matern_hyper::spde::{sample_realization, PrecisionFactor};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Cauchy, ContinuousCDF};

fn periodic(dim: usize, n: usize, extent: f64) -> Grid {
    Grid::new(dim, &vec![n; dim], &vec![extent; dim], Boundary::Periodic).unwrap()
}

fn ell_field(grid: Grid, logs: &[f64]) -> Field {
    Field::new(grid, logs.iter().map(|l| l.exp()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn changing_one_ell_changes_one_row(
        logs in proptest::collection::vec(-2.0f64..1.0, 24),
        node in 0usize..24,
        new_log in -2.0f64..1.0,
        two_d in any::<bool>(),
    ) {
        let grid = if two_d { periodic(2, 4, 1.0) } else { periodic(1, 24, 5.0) };
        let n = grid.len();
        let node = node % n;
        let a = PrecisionFactor::assemble(&grid, &ell_field(grid, &logs[..n]), 1.3).unwrap();
        let mut changed = logs[..n].to_vec();
        changed[node] = new_log;
        let b = PrecisionFactor::assemble(&grid, &ell_field(grid, &changed), 1.3).unwrap();
        let (da, db) = (a.matrix().to_dense(), b.matrix().to_dense());
        for r in 0..n {
            if r != node {
                prop_assert_eq!(da.row(r), db.row(r));
            }
        }
    }

    #[test]
    fn covariance_scales_with_sigma_squared(c in 0.1f64..10.0, log_ell in -1.0f64..1.0) {
        let grid = periodic(1, 30, 6.0);
        let ell = Field::constant(grid, log_ell.exp());
        let base = oracle::dense_covariance(&PrecisionFactor::assemble(&grid, &ell, 1.0).unwrap()).unwrap();
        let scaled = oracle::dense_covariance(&PrecisionFactor::assemble(&grid, &ell, c).unwrap()).unwrap();
        let diff = (&scaled - &base * (c * c)).abs().max();
        prop_assert!(diff <= 1e-9 * scaled.abs().max());
    }

    #[test]
    fn realisations_are_finite_over_wide_length_scales(
        logs in proptest::collection::vec(-6.9f64..6.9, 16),
        seed in any::<u64>(),
        two_d in any::<bool>(),
    ) {
        let grid = if two_d { periodic(2, 4, 1.0) } else { periodic(1, 16, 1.0) };
        let factor = PrecisionFactor::assemble(&grid, &ell_field(grid, &logs[..grid.len()]), 1.0).unwrap();
        let v = sample_realization(&factor, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(v.values().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn determinant_ratio_matches_dense(
        logs in proptest::collection::vec(-1.5f64..0.7, 36),
        node in 0usize..36,
        new_log in -1.5f64..0.7,
        two_d in any::<bool>(),
    ) {
        let grid = if two_d { periodic(2, 6, 1.0) } else { periodic(1, 36, 8.0) };
        let factor = PrecisionFactor::assemble(&grid, &ell_field(grid, &logs), 1.0).unwrap();
        let update = factor.replace_row(node, new_log.exp()).unwrap();
        let ratio = det_ratio_exact(&factor, &update).unwrap();
        let old = factor.matrix().to_dense().determinant();
        let mut next = factor.clone();
        next.commit(&update);
        let new = next.matrix().to_dense().determinant();
        prop_assert!(((ratio - new / old) / (new / old)).abs() < 1e-8);
    }

    #[test]
    fn interpolation_selection_is_diagonal(half in 3usize..60) {
        let unknown = Grid::with_spacing(1, &[2 * half - 1], &[10.0], Boundary::Periodic, Spacing::Endpoint).unwrap();
        let meas = Grid::with_spacing(1, &[half], &[10.0], Boundary::Periodic, Spacing::Endpoint).unwrap();
        let a = interp_operator(&unknown, &grid_points(&meas)).unwrap();
        let ata = a.gram(1.0).to_dense();
        for i in 0..ata.nrows() {
            for j in 0..ata.ncols() {
                let want = if i == j && i % 2 == 0 { 1.0 } else { 0.0 };
                prop_assert_eq!(ata[(i, j)], want);
            }
        }
    }

    #[test]
    fn phantoms_bounded_by_one(x in -1.0f64..11.0, y in -0.5f64..1.5) {
        prop_assert!(phantom(ProblemKind::Interp1d, [x, 0.0]).abs() <= 1.0);
        prop_assert!(phantom(ProblemKind::Interp2d, [y, x / 10.0]).abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn dense_and_sparse_conditional_means_agree(log_ell in -2.0f64..1.0) {
        let grid = periodic(1, 40, 10.0);
        let meas = Measurements::synthesize(ProblemKind::Interp1d, grid_points(&periodic(1, 20, 10.0)), 0.1, 7);
        let problem = meas.problem(&grid).unwrap();
        let factor = PrecisionFactor::assemble(&grid, &Field::constant(grid, log_ell.exp()), 2.0).unwrap();
        let dense = oracle::conditional_gaussian(&problem.a, problem.noise_std, &problem.y, &factor).unwrap();
        let sparse = oracle::conditional_mean(&problem, &factor).unwrap();
        for (a, b) in dense.mean.iter().zip(&sparse) {
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn logdet_is_additive_over_blocks(
        a in proptest::collection::vec(-1.0f64..1.0, 9),
        b in proptest::collection::vec(-1.0f64..1.0, 4),
    ) {
        let ma = DMatrix::from_row_slice(3, 3, &a) + DMatrix::identity(3, 3) * 4.0;
        let mb = DMatrix::from_row_slice(2, 2, &b) + DMatrix::identity(2, 2) * 4.0;
        let mut block = DMatrix::zeros(5, 5);
        block.view_mut((0, 0), (3, 3)).copy_from(&ma);
        block.view_mut((3, 3), (2, 2)).copy_from(&mb);
        let whole = oracle::dense_log_abs_det(&block).unwrap();
        let parts = oracle::dense_log_abs_det(&ma).unwrap() + oracle::dense_log_abs_det(&mb).unwrap();
        prop_assert!((whole - parts).abs() < 1e-12);
    }
}

#[test]
fn cauchy_walk_increments_follow_their_law() {
    let grid = Grid::with_spacing(1, &[2001], &[10.0], Boundary::Periodic, Spacing::Endpoint).unwrap();
    let model = HyperModel::with_default_link(&grid, HyperFamily::CauchyWalk { scale: None }).unwrap();
    let u = model.sample(&mut ChaCha8Rng::seed_from_u64(5)).unwrap().into_values();
    let inc: Vec<f64> = u.windows(2).map(|w| w[1] - w[0]).collect();
    let law = Cauchy::new(0.0, grid.h()).unwrap();
    let d = oracle::ks_statistic(&inc, |x| law.cdf(x));
    assert!(oracle::ks_pvalue(d, inc.len()) > 0.01, "D = {d}");
}
