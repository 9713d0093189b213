use blinddeconv::error::Error;
use blinddeconv::kernel::RadialKernel;
use blinddeconv::metrics::{DiscreteMeasure, GridSpec, PointSet};
use blinddeconv::quad::composite;
use blinddeconv::support::{gbar_grid, SupportEstimate};
use blinddeconv::wasserstein::{build_phat, w2_upper_bound_check, wasserstein_p, wasserstein_p_budget};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

fn measure(points: &[Vec<f64>], weights: &[f64]) -> DiscreteMeasure {
    DiscreteMeasure::new(PointSet::from_points(points).unwrap(), weights.to_vec()).unwrap()
}

fn estimate(cells: PointSet, grid: &GridSpec) -> SupportEstimate {
    SupportEstimate {
        cells,
        kappa: 1.0,
        h: 0.1,
        m: 4,
        threshold: 0.0,
        ghat_max: 1.0,
        grid: grid.clone(),
        warning: None,
    }
}

/// Minimum of the 3 x 2 transportation LP by enumerating basic solutions: pick 4 of
/// the 6 flows, solve the 4 independent marginal constraints, keep the feasible ones.
fn vertex_enumeration(a: &[f64; 3], b: &[f64; 2], cost: &[[f64; 2]; 3]) -> f64 {
    // constraint rows: three row sums and the first column sum (the second is implied)
    let mut full = DMatrix::<f64>::zeros(4, 6);
    for i in 0..3 {
        for j in 0..2 {
            full[(i, 2 * i + j)] = 1.0;
        }
        full[(3, 2 * i)] = 1.0;
    }
    let rhs = DVector::from_vec(vec![a[0], a[1], a[2], b[0]]);
    let mut best = f64::INFINITY;
    for mask in 0u32..64 {
        if mask.count_ones() != 4 {
            continue;
        }
        let cols: Vec<usize> = (0..6).filter(|k| mask & (1 << k) != 0).collect();
        let sub = DMatrix::from_fn(4, 4, |r, c| full[(r, cols[c])]);
        let Some(x) = sub.lu().solve(&rhs) else { continue };
        if x.iter().any(|v| *v < -1e-12 || !v.is_finite()) {
            continue;
        }
        let value: f64 = cols.iter().zip(x.iter()).map(|(&k, v)| cost[k / 2][k % 2] * v).sum();
        best = best.min(value);
    }
    best
}

#[test]
fn dirac_masses_are_at_their_distance() {
    let a = [0.3f64, -1.2];
    let b = [2.0, 0.5];
    let d = ((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1])).sqrt();
    for p in [1.0, 1.5, 2.0, 3.0] {
        let w = wasserstein_p(&DiscreteMeasure::dirac(&a), &DiscreteMeasure::dirac(&b), p).unwrap();
        assert!((w - d).abs() < 1e-14, "p = {p}: {w} vs {d}");
    }
    let mu = measure(&[vec![0.0, 0.0], vec![1.0, 1.0]], &[0.25, 0.75]);
    assert_eq!(wasserstein_p(&mu, &mu, 2.0).unwrap(), 0.0);
}

#[test]
fn three_against_two_matches_vertex_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..25 {
        let xs: Vec<Vec<f64>> = (0..3).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let ys: Vec<Vec<f64>> = (0..2).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let mut a = [rng.random_range(0.1..1.0), rng.random_range(0.1..1.0), rng.random_range(0.1..1.0)];
        let mut b = [rng.random_range(0.1..1.0), rng.random_range(0.1..1.0)];
        let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
        a.iter_mut().for_each(|v| *v /= sa);
        b.iter_mut().for_each(|v| *v /= sb);
        for p in [1.0, 2.0] {
            let mut cost = [[0.0; 2]; 3];
            for i in 0..3 {
                for j in 0..2 {
                    let d = ((xs[i][0] - ys[j][0]).powi(2) + (xs[i][1] - ys[j][1]).powi(2)).sqrt();
                    cost[i][j] = d.powf(p);
                }
            }
            let oracle = vertex_enumeration(&a, &b, &cost).powf(1.0 / p);
            let got = wasserstein_p(&measure(&xs, &a), &measure(&ys, &b), p).unwrap();
            assert!((got - oracle).abs() < 1e-12, "p = {p}: {got} vs {oracle}");
        }
    }
}

#[test]
fn budget_overflow_is_reported() {
    let pts: Vec<Vec<f64>> = (0..10).map(|k| vec![k as f64, 0.0]).collect();
    let mu = DiscreteMeasure::uniform(PointSet::from_points(&pts).unwrap()).unwrap();
    let nu = DiscreteMeasure::dirac(&[0.0, 0.0]);
    let err = wasserstein_p_budget(&mu, &nu, 2.0, 5).unwrap_err();
    assert_eq!(err, Error::OtBudget { atoms: 10, budget: 5 });
    assert!(err.to_string().contains("coarsen"));
    assert!(wasserstein_p_budget(&mu, &nu, 2.0, 10).is_ok());
    assert!(wasserstein_p(&mu, &nu, 0.5).is_err());
}

#[test]
fn nonnegative_ghat_on_full_mask_is_normalized_ghat() {
    let grid = GridSpec::cube(2, -1.0, 1.0, 11).unwrap();
    let ghat: Vec<f64> = (0..grid.len()).map(|i| 1.0 + (i % 7) as f64).collect();
    let est = estimate(grid.points(), &grid);
    let p = build_phat(&est, &grid, &ghat, 0.05, 10.0).unwrap();
    let total: f64 = ghat.iter().sum();
    assert_eq!(p.measure.len(), grid.len());
    for (w, g) in p.measure.weights().iter().zip(&ghat) {
        assert!((w - g / total).abs() < 1e-15);
    }
    assert!((p.mask_mass - total * grid.cell_volume()).abs() < 1e-12);
    assert!((p.c_n * p.mask_mass - 1.0).abs() < 1e-15);
}

#[test]
fn excluded_cells_do_not_matter() {
    let grid = GridSpec::cube(2, -1.0, 1.0, 21).unwrap();
    let core = PointSet::from_points(&[vec![0.0, 0.0], vec![0.3, 0.1]]).unwrap();
    let est = estimate(core, &grid);
    let ghat: Vec<f64> = (0..grid.len()).map(|i| (-(grid.point(i)[0].powi(2) + grid.point(i)[1].powi(2))).exp()).collect();
    let base = build_phat(&est, &grid, &ghat, 0.25, 10.0).unwrap();
    // a negative lobe far from the mask
    let lobed: Vec<f64> = (0..grid.len())
        .map(|i| if grid.point(i)[0] < -0.6 { -3.0 } else { ghat[i] })
        .collect();
    assert_eq!(build_phat(&est, &grid, &lobed, 0.25, 10.0).unwrap(), base);
    // rebuilding from the kept cells is idempotent
    let again = build_phat(&estimate(base.mask.clone(), &grid), &grid, &ghat, 1e-9, 10.0).unwrap();
    assert_eq!(again.measure, base.measure);
    // all mass outside the mask is a degenerate estimate
    let neg: Vec<f64> = ghat.iter().map(|v| -v).collect();
    assert_eq!(build_phat(&est, &grid, &neg, 0.25, 10.0).unwrap_err(), Error::DegenerateEstimate);
}

#[test]
fn reflection_permutes_cells_consistently() {
    let grid = GridSpec::cube(2, -1.0, 1.0, 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ghat: Vec<f64> = (0..grid.len()).map(|_| rng.random_range(-0.5..1.0)).collect();
    let core = PointSet::from_points(&[vec![0.2, -0.1], vec![-0.4, 0.5]]).unwrap();
    let p = build_phat(&estimate(core.clone(), &grid), &grid, &ghat, 0.4, 10.0).unwrap();

    // the reflection x -> -x maps cell i to cell len - 1 - i
    let n = grid.len();
    let flipped: Vec<f64> = (0..n).map(|i| ghat[n - 1 - i]).collect();
    let core_f = core.map(|x| x.iter().map(|v| -v).collect());
    let q = build_phat(&estimate(core_f, &grid), &grid, &flipped, 0.4, 10.0).unwrap();
    let key = |m: &DiscreteMeasure, sign: f64| {
        let mut v: Vec<((i64, i64), f64)> = m
            .support()
            .iter()
            .zip(m.weights())
            .map(|(x, &w)| (((sign * x[0] * 1e6).round() as i64, (sign * x[1] * 1e6).round() as i64), w))
            .collect();
        v.sort_by_key(|e| e.0);
        v
    };
    let (kp, kq) = (key(&p.measure, 1.0), key(&q.measure, -1.0));
    assert_eq!(kp.len(), kq.len());
    for (a, b) in kp.iter().zip(&kq) {
        assert_eq!(a.0, b.0);
        assert!((a.1 - b.1).abs() <= 1e-14 * a.1);
    }
    assert!((p.mask_mass - q.mask_mass).abs() <= 1e-14 * p.mask_mass);

    // the order in which the estimated cells are listed is irrelevant
    let mut pts = core.to_vecs();
    pts.reverse();
    let r = build_phat(&estimate(PointSet::from_points(&pts).unwrap(), &grid), &grid, &ghat, 0.4, 10.0).unwrap();
    assert_eq!(r, p);
}

#[test]
fn translation_moves_atoms_and_keeps_risk() {
    let grid = GridSpec::cube(2, -1.0, 1.0, 21).unwrap();
    let shift = [0.7, -1.3];
    let moved = GridSpec::new(
        grid.lower.iter().zip(&shift).map(|(a, s)| a + s).collect(),
        grid.upper.iter().zip(&shift).map(|(a, s)| a + s).collect(),
        grid.counts.clone(),
    )
    .unwrap();
    let ghat: Vec<f64> = (0..grid.len()).map(|i| (-4.0 * grid.point(i)[0].powi(2)).exp() * (1.0 + grid.point(i)[1])).collect();
    let core = PointSet::from_points(&[vec![0.0, 0.0], vec![0.2, 0.4]]).unwrap();
    let core_m = core.map(|x| vec![x[0] + shift[0], x[1] + shift[1]]);
    let p = build_phat(&estimate(core, &grid), &grid, &ghat, 0.47, 100.0).unwrap();
    let q = build_phat(&estimate(core_m, &moved), &moved, &ghat, 0.47, 100.0).unwrap();
    assert_eq!(p.measure.len(), q.measure.len());
    for (x, y) in p.measure.support().iter().zip(q.measure.support().iter()) {
        assert!((x[0] + shift[0] - y[0]).abs() < 1e-12 && (x[1] + shift[1] - y[1]).abs() < 1e-12, "{x:?} {y:?}");
    }
    let truth = measure(&[vec![0.1, 0.1], vec![-0.3, 0.2]], &[0.4, 0.6]);
    let truth_m = measure(&[vec![0.1 + shift[0], 0.1 + shift[1]], vec![-0.3 + shift[0], 0.2 + shift[1]]], &[0.4, 0.6]);
    let a = wasserstein_p(&truth, &p.measure, 2.0).unwrap();
    let b = wasserstein_p(&truth_m, &q.measure, 2.0).unwrap();
    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
}

#[test]
fn oracle_estimate_with_small_bandwidth_is_close() {
    let kernel = RadialKernel::build(1.0, 2, 1e-8).unwrap();
    // second moment of psi_{A,1} in the plane by radial quadrature
    let m2 = composite(0.0, kernel.r_cut, 20_000, 8).integrate(|r| 2.0 * PI * r.powi(3) * kernel.profile_at(r));
    assert!(m2 > 0.0);

    let g = measure(&[vec![0.0, 0.0], vec![0.5, 0.2], vec![-0.3, 0.4]], &[0.5, 0.3, 0.2]);
    let grid = GridSpec::cube(2, -1.0, 1.0, 81).unwrap();
    for h in [0.03, 0.06] {
        let ghat = gbar_grid(&g, &kernel, h, &grid);
        let est = SupportEstimate { h, ..estimate(g.support().clone(), &grid) };
        let p = build_phat(&est, &grid, &ghat, 0.5, 10.0).unwrap();
        let report = w2_upper_bound_check(&g, &p, &kernel, &grid, 20_000).unwrap();
        let bound = 2.0 * m2.sqrt() * h;
        assert!(report.risk <= bound, "h = {h}: W2 = {} > {bound}", report.risk);
        assert!(report.holds(1e-6), "{report:?}");
    }
}

#[test]
fn identical_measures_report_zero() {
    let kernel = RadialKernel::build(1.0, 2, 1e-8).unwrap();
    let grid = GridSpec::cube(2, -1.0, 1.0, 21).unwrap();
    let g = measure(&[vec![0.0, 0.0]], &[1.0]);
    // a smoothing width far below the grid spacing puts all mass on the atom's cell
    let ghat = gbar_grid(&g, &kernel, 1e-4, &grid);
    let est = SupportEstimate { h: 1e-4, ..estimate(g.support().clone(), &grid) };
    let p = build_phat(&est, &grid, &ghat, 0.05, 10.0).unwrap();
    let report = w2_upper_bound_check(&g, &p, &kernel, &grid, 3000).unwrap();
    assert_eq!((report.risk, report.bias, report.variance, report.villani), (0.0, 0.0, 0.0, 0.0));
}

fn small_measure() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (1usize..7).prop_flat_map(|k| {
        (
            prop::collection::vec(prop::collection::vec(-2.0..2.0f64, 2), k),
            prop::collection::vec(0.05..1.0f64, k),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn wasserstein_is_a_metric(a in small_measure(), b in small_measure(), c in small_measure()) {
        let (a, b, c) = (measure(&a.0, &a.1), measure(&b.0, &b.1), measure(&c.0, &c.1));
        for p in [1.0, 2.0] {
            let ab = wasserstein_p(&a, &b, p).unwrap();
            let ba = wasserstein_p(&b, &a, p).unwrap();
            let bc = wasserstein_p(&b, &c, p).unwrap();
            let ac = wasserstein_p(&a, &c, p).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12);
            prop_assert!(ac <= ab + bc + 1e-9);
            prop_assert!(wasserstein_p(&a, &a, p).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn wasserstein_grows_with_the_order(a in small_measure(), b in small_measure()) {
        let (a, b) = (measure(&a.0, &a.1), measure(&b.0, &b.1));
        let w: Vec<f64> = [1.0, 1.5, 2.0, 3.0].iter().map(|&p| wasserstein_p(&a, &b, p).unwrap()).collect();
        for k in 1..w.len() {
            prop_assert!(w[k - 1] <= w[k] * (1.0 + 1e-10) + 1e-12, "{:?}", w);
        }
    }
}
