use std::f64::consts::PI;
use std::sync::OnceLock;

use blinddeconv::charfn::{ClassParams, TruncatedAnalytic};
use blinddeconv::fixtures::{make_fixture, NoiseSpec, SignalSpec};
use blinddeconv::kernel::RadialKernel;
use blinddeconv::metrics::{dist_to_set, offset_contains, DiscreteMeasure, GridSpec, PointSet, Sample, Window};
use blinddeconv::support::{
    degree_formula, estimate_support, fourier_l2, gamma_bound, gbar_oracle, measure_cf, sandwich, schedule,
    GhatEngine, Mode, PipelineConfig, PracticalSchedule, Schedule, SupportEstimate, SupportParams, Threshold,
};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn kernel() -> &'static RadialKernel {
    static K: OnceLock<RadialKernel> = OnceLock::new();
    K.get_or_init(|| RadialKernel::build(1.0, 2, 1e-8).unwrap())
}

fn params(mode: Mode, grid: GridSpec) -> SupportParams {
    SupportParams { kappa: 1.0, a: 1.0, c_h: (6.0f64).exp(), ell: 0.5, d: 1, a_std: 0.0, eval_grid: grid, mode }
}

fn circle_measure(radius: f64, atoms: usize) -> DiscreteMeasure {
    let pts: Vec<Vec<f64>> = (0..atoms)
        .map(|k| {
            let th = 2.0 * PI * k as f64 / atoms as f64;
            vec![radius * th.cos(), radius * th.sin()]
        })
        .collect();
    DiscreteMeasure::uniform(PointSet::from_points(&pts).unwrap()).unwrap()
}

#[test]
fn degree_formula_at_one_million() {
    let n = 1_000_000usize;
    let ln = (n as f64).ln();
    assert!((ln - 13.8155).abs() < 1e-4);
    assert!((ln.ln() - 2.6258).abs() < 1e-4);
    let raw = ln / (4.0 * ln.ln());
    assert!((raw - 1.3154).abs() < 1e-4);
    assert_eq!(degree_formula(n, 1.0, 1.0).unwrap(), raw.floor() as u32);
    assert_eq!(degree_formula(n, 1.0, 1.0).unwrap(), 1);
    assert!(degree_formula(10, 1.0, 1.0).is_err());
}

#[test]
fn paper_schedule_bandwidth_exceeds_the_data() {
    let grid = GridSpec::cube(2, -1.0, 1.0, 11).unwrap();
    let p = params(Mode::Paper, grid);
    p.validate(2).unwrap();
    let s = schedule(1_000_000, &p, 1.0, kernel(), Some(2.0)).unwrap();
    assert_eq!(s.m, 1);
    assert_eq!(s.h, (6.0f64).exp());
    assert!((s.h - 403.43).abs() < 0.01);
    assert!(s.warning.is_some());
    match s.threshold {
        Threshold::Absolute(l) => assert_eq!(l, (1.0 / s.h).powf(0.5)),
        other => panic!("unexpected threshold {other:?}"),
    }
    let low = SupportParams { c_h: 100.0, ..p };
    assert!(low.validate(2).is_err());
}

#[test]
fn practical_schedule_formulas() {
    let grid = GridSpec::cube(2, -1.0, 1.0, 11).unwrap();
    let ps = PracticalSchedule::default();
    let p = params(Mode::Practical(ps.clone()), grid);
    for n in [1_000usize, 10_000, 100_000] {
        let ln = (n as f64).ln();
        let m = (ps.c_m / 4.0 * ln / ln.ln()).floor();
        let s = schedule(n, &p, 4.0, kernel(), None).unwrap();
        assert_eq!(s.m as f64, m);
        assert_eq!(s.h, ps.c_hs * m.powf(-1.0));
        assert_eq!(s.threshold, Threshold::RelativeToMax(ps.lambda_rel));
    }
}

#[test]
fn ghat_from_true_cf_matches_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let pts: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let w: Vec<f64> = (0..50).map(|_| rng.random_range(0.1..1.0)).collect();
    let g = DiscreteMeasure::new(PointSet::from_points(&pts).unwrap(), w).unwrap();
    let h = 0.2;
    let engine = GhatEngine::from_fn(kernel(), h, 96, |t| measure_cf(&g, t));
    let grid = GridSpec::cube(2, -1.5, 1.5, 21).unwrap();
    let direct: Vec<f64> = (0..grid.len()).map(|i| gbar_oracle(&g, kernel(), h, &grid.point(i))).collect();
    let peak = direct.iter().copied().fold(0.0, f64::max);
    let fourier = engine.eval_grid(&grid);
    for (a, b) in fourier.iter().zip(&direct) {
        assert!((a - b).abs() <= 1e-4 * peak, "{a} vs {b}");
    }
}

#[test]
fn modulation_shifts_ghat() {
    let g = DiscreteMeasure::new(
        PointSet::from_points(&[vec![0.1, -0.2], vec![-0.3, 0.4]]).unwrap(),
        vec![0.3, 0.7],
    )
    .unwrap();
    let h = 0.3;
    let shift = [0.25, -0.15];
    let base = GhatEngine::from_fn(kernel(), h, 64, |t| measure_cf(&g, t));
    let moved = GhatEngine::from_fn(kernel(), h, 64, |t| {
        measure_cf(&g, t) * Complex64::from_polar(1.0, -(t[0] * shift[0] + t[1] * shift[1]))
    });
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let y = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let a = moved.eval(&y);
        let b = base.eval(&[y[0] + shift[0], y[1] + shift[1]]);
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn ghat_is_linear_in_the_cf() {
    let p1 = TruncatedAnalytic::from_params(2, 2, vec![1.0, 0.2, -0.1, -0.3, 0.05, -0.2]).unwrap();
    let p2 = TruncatedAnalytic::from_params(2, 2, vec![1.0, -0.4, 0.3, -0.1, 0.0, -0.25]).unwrap();
    let mix = p1.mix(&p2, 0.3);
    let h = 0.5;
    let (e1, e2, em) = (
        GhatEngine::new(&p1, kernel(), h, 48),
        GhatEngine::new(&p2, kernel(), h, 48),
        GhatEngine::new(&mix, kernel(), h, 48),
    );
    for y in [[0.0, 0.0], [0.4, -0.7], [-1.2, 0.3]] {
        let lhs = em.eval(&y);
        let rhs = 0.3 * e1.eval(&y) + 0.7 * e2.eval(&y);
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }
}

#[test]
fn minoration_on_the_circle() {
    let radius = 0.5;
    let g = circle_measure(radius, 4096);
    let d = &kernel().diagnostics;
    // exact arc mass within distance r of a circle point is 2 asin(r / 2R) / pi >= r / (pi R)
    let a = 1.0 / (PI * radius);
    for h in [0.005, 0.01, 0.02] {
        let bound = a * d.c_a * d.d_a / h;
        let min_on_circle = (0..256)
            .map(|k| {
                let th = 2.0 * PI * (k as f64 + 0.37) / 256.0;
                gbar_oracle(&g, kernel(), h, &[radius * th.cos(), radius * th.sin()])
            })
            .fold(f64::INFINITY, f64::min);
        assert!(min_on_circle >= bound, "h = {h}: {min_on_circle} < {bound}");
    }
}

#[test]
fn far_field_stays_bounded() {
    let radius = 0.5;
    let g = circle_measure(radius, 4096);
    let k = kernel();
    let beta = k.diagnostics.beta;
    for h in [0.005f64, 0.01] {
        let dist = h * (2.0 / beta * (1.0 / h).ln()).powf(2.0);
        let mut far_max = 0.0_f64;
        for ix in -60..=60 {
            for iy in -60..=60 {
                let y = [ix as f64 * 0.05, iy as f64 * 0.05];
                if dist_to_set(g.support(), &y) >= dist {
                    far_max = far_max.max(gbar_oracle(&g, k, h, &y));
                }
            }
        }
        let near = gbar_oracle(&g, k, h, &[radius, 0.0]);
        assert!(far_max <= 1.0, "h = {h}: far max {far_max}");
        assert!(far_max < 1e-2 * near);
    }
}

#[test]
fn gamma_bound_with_a_single_bump() {
    let g = circle_measure(0.5, 1024);
    let truth = TruncatedAnalytic::from_measure(&g, 10);
    let mut params = truth.params().to_vec();
    params[4] += 0.1;
    let bumped = TruncatedAnalytic::from_params(2, 10, params).unwrap();
    let grid = GridSpec::cube(2, -1.0, 1.0, 21).unwrap();
    let exact = gamma_bound(&truth, |t| truth.eval(t), kernel(), 0.4, 10, &grid, 48);
    assert!(exact.measured < 1e-12 && exact.bound < 1e-12);
    let mut ratios = Vec::new();
    for h in [0.2f64, 0.4, 0.8] {
        let r = gamma_bound(&bumped, |t| truth.eval(t), kernel(), h, 10, &grid, 48);
        assert!(r.measured > 0.0);
        assert!(r.holds(1e-9), "h = {h}: {} > {}", r.measured, r.bound);
        ratios.push((h.ln(), (r.bound / r.cf_l2_gap).ln()));
    }
    let slope = (ratios[2].1 - ratios[0].1) / (ratios[2].0 - ratios[0].0);
    assert!((slope + 1.0).abs() < 1e-3, "slope {slope}");
    // the kernel factor equals h^{-D/2} ||F[psi]||_2 (2 pi)^{-D}
    let h = 0.4;
    let r = gamma_bound(&bumped, |t| truth.eval(t), kernel(), h, 10, &grid, 48);
    let expected = (2.0 * PI).powi(-2) * fourier_l2(kernel()) / h;
    assert!((r.bound / r.cf_l2_gap - expected).abs() < 1e-3 * expected);
}

#[test]
fn point_mass_estimate_stays_near_the_origin() {
    let s = Sample::new(vec![0.0; 2 * 300], 1, 1).unwrap();
    let grid = GridSpec::cube(2, -1.0, 1.0, 41).unwrap();
    let ps = PracticalSchedule { m: Some(4), h: Some(0.05), ..Default::default() };
    let p = params(Mode::Practical(ps), grid);
    let class = ClassParams::new(1.0, 4.0, 1.0).unwrap();
    let cfg = PipelineConfig { ghat_order: 48, ..Default::default() };
    let run = estimate_support(&s, &p, &class, kernel(), &cfg).unwrap();
    assert!(!run.estimate.cells.is_empty());
    let reach = kernel().diagnostics.c_a * 0.05;
    for c in run.estimate.cells.iter() {
        assert!(c[0].hypot(c[1]) <= reach + 0.05, "{c:?}");
    }
}

#[test]
fn circle_support_over_twenty_seeds() {
    let grid = GridSpec::cube(2, -1.0, 1.0, 101).unwrap();
    let p = params(Mode::Practical(PracticalSchedule::default()), grid);
    let class = ClassParams::new(1.0, 4.0, 1.0).unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.optimizer.quad_order = 40;
    let k = Window::Box { lower: vec![-1.0, -1.0], upper: vec![1.0, 1.0] };
    let mut good = 0;
    for seed in 0..20u64 {
        let fx = make_fixture(&SignalSpec::Circle { radius: 0.5 }, &NoiseSpec::Gaussian { sigma: 0.1 }, 10_000, 1, seed)
            .unwrap();
        cfg.optimizer.seed = seed;
        let run = estimate_support(&fx.sample, &p, &class, kernel(), &cfg).unwrap();
        let risk = run.estimate.risk(&fx.truth, &k);
        if risk < 0.25 {
            good += 1;
            let sw = sandwich(&run.estimate, &fx.truth, 0.25, &k);
            assert!(sw.estimate_near_truth, "seed {seed}");
            // every estimated cell lies within 0.25 of the circle, checked point by point
            for c in run.estimate.cells.iter() {
                assert!(offset_contains(&fx.truth, 0.25, c).unwrap());
            }
        }
    }
    assert!(good >= 16, "{good}/20 seeds below 0.25");
}

fn sched(threshold: f64) -> Schedule {
    Schedule { m: 1, h: 1.0, threshold: Threshold::Absolute(threshold), warning: None }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn level_sets_are_nested(values in prop::collection::vec(-1.0..1.0f64, 25), l1 in 0.01..0.5f64, dl in 0.0..0.5f64) {
        let grid = GridSpec::cube(2, 0.0, 1.0, 5).unwrap();
        let lo = SupportEstimate::from_grid(&values, &grid, 1.0, &sched(l1)).unwrap();
        let hi = SupportEstimate::from_grid(&values, &grid, 1.0, &sched(l1 + dl)).unwrap();
        for c in hi.cells.iter() {
            prop_assert!(lo.cells.iter().any(|d| d == c));
        }
    }
}
