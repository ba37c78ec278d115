//! Acceptance suite. Runs every primary criterion at its stated tolerance
//! and prints one PASS/FAIL line per criterion followed by the measured
//! quantities. Exits non-zero when any criterion fails.

use std::error::Error as StdError;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use roughdyn::cocycle::{inverse_jacobian, solve_linearized};
use roughdyn::controlled::{leibniz_compose, leibniz_remainders, smooth_compose, smooth_compose_remainders, ControlledPathGrid};
use roughdyn::drivers::{fbm_grid, sample_fbm, DriverMeta, FbmSpec, RandomScenario, RoughPathGrid};
use roughdyn::field::{Polynomial3, SineMix, SmoothMap};
use roughdyn::manifold::{radius_estimate, backward_probe, sphere_directions, stability_probe, BackwardConfig, Bisection, ProbeConfig, Verdict};
use roughdyn::problem::{DriverConfig, FieldSpec, Problem, StationaryPoint};
use roughdyn::sewing::{local_defect, rough_integral};
use roughdyn::solver::{convergence_study, solve_on_partition, solve_rde, DriftScheme, StepControl};
use roughdyn::spectrum::{lyapunov_qr, LyapunovSpectrum, SpectrumConfig};

type Outcome = Result<Report, Box<dyn StdError>>;

#[derive(Default)]
struct Report {
    failed: bool,
    lines: Vec<String>,
}

impl Report {
    fn check(&mut self, ok: bool, msg: impl Into<String>) {
        self.failed |= !ok;
        let tag = if ok { "ok " } else { "BAD" };
        self.lines.push(format!("{tag} {}", msg.into()));
    }
}

// ---------------------------------------------------------------- oracles

/// `e^A` by scaling and squaring with a 30-term Taylor series.
fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.abs().row_sum().max();
    let s = if norm > 0.25 { (norm / 0.25).log2().ceil() as i32 } else { 0 };
    let scaled = a / 2f64.powi(s);
    let mut term = DMatrix::<f64>::identity(n, n);
    let mut sum = term.clone();
    for k in 1..30 {
        term = &term * &scaled / k as f64;
        sum += &term;
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

/// Ordinary least-squares slope.
fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn loglog(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    ols_slope(&lx, &ly)
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, x| a.max(x.abs()))
}

// --------------------------------------------------------------- problems

fn zero_noise(m: usize) -> Vec<Vec<Vec<f64>>> {
    vec![vec![vec![0.0; m]; m]]
}

fn rows(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..a.nrows()).map(|i| a.row(i).iter().copied().collect()).collect()
}

fn drift_only(a: &DMatrix<f64>) -> Result<Problem, Box<dyn StdError>> {
    let field = FieldSpec::Linear {
        drift: rows(a),
        noise: zero_noise(a.nrows()),
    }
    .build(1)?;
    Ok(Problem::new(field, DriverConfig::Zero { dim: 1 }, StationaryPoint::FixedZero)?)
}

fn stable_example() -> Result<Problem, Box<dyn StdError>> {
    let field = FieldSpec::StableExample {
        a: vec![-1.0, -2.0],
        eps: 0.05,
        mix: None,
    }
    .build(2)?;
    let driver = DriverConfig::Fbm {
        hurst: 0.35,
        dim: 2,
        refine: 4,
        gamma: None,
    };
    Ok(Problem::new(field, driver, StationaryPoint::FixedZero)?)
}

fn linear_stable() -> Result<Problem, Box<dyn StdError>> {
    let field = FieldSpec::Linear {
        drift: vec![vec![-1.0, 0.5], vec![0.0, -2.0]],
        noise: vec![vec![vec![0.2, 0.0], vec![0.1, -0.2]]],
    }
    .build(1)?;
    let driver = DriverConfig::Fbm {
        hurst: 0.4,
        dim: 1,
        refine: 4,
        gamma: None,
    };
    Ok(Problem::new(field, driver, StationaryPoint::FixedZero)?)
}

fn bistable() -> Result<Problem, Box<dyn StdError>> {
    let field = FieldSpec::BistableCubic { sigma: 0.2 }.build(1)?;
    let driver = DriverConfig::Fbm {
        hurst: 0.4,
        dim: 1,
        refine: 4,
        gamma: None,
    };
    Ok(Problem::new(field, driver, StationaryPoint::Fixed(DVector::from_element(1, 1.0)))?)
}

fn saddle() -> Result<Problem, Box<dyn StdError>> {
    let field = FieldSpec::LinearSaddle {
        a: vec![1.0, -1.0],
        eps: 0.1,
    }
    .build(1)?;
    let driver = DriverConfig::Fbm {
        hurst: 0.4,
        dim: 1,
        refine: 4,
        gamma: None,
    };
    Ok(Problem::new(field, driver, StationaryPoint::FixedZero)?)
}

fn geometric(sigma: f64, b: f64) -> Result<Problem, Box<dyn StdError>> {
    let field = FieldSpec::ScalarGeometric { sigma, b }.build(1)?;
    let driver = DriverConfig::Fbm {
        hurst: 0.35,
        dim: 1,
        refine: 4,
        gamma: None,
    };
    Ok(Problem::new(field, driver, StationaryPoint::FixedZero)?)
}

fn seeds(base: u64, count: u64) -> Vec<u64> {
    (base..base + count).collect()
}

// ---------------------------------------------------------------- algebra

fn algebra() -> Outcome {
    let mut rep = Report::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let (mut assoc, mut split, mut shuffle) = (0f64, 0f64, 0f64);
    for case in 0..1000 {
        let d = 1 + case % 4;
        let n = rng.random_range(3..=12);
        let incs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-0.5..0.5)).collect())
            .collect();
        let grid = RoughPathGrid::lift_uniform(1.0, &incs, 1, 0.5, DriverMeta::polyline())?;
        let u = rng.random_range(1..n - 1);
        let v = rng.random_range(u + 1..n);
        let (a, b, c) = (grid.sig(0, u)?, grid.sig(u, v)?, grid.sig(v, n)?);
        let left = a.chen_mul(&b)?.chen_mul(&c)?;
        let right = a.chen_mul(&b.chen_mul(&c)?)?;
        assoc = assoc.max(left.max_abs_diff(&right));
        split = split.max(grid.sig(0, n)?.max_abs_diff(&left));
        for g in [&a, &b, &c, &left] {
            shuffle = shuffle.max(g.shuffle_defect());
        }
    }
    rep.check(assoc <= 1e-12, format!("Chen associativity defect {assoc:.2e} <= 1e-12"));
    rep.check(split <= 1e-12, format!("split consistency defect {split:.2e} <= 1e-12"));
    rep.check(shuffle <= 1e-12, format!("shuffle defect {shuffle:.2e} <= 1e-12"));

    let mut closed = 0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=10);
        let incs: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-0.3..0.3)]).collect();
        let grid = RoughPathGrid::lift_uniform(1.0, &incs, 1, 0.5, DriverMeta::polyline())?;
        let g = grid.sig(0, n)?;
        let a: f64 = incs.iter().map(|r| r[0]).sum();
        closed = closed
            .max((g.a()[0] - a).abs())
            .max((g.b()[0] - a * a / 2.0).abs())
            .max((g.c()[0] - a.powi(3) / 6.0).abs());
    }
    rep.check(closed <= 1e-14, format!("d=1 closed forms b=a^2/2, c=a^3/6: max error {closed:.2e} <= 1e-14"));
    Ok(rep)
}

// --------------------------------------------------------------- calculus

fn poly_map(n: usize, p: usize, rng: &mut ChaCha8Rng) -> Polynomial3 {
    let l = DMatrix::from_fn(p, n, |_, _| rng.random_range(-1.0..1.0));
    let mut g = Polynomial3::linear(l).with_constant(DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0)));
    for o in 0..p {
        for i in 0..n {
            for j in i..n {
                g.add_quadratic(o, i, j, rng.random_range(-0.5..0.5));
                for k in j..n {
                    g.add_cubic(o, i, j, k, rng.random_range(-0.3..0.3));
                }
            }
        }
    }
    g
}

fn smooth_base(n: usize, gamma: f64) -> roughdyn::Result<Arc<RoughPathGrid>> {
    RoughPathGrid::from_function(|t| vec![(2.0 * t).sin(), t * t - 0.5 * t], 2, n, 1.0, 8, gamma).map(Arc::new)
}

fn mix2() -> SineMix {
    SineMix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.4, -0.3, 0.8]))
}

/// Mean remainder sizes averaged over several paths; orders fitted after
/// dropping the two finest and the three coarsest gaps.
fn averaged_orders(paths: &[ControlledPathGrid]) -> roughdyn::Result<(f64, f64)> {
    let mut acc: Option<(Vec<f64>, Vec<f64>, Vec<f64>)> = None;
    for y in paths {
        let o = y.remainder_orders(0, y.nodes() - 1, 0)?;
        match &mut acc {
            None => acc = Some((o.gaps, o.mean_remainder0, o.mean_remainder1)),
            Some((_, m0, m1)) => {
                for (a, b) in m0.iter_mut().zip(&o.mean_remainder0) {
                    *a += b;
                }
                for (a, b) in m1.iter_mut().zip(&o.mean_remainder1) {
                    *a += b;
                }
            }
        }
    }
    let (gaps, m0, m1) = acc.expect("at least one path");
    let r = 2..gaps.len() - 3;
    Ok((loglog(&gaps[r.clone()], &m0[r.clone()]), loglog(&gaps[r.clone()], &m1[r])))
}

fn calculus() -> Outcome {
    let mut rep = Report::default();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let base = smooth_base(48, 1.0)?;
    let x = ControlledPathGrid::canonical(base.clone(), 1.0)?;
    let g1 = poly_map(2, 4, &mut rng);
    let a = smooth_compose(&g1, &x)?;
    let b = smooth_compose(&mix2(), &x)?;
    let prod = leibniz_compose(&a, 2, &b)?;
    let outer = poly_map(2, 3, &mut rng);
    let comp = smooth_compose(&outer, &prod)?;
    let sine_comp = smooth_compose(&mix2(), &prod)?;
    let (mut e_prod, mut e_comp, mut scale) = (0f64, 0f64, 0f64);
    for s in 0..base.len() {
        for t in s + 1..=base.len() {
            let (d0, d1) = prod.remainders(s, t)?;
            let (c0, c1) = leibniz_remainders(&a, 2, &b, s, t)?;
            e_prod = e_prod.max((&d0 - &c0).amax()).max((&d1 - &c1).amax());
            scale = scale.max(d0.amax()).max(d1.amax());
            for (g, y) in [(&outer as &dyn SmoothMap, &comp), (&mix2() as &dyn SmoothMap, &sine_comp)] {
                let (d0, d1) = y.remainders(s, t)?;
                let (c0, c1) = smooth_compose_remainders(g, &prod, s, t)?;
                e_comp = e_comp.max((&d0 - &c0).amax()).max((&d1 - &c1).amax());
                scale = scale.max(d0.amax()).max(d1.amax());
            }
        }
    }
    rep.check(e_prod <= 1e-10, format!("product remainder identity, direct vs assembled: {e_prod:.2e} <= 1e-10"));
    rep.check(e_comp <= 1e-10, format!("smooth-composition remainder identity, direct vs assembled: {e_comp:.2e} <= 1e-10 (remainders up to {scale:.2e})"));

    // orders on a smooth driver (γ₁ = 1) and on fBm (γ₁ = H = 0.45)
    let smooth = smooth_base(1024, 1.0)?;
    let ys = vec![smooth_compose(&mix2(), &ControlledPathGrid::canonical(smooth, 1.0)?)?];
    let (o0, o1) = averaged_orders(&ys)?;
    rep.check((o0 - 3.0).abs() <= 0.15, format!("smooth driver: order of Y# {o0:.3} within 0.15 of 3"));
    rep.check((o1 - 2.0).abs() <= 0.15, format!("smooth driver: order of (Y1)# {o1:.3} within 0.15 of 2"));

    let h = 0.45;
    let mut ys = Vec::new();
    for seed in 0..8 {
        let spec = FbmSpec {
            hurst: h,
            dim: 2,
            steps: 1024,
            horizon: 1.0,
            refine: 4,
            gamma: Some(h),
        };
        let grid = Arc::new(fbm_grid(&spec, RandomScenario::new(seed))?);
        ys.push(smooth_compose(&mix2(), &ControlledPathGrid::canonical(grid, h)?)?);
    }
    let (o0, o1) = averaged_orders(&ys)?;
    rep.check((o0 - 3.0 * h).abs() <= 0.15, format!("fBm H=0.45: order of Y# {o0:.3} within 0.15 of {:.2}", 3.0 * h));
    rep.check((o1 - 2.0 * h).abs() <= 0.15, format!("fBm H=0.45: order of (Y1)# {o1:.3} within 0.15 of {:.2}", 2.0 * h));
    Ok(rep)
}

// ------------------------------------------------------------ integration

/// Mean local defect over disjoint intervals of `len` steps.
fn mean_defect(y: &ControlledPathGrid, m: usize, len: usize) -> roughdyn::Result<f64> {
    let n = y.nodes() - 1;
    let count = n / len;
    let mut sum = 0.0;
    for k in 0..count {
        sum += local_defect(y, m, k * len, (k + 1) * len)?;
    }
    Ok(sum / count as f64)
}

fn defect_order(paths: &[(ControlledPathGrid, usize)]) -> roughdyn::Result<f64> {
    let lens: Vec<usize> = (0..5).map(|j| 8usize << j).collect();
    let mut means = vec![0.0; lens.len()];
    for (y, m) in paths {
        for (acc, &len) in means.iter_mut().zip(&lens) {
            *acc += mean_defect(y, *m, len)?;
        }
    }
    let h = paths[0].0.base().horizon() / (paths[0].0.nodes() - 1) as f64;
    let sizes: Vec<f64> = lens.iter().map(|&l| l as f64 * h).collect();
    Ok(loglog(&sizes, &means))
}

fn integration() -> Outcome {
    let mut rep = Report::default();
    let base = Arc::new(RoughPathGrid::from_function(|t| vec![(3.0 * t).sin() + 0.5 * t], 1, 512, 1.0, 8, 1.0)?);
    let x = ControlledPathGrid::canonical(base.clone(), 1.0)?;
    let z = rough_integral(&x, 1, 0, base.len())?;
    let x0 = x.value(0)[0];
    let err = (0..=base.len())
        .map(|k| (z.value(k)[0] - (x.value(k)[0].powi(2) - x0 * x0) / 2.0).abs())
        .fold(0.0, f64::max);
    rep.check(err <= 1e-10, format!("int X dX vs (X_t^2 - X_s^2)/2 on a smooth path: {err:.2e} <= 1e-10"));

    // smooth, d = 2: Y = M sin(X) as an operator R^2 -> R^1
    let smooth = smooth_base(4096, 1.0)?;
    let y = smooth_compose(&mix2(), &ControlledPathGrid::canonical(smooth, 1.0)?)?;
    let order = defect_order(&[(y, 1)])?;
    let need = 3.0 * 1.0 + 1.0 - 0.2;
    rep.check(order >= need, format!("smooth driver: local defect order {order:.3} >= {need:.2}"));

    let h = 0.45;
    let mut ys = Vec::new();
    for seed in 0..8 {
        let spec = FbmSpec {
            hurst: h,
            dim: 2,
            steps: 4096,
            horizon: 1.0,
            refine: 4,
            gamma: Some(h),
        };
        let grid = Arc::new(fbm_grid(&spec, RandomScenario::new(100 + seed))?);
        ys.push((smooth_compose(&mix2(), &ControlledPathGrid::canonical(grid, h)?)?, 1));
    }
    let order = defect_order(&ys)?;
    let need = 3.0 * h + h - 0.2;
    rep.check(order >= need, format!("fBm H=0.45: local defect order {order:.3} >= {need:.2}"));
    Ok(rep)
}

// ----------------------------------------------------------------- solver

fn test_matrix() -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[-1.0, 2.0, 0.0, 0.0, -0.5, 1.0, 0.3, 0.0, -2.0])
}

fn solver() -> Outcome {
    let mut rep = Report::default();
    let a = test_matrix();
    let p = drift_only(&a)?;
    let grid = p.driver.grid(1 << 10, 1.0, RandomScenario::new(0))?;
    let mut flow = DMatrix::zeros(3, 3);
    for k in 0..3 {
        let run = solve_rde(&DVector::from_fn(3, |i, _| (i == k) as u8 as f64), &grid, &p.field, &StepControl::fixed())?;
        flow.set_column(k, run.final_state());
    }
    let err = max_abs(&(&flow - expm(&a)));
    rep.check(err <= 1e-8, format!("drift-only flow vs e^(AT), N=2^10: {err:.2e} <= 1e-8"));

    // scalar geometric: exact solution z0 exp(σ δX + bT) from the raw samples
    let (sigma, b, n) = (0.1, 0.3, 1usize << 13);
    let p = geometric(sigma, b)?;
    let z0 = DVector::from_element(1, 1.0);
    let mut finest = 0f64;
    let mut refines = true;
    let mut orders = Vec::new();
    for seed in 0..4 {
        let scen = RandomScenario::new(40 + seed);
        let grid = p.driver.grid(n, 1.0, scen)?;
        let dx: f64 = sample_fbm(0.35, 1, n * 4, 1.0, scen)?.iter().map(|r| r[0]).sum();
        let exact = DVector::from_element(1, (sigma * dx + b).exp());
        let conv = convergence_study(&z0, &grid, &p.field, 5, Some(&exact), DriftScheme::SpaceTime)?;
        finest = finest.max(conv.errors[0]);
        refines &= conv.errors[0] < conv.errors[conv.errors.len() - 1];
        orders.push(conv.order.unwrap_or(f64::NAN));
    }
    rep.check(finest <= 1e-6, format!("scalar geometric z0 e^(sigma dX + bT), N=2^13: max error over 4 seeds {finest:.2e} <= 1e-6"));
    let mean_order = orders.iter().sum::<f64>() / orders.len() as f64;
    rep.check(
        refines && mean_order > 0.0,
        format!("scalar geometric: error at 2^13 below error at 2^9 for every seed; mean fitted order {mean_order:.3} > 0"),
    );
    // against the finest grid as reference the error shrinks at every dyadic level;
    // the coarsest level keeps 1024 steps so the path-wise error is concentrated
    let mut monotone = 0;
    let mut worst_ratio = 0f64;
    for seed in 0..8 {
        let grid = p.driver.grid(1 << 15, 1.0, RandomScenario::new(60 + seed))?;
        let conv = convergence_study(&z0, &grid, &p.field, 5, None, DriftScheme::SpaceTime)?;
        let ok = conv.errors.windows(2).all(|w| w[0] < w[1]);
        monotone += ok as usize;
        for w in conv.errors.windows(2) {
            worst_ratio = worst_ratio.max(w[0] / w[1]);
        }
    }
    rep.check(
        monotone == 8,
        format!("scalar geometric, self-refinement reference: strictly decreasing over 5 levels on {monotone}/8 seeds (worst ratio {worst_ratio:.3})"),
    );

    // flow and cocycle property across an aligned shift
    let p = stable_example()?;
    let ctrl = StepControl::default();
    let (mut flow_err, mut coc_err) = (0f64, 0f64);
    for seed in 0..3 {
        let grid = p.driver.grid(512, 4.0, RandomScenario::new(seed))?;
        let z0 = DVector::from_vec(vec![0.3, -0.2]);
        let full = solve_rde(&z0, &grid, &p.field, &ctrl)?;
        let head_grid = grid.window(0, 256)?;
        let head = solve_rde(&z0, &head_grid, &p.field, &ctrl)?;
        let tail_grid = grid.shift_window(256)?;
        let tail = solve_rde(head.final_state(), &tail_grid, &p.field, &ctrl)?;
        flow_err = flow_err.max((full.final_state() - tail.final_state()).amax());
        let psi = solve_linearized(&full, &grid, &p.field)?;
        let p1 = solve_linearized(&head, &head_grid, &p.field)?;
        let p2 = solve_linearized(&tail, &tail_grid, &p.field)?;
        coc_err = coc_err.max(max_abs(&(psi.final_psi() - p2.final_psi() * p1.final_psi())));
    }
    rep.check(flow_err <= 1e-9, format!("flow property phi(s+t) = phi(t, shifted) o phi(s): {flow_err:.2e} <= 1e-9"));
    rep.check(coc_err <= 1e-9, format!("cocycle property psi(0,t) = psi(s,t) psi(0,s): {coc_err:.2e} <= 1e-9"));
    Ok(rep)
}

// ---------------------------------------------------------- linearization

fn fd_jacobian_error(p: &Problem, grid: &RoughPathGrid, z0: &DVector<f64>) -> roughdyn::Result<f64> {
    let ctrl = StepControl::default();
    let run = solve_rde(z0, grid, &p.field, &ctrl)?;
    let psi = solve_linearized(&run, grid, &p.field)?.final_psi().clone();
    let m = z0.len();
    let eps = 1e-5;
    let mut fd = DMatrix::zeros(m, m);
    for k in 0..m {
        let mut zp = z0.clone();
        let mut zm = z0.clone();
        zp[k] += eps;
        zm[k] -= eps;
        let fp = solve_on_partition(&zp, grid, &p.field, &run.nodes, &ctrl)?;
        let fm = solve_on_partition(&zm, grid, &p.field, &run.nodes, &ctrl)?;
        fd.set_column(k, &((fp.final_state() - fm.final_state()) / (2.0 * eps)));
    }
    Ok((fd - &psi).norm() / psi.norm())
}

fn inverse_residual(p: &Problem, seed: u64, z0: &DVector<f64>) -> roughdyn::Result<f64> {
    let grid = p.driver.grid(256, 4.0, RandomScenario::new(seed))?;
    let run = solve_rde(z0, &grid, &p.field, &StepControl::default())?;
    let lin = solve_linearized(&run, &grid, &p.field)?;
    let inv = inverse_jacobian(&run, &grid, &p.field, grid.len())?;
    let m = z0.len();
    Ok(max_abs(&(&inv.psi * lin.final_psi() - DMatrix::identity(m, m))))
}

fn linearization() -> Outcome {
    let mut rep = Report::default();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let stable = stable_example()?;
    let bi = bistable()?;
    let mut worst = 0f64;
    for i in 0..6 {
        let grid = stable.driver.grid(256, 2.0, RandomScenario::new(200 + i))?;
        let z0 = DVector::from_fn(2, |_, _| rng.random_range(-1.5..1.5));
        worst = worst.max(fd_jacobian_error(&stable, &grid, &z0)?);
    }
    rep.check(worst <= 1e-4, format!("stable example: FD Jacobian relative error at 6 random points {worst:.2e} <= 1e-4"));
    let mut worst = 0f64;
    for i in 0..6 {
        let grid = bi.driver.grid(256, 2.0, RandomScenario::new(300 + i))?;
        let z0 = DVector::from_element(1, rng.random_range(0.3..1.6));
        worst = worst.max(fd_jacobian_error(&bi, &grid, &z0)?);
    }
    rep.check(worst <= 1e-4, format!("bistable cubic: FD Jacobian relative error at 6 random points {worst:.2e} <= 1e-4"));

    let cases: Vec<(&str, Problem, DVector<f64>)> = vec![
        ("stable example", stable_example()?, DVector::from_vec(vec![0.4, -0.3])),
        ("linear stable", linear_stable()?, DVector::from_vec(vec![1.0, 0.5])),
        ("bistable cubic", bistable()?, DVector::from_element(1, 0.8)),
        ("linear saddle", saddle()?, DVector::from_vec(vec![0.1, 0.2])),
        ("scalar geometric", geometric(0.5, -0.2)?, DVector::from_element(1, 1.0)),
        ("drift-only", drift_only(&test_matrix())?, DVector::from_vec(vec![1.0, 0.0, -1.0])),
    ];
    for (name, p, z0) in &cases {
        let mut worst = 0f64;
        for seed in 0..3 {
            worst = worst.max(inverse_residual(p, seed, z0)?);
        }
        rep.check(worst <= 1e-6, format!("{name}: reversed-driver inverse, |psi~ psi - I| {worst:.2e} <= 1e-6"));
    }

    let a = test_matrix();
    let p = drift_only(&a)?;
    let grid = p.driver.grid(1 << 10, 1.0, RandomScenario::new(0))?;
    let run = solve_rde(&DVector::zeros(3), &grid, &p.field, &StepControl::fixed())?;
    let inv = inverse_jacobian(&run, &grid, &p.field, grid.len())?;
    let err = max_abs(&(&inv.psi - expm(&(-&a))));
    rep.check(err <= 1e-8, format!("drift-only inverse vs e^(-AT): {err:.2e} <= 1e-8"));
    Ok(rep)
}

// --------------------------------------------------------------- spectrum

fn spectrum_of(p: &Problem, t0: f64, windows: usize, spw: usize, seeds: Vec<u64>) -> roughdyn::Result<LyapunovSpectrum> {
    lyapunov_qr(
        p,
        &SpectrumConfig {
            t0,
            windows,
            steps_per_window: spw,
            seeds,
        },
    )
}

fn sum_rule(rep: &mut Report, name: &str, s: &LyapunovSpectrum) {
    let sum = s.sum();
    let gap = (sum.mean - s.log_det_rate.mean).abs();
    let tol = sum.effective_stderr();
    rep.check(gap <= tol, format!("{name}: |sum mu - log|det| rate| = {gap:.2e} <= stderr {tol:.2e}"));
}

fn top_bound(rep: &mut Report, name: &str, s: &LyapunovSpectrum) {
    let top = s.top();
    let floor = top.mean - 3.0 * top.effective_stderr();
    rep.check(
        s.top_bound.mean >= floor,
        format!("{name}: E log|psi^t0|/t0 = {:.4} >= mu1 - 3 se = {floor:.4}", s.top_bound.mean),
    );
}

fn spectrum() -> Outcome {
    let mut rep = Report::default();
    let diag = drift_only(&DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0])))?;
    let s = spectrum_of(&diag, 1.0, 1 << 10, 1 << 10, seeds(0, 100))?;
    for (i, truth) in [-1.0, -2.0].into_iter().enumerate() {
        let se = s.stderr[i].max(roughdyn::spectrum::STDERR_FLOOR);
        let dev = (s.exponents[i] - truth).abs();
        rep.check(
            dev <= 3.0 * se && s.stderr[i] <= 0.05,
            format!("diag(-1,-2): mu{} = {:.12} (se {:.1e}), |dev| {dev:.1e} <= 3 se, se <= 0.05", i + 1, s.exponents[i], s.stderr[i]),
        );
    }
    sum_rule(&mut rep, "diag(-1,-2)", &s);
    top_bound(&mut rep, "diag(-1,-2)", &s);

    let stable = stable_example()?;
    let mut runs = Vec::new();
    for (t0, windows, spw) in [(0.5, 128, 8), (1.0, 64, 16), (2.0, 32, 32)] {
        runs.push((t0, spectrum_of(&stable, t0, windows, spw, seeds(500, 32))?));
    }
    for i in 0..runs.len() {
        for j in i + 1..runs.len() {
            let (ta, a) = &runs[i];
            let (tb, b) = &runs[j];
            for k in 0..2 {
                let gap = (a.exponents[k] - b.exponents[k]).abs();
                let tol = 3.0 * (a.stderr[k].powi(2) + b.stderr[k].powi(2)).sqrt();
                rep.check(gap <= tol, format!("stable example: mu{} at t0={ta} vs t0={tb}: |diff| {gap:.4} <= {tol:.4}", k + 1));
            }
        }
    }
    let stable_s = &runs[1].1;
    sum_rule(&mut rep, "stable example", stable_s);
    top_bound(&mut rep, "stable example", stable_s);

    let others = [
        ("linear stable", linear_stable()?),
        ("bistable cubic", bistable()?),
        ("linear saddle", saddle()?),
    ];
    for (name, p) in &others {
        let s = spectrum_of(p, 1.0, 64, 16, seeds(700, 16))?;
        sum_rule(&mut rep, name, &s);
        top_bound(&mut rep, name, &s);
    }
    Ok(rep)
}

// -------------------------------------------------------------- stability

fn probe_cfg(nu: f64) -> ProbeConfig {
    ProbeConfig {
        nu,
        t0: 1.0,
        windows: 16,
        steps_per_window: 16,
        escape_cap: 10.0,
        mu_minus: None,
    }
}

fn stability() -> Outcome {
    let mut rep = Report::default();
    let p = stable_example()?;
    let s = spectrum_of(&p, 1.0, 64, 16, seeds(500, 32))?;
    let top = s.top();
    rep.check(
        top.mean + 3.0 * top.effective_stderr() < 0.0,
        format!("mu1 = {:.4} +- {:.4}: negative at 3 se", top.mean, top.stderr),
    );

    let mut offsets = Vec::new();
    for r in [0.01, 0.005, 0.001] {
        offsets.extend(sphere_directions(2, None)?.into_iter().map(|d| d * r));
    }
    let (mut worst_rate, mut all_stable, mut count) = (f64::NEG_INFINITY, true, 0);
    for seed in 0..8 {
        for r in stability_probe(&p, &RandomScenario::new(seed), &offsets, &probe_cfg(0.5))? {
            all_stable &= r.verdict == Verdict::Stable;
            worst_rate = worst_rate.max(r.fitted_rate.unwrap_or(f64::INFINITY));
            count += 1;
        }
    }
    rep.check(all_stable, format!("{count} probes with |z0| <= 0.01 over 8 scenarios: all stable at nu = 0.5"));
    rep.check(worst_rate <= -0.8, format!("slowest fitted decay rate {worst_rate:.4} <= -0.8"));

    let nu = top.mean.abs() + 0.5;
    let mut diverged = true;
    for seed in 0..8 {
        for r in stability_probe(&p, &RandomScenario::new(seed), &offsets, &probe_cfg(nu))? {
            diverged &= r.verdict == Verdict::NotDecaying;
        }
    }
    rep.check(diverged, format!("negative control nu = {nu:.3} > |mu1|: every weighted distance keeps growing"));
    Ok(rep)
}

// ----------------------------------------------------------------- radius

fn radius() -> Outcome {
    let mut rep = Report::default();
    let cases = [
        ("stable example", stable_example()?, [0.35, 0.7], Bisection { lo: 0.01, hi: 2.0, iters: 10 }, 7u64),
        ("bistable cubic", bistable()?, [0.5, 1.0], Bisection { lo: 0.01, hi: 1.0, iters: 12 }, 3u64),
    ];
    for (name, p, nus, bis, seed) in &cases {
        for s in [*seed, seed + 1] {
            let scen = RandomScenario::new(s);
            let r1 = radius_estimate(p, &scen, &probe_cfg(nus[0]), bis, None)?;
            let r2 = radius_estimate(p, &scen, &probe_cfg(nus[1]), bis, None)?;
            rep.check(
                r2.radius <= r1.radius,
                format!("{name}, seed {s}: R(nu={}) = {:.5} <= R(nu={}) = {:.5}", nus[1], r2.radius, nus[0], r1.radius),
            );
            if *name == "bistable cubic" {
                rep.check(r1.radius < 1.0 && !r1.at_upper_bracket, format!("bistable cubic, seed {s}: R = {:.5} < 1", r1.radius));
            }
        }
    }
    Ok(rep)
}

// --------------------------------------------------------------- backward

fn backward() -> Outcome {
    let mut rep = Report::default();
    let p = saddle()?;
    let cfg = BackwardConfig {
        t0: 1.0,
        windows: 16,
        steps_per_window: 16,
        escape_cap: 10.0,
    };
    let z = DVector::from_vec(vec![0.1, 0.0]);
    for seed in 5..8 {
        let r = backward_probe(&p, &RandomScenario::new(seed), &z, &cfg)?;
        let rate = r.fitted_rate.unwrap_or(f64::NAN);
        rep.check((rate + 1.0).abs() <= 0.15, format!("seed {seed}: backward rate {rate:.4} within 0.15 of -1"));
        rep.check(
            r.round_trip_error <= 1e-6,
            format!("seed {seed}: forward-backward round trip {:.2e} <= 1e-6", r.round_trip_error),
        );
    }
    Ok(rep)
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("algebra", algebra),
        ("calculus", calculus),
        ("integration", integration),
        ("solver", solver),
        ("linearization", linearization),
        ("spectrum", spectrum),
        ("stability", stability),
        ("radius", radius),
        ("backward", backward),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(rep) => {
                failures += rep.failed as usize;
                println!("{} {name} ({secs:.1} s)", if rep.failed { "FAIL" } else { "PASS" });
                for line in rep.lines {
                    println!("    {line}");
                }
            }
            Err(e) => {
                failures += 1;
                println!("FAIL {name} ({secs:.1} s)\n    error: {e}");
            }
        }
    }
    if failures > 0 {
        println!("{failures} criterion(s) failed");
        std::process::exit(1);
    }
}
