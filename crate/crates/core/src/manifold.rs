//! Empirical stability probes around a stationary point: decay of nearby
//! trajectories, a bisection estimate of the stability radius and
//! backward pre-image chains.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drivers::{RandomScenario, RoughPathGrid};
use crate::error::{Error, Result};
use crate::field::{LinearizedCoefficients, StepCoefficients};
use crate::problem::Problem;
use crate::solver::{scheme_element, solve_on_partition, SolutionPath, StepControl};
use crate::stats::fit_line;

fn default_cap() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// Weight rate `ν` in `sup e^{νt} ‖φ^t(z) − Y‖`.
    pub nu: f64,
    pub t0: f64,
    pub windows: usize,
    pub steps_per_window: usize,
    /// Distance beyond which a trajectory counts as escaped.
    #[serde(default = "default_cap")]
    pub escape_cap: f64,
    /// Expected negative exponent; enables the rate check.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_minus: Option<f64>,
}

impl ProbeConfig {
    fn validate(&self) -> Result<()> {
        if !(self.t0 > 0.0) || self.windows == 0 || self.steps_per_window == 0 {
            return Err(Error::InvalidArgument("probe needs t0 > 0 and a non-empty horizon".into()));
        }
        if !(self.escape_cap > 0.0) || !self.nu.is_finite() {
            return Err(Error::InvalidArgument("probe needs a finite nu and a positive escape cap".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.windows * self.steps_per_window
    }

    pub fn horizon(&self) -> f64 {
        self.windows as f64 * self.t0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Stable,
    /// The weighted running max kept growing late in the horizon.
    NotDecaying,
    /// The distance passed the escape cap.
    Outside,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayReport {
    pub offset: Vec<f64>,
    pub nu: f64,
    pub window_times: Vec<f64>,
    pub distances: Vec<f64>,
    /// Every grid node, for the continuous-time sup.
    pub sub_times: Vec<f64>,
    pub sub_distances: Vec<f64>,
    pub fitted_rate: Option<f64>,
    pub weighted_sup: f64,
    /// Time of the last strict increase of the weighted running max.
    pub last_new_max: f64,
    pub plateau: bool,
    pub escaped: bool,
    pub rate_ok: Option<bool>,
    pub verdict: Verdict,
}

/// Last time at which `e^{νt} d(t)` set a new running max (relative
/// margin 1e-9), and the max itself.
pub fn weighted_running_max(times: &[f64], distances: &[f64], nu: f64) -> (f64, f64) {
    let mut best = f64::NEG_INFINITY;
    let mut last = times.first().copied().unwrap_or(0.0);
    for (&t, &d) in times.iter().zip(distances) {
        let w = (nu * t).exp() * d;
        if best == f64::NEG_INFINITY || w > best * (1.0 + 1e-9) {
            if best != f64::NEG_INFINITY {
                last = t;
            }
            best = best.max(w);
        }
    }
    (best, last)
}

/// Slope of `log d` against time, dropping the first 20% of samples;
/// needs at least 8 positive distances.
pub fn fit_decay_rate(times: &[f64], distances: &[f64]) -> Option<f64> {
    let skip = (times.len() as f64 * 0.2).ceil() as usize;
    let (xs, ys): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(distances)
        .skip(skip)
        .filter(|(_, &d)| d > 0.0 && d.is_finite())
        .map(|(&t, &d)| (t, d.ln()))
        .unzip();
    if xs.len() < 8 {
        return None;
    }
    fit_line(&xs, &ys).map(|f| f.slope)
}

fn fixed_control(problem: &Problem, cap: f64) -> StepControl {
    StepControl {
        drift: problem.control.drift,
        blowup_cap: problem.control.blowup_cap.max(cap),
        ..StepControl::fixed()
    }
}

fn decay_report(offset: &DVector<f64>, run: &SolutionPath, ys: &[DVector<f64>], cfg: &ProbeConfig) -> DecayReport {
    let spw = cfg.steps_per_window;
    let mut sub_times = Vec::with_capacity(run.states.len());
    let mut sub_distances = Vec::with_capacity(run.states.len());
    let mut escaped = false;
    for ((z, &t), &node) in run.states.iter().zip(&run.times).zip(&run.nodes) {
        let d = (z - &ys[node]).norm();
        sub_times.push(t);
        sub_distances.push(d);
        if !(d <= cfg.escape_cap) {
            escaped = true;
            break;
        }
    }
    let complete = !escaped && sub_distances.len() == cfg.steps() + 1;
    escaped |= !complete;
    let window_times: Vec<f64> = sub_times.iter().step_by(spw).copied().collect();
    let distances: Vec<f64> = sub_distances.iter().step_by(spw).copied().collect();
    let (weighted_sup, last_new_max) = weighted_running_max(&sub_times, &sub_distances, cfg.nu);
    let plateau = !escaped && last_new_max < cfg.horizon() * 2.0 / 3.0;
    let fitted_rate = fit_decay_rate(&window_times, &distances);
    let rate_ok = cfg
        .mu_minus
        .map(|mu| fitted_rate.is_none_or(|r| r <= mu + 0.1 * mu.abs()));
    let verdict = if escaped {
        Verdict::Outside
    } else if !plateau {
        Verdict::NotDecaying
    } else {
        Verdict::Stable
    };
    DecayReport {
        offset: offset.iter().copied().collect(),
        nu: cfg.nu,
        window_times,
        distances,
        sub_times,
        sub_distances,
        fitted_rate,
        weighted_sup,
        last_new_max,
        plateau,
        escaped,
        rate_ok,
        verdict,
    }
}

fn probe_on(
    problem: &Problem,
    grid: &RoughPathGrid,
    ys: &[DVector<f64>],
    offsets: &[DVector<f64>],
    cfg: &ProbeConfig,
) -> Result<Vec<DecayReport>> {
    let ctrl = fixed_control(problem, cfg.escape_cap);
    let nodes: Vec<usize> = (0..=grid.len()).collect();
    offsets
        .par_iter()
        .map(|off| {
            let run = match solve_on_partition(&(&ys[0] + off), grid, &problem.field, &nodes, &ctrl) {
                Ok(run) => run,
                Err(Error::BlowUp { partial, .. }) => *partial,
                Err(e) => return Err(e),
            };
            Ok(decay_report(off, &run, ys, cfg))
        })
        .collect()
}

fn setup(problem: &Problem, scenario: &RandomScenario, cfg: &ProbeConfig) -> Result<(RoughPathGrid, Vec<DVector<f64>>)> {
    cfg.validate()?;
    let grid = problem.driver.grid(cfg.steps(), cfg.horizon(), *scenario)?;
    let ys = problem
        .stationary
        .along(scenario, &grid, &problem.field, &fixed_control(problem, cfg.escape_cap))?;
    Ok((grid, ys))
}

/// Decay reports for trajectories started at `Y_ω + offset`.
pub fn stability_probe(
    problem: &Problem,
    scenario: &RandomScenario,
    offsets: &[DVector<f64>],
    cfg: &ProbeConfig,
) -> Result<Vec<DecayReport>> {
    let (grid, ys) = setup(problem, scenario, cfg)?;
    probe_on(problem, &grid, &ys, offsets, cfg)
}

/// Unit probe directions: `±e_i`, then the normalized sign diagonals
/// (for `m ≤ 4`), truncated to `count` when given.
pub fn sphere_directions(m: usize, count: Option<usize>) -> Result<Vec<DVector<f64>>> {
    let mut dirs = Vec::new();
    for i in 0..m {
        for s in [1.0, -1.0] {
            let mut e = DVector::zeros(m);
            e[i] = s;
            dirs.push(e);
        }
    }
    if (2..=4).contains(&m) {
        for mask in 0..(1usize << m) {
            let v = DVector::from_fn(m, |i, _| if mask >> i & 1 == 1 { -1.0 } else { 1.0 });
            dirs.push(v / (m as f64).sqrt());
        }
    }
    if let Some(c) = count {
        if c < 2 * m {
            return Err(Error::InvalidArgument(format!("need at least {} sphere points, got {c}", 2 * m)));
        }
        dirs.truncate(c);
    }
    Ok(dirs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bisection {
    pub lo: f64,
    pub hi: f64,
    pub iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadiusReport {
    pub nu: f64,
    pub radius: f64,
    /// The upper bracket passed: no escape anywhere tested.
    pub at_upper_bracket: bool,
    /// `(r, passed)` in evaluation order.
    pub tested: Vec<(f64, bool)>,
    pub sphere_points: usize,
}

/// Largest bracketed `r` with every sphere probe at distance `r` stable.
pub fn radius_estimate(
    problem: &Problem,
    scenario: &RandomScenario,
    cfg: &ProbeConfig,
    bisection: &Bisection,
    sphere_points: Option<usize>,
) -> Result<RadiusReport> {
    if !(bisection.lo > 0.0 && bisection.lo < bisection.hi) {
        return Err(Error::InvalidArgument("bisection needs 0 < lo < hi".into()));
    }
    let (grid, ys) = setup(problem, scenario, cfg)?;
    let dirs = sphere_directions(problem.state_dim(), sphere_points)?;
    let mut tested = Vec::new();
    let mut passes = |r: f64| -> Result<bool> {
        let offsets: Vec<DVector<f64>> = dirs.iter().map(|d| d * r).collect();
        let ok = probe_on(problem, &grid, &ys, &offsets, cfg)?
            .iter()
            .all(|rep| rep.verdict == Verdict::Stable);
        tested.push((r, ok));
        Ok(ok)
    };
    if !passes(bisection.lo)? {
        return Err(Error::RadiusBelowResolution { lo: bisection.lo });
    }
    let (radius, at_upper) = if passes(bisection.hi)? {
        (bisection.hi, true)
    } else {
        let (mut lo, mut hi) = (bisection.lo, bisection.hi);
        for _ in 0..bisection.iters {
            let mid = 0.5 * (lo + hi);
            if passes(mid)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (lo, false)
    };
    Ok(RadiusReport {
        nu: cfg.nu,
        radius,
        at_upper_bracket: at_upper,
        tested,
        sphere_points: dirs.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackwardConfig {
    pub t0: f64,
    pub windows: usize,
    pub steps_per_window: usize,
    #[serde(default = "default_cap")]
    pub escape_cap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BackwardReport {
    /// Backward times `k t0`, `k = 0 …`.
    pub times: Vec<f64>,
    pub distances: Vec<f64>,
    pub fitted_rate: Option<f64>,
    /// Max deviation when the forward flow is re-applied to the chain.
    pub round_trip_error: f64,
    pub blew_up: bool,
    pub max_newton_iters: usize,
}

const NEWTON_MAX: usize = 50;

/// Solves `w + F(w)·g = target` for `w` by Newton's method with the step
/// Jacobian, starting from the explicit step on the reversed element.
fn invert_step(problem: &Problem, g: &crate::SigElement, g_rev: &crate::SigElement, target: &DVector<f64>, t: f64) -> Result<(DVector<f64>, usize)> {
    let vf = &problem.field;
    let mut w = target + StepCoefficients::at(vf, target).increment(g_rev);
    let tol = 1e-14 * (1.0 + target.norm());
    for it in 0..NEWTON_MAX {
        let r = &w + StepCoefficients::at(vf, &w).increment(g) - target;
        let res = r.norm();
        if !res.is_finite() {
            break;
        }
        if res <= tol {
            return Ok((w, it));
        }
        let jac = LinearizedCoefficients::at(vf, &w).propagator(g);
        let dw = jac.lu().solve(&r).ok_or(Error::InversionFailed { t, residual: res })?;
        w -= dw;
    }
    let res = (&w + StepCoefficients::at(vf, &w).increment(g) - target).norm();
    if res <= 1e3 * tol {
        return Ok((w, NEWTON_MAX));
    }
    Err(Error::InversionFailed { t, residual: res })
}

/// Pre-images of `z` (the state at the end of the horizon) window by
/// window, built one grid step at a time on the reversed driver.
pub fn backward_probe(
    problem: &Problem,
    scenario: &RandomScenario,
    z: &DVector<f64>,
    cfg: &BackwardConfig,
) -> Result<BackwardReport> {
    if !(cfg.t0 > 0.0) || cfg.windows == 0 || cfg.steps_per_window == 0 {
        return Err(Error::InvalidArgument("backward probe needs t0 > 0 and a non-empty horizon".into()));
    }
    let n_steps = cfg.windows * cfg.steps_per_window;
    let horizon = cfg.windows as f64 * cfg.t0;
    let grid = problem.driver.grid(n_steps, horizon, *scenario)?;
    let ctrl = StepControl {
        drift: problem.control.drift,
        ..StepControl::fixed()
    };
    let ys = problem.stationary.along(scenario, &grid, &problem.field, &ctrl)?;
    let rev = grid.reverse_driver(n_steps)?;
    // chain[k] is the state at node n_steps − k
    let mut chain = vec![z.clone()];
    let mut blew_up = false;
    let mut max_iters = 0;
    for k in 0..n_steps {
        let j = n_steps - k - 1;
        let g = scheme_element(&grid, j, j + 1, ctrl.drift)?;
        let g_rev = scheme_element(&rev, k, k + 1, ctrl.drift)?;
        let (w, iters) = invert_step(problem, &g, &g_rev, chain.last().unwrap(), grid.time(j))?;
        max_iters = max_iters.max(iters);
        let far = !((&w - &ys[j]).norm() <= cfg.escape_cap);
        chain.push(w);
        if far {
            blew_up = true;
            break;
        }
    }
    let reached = chain.len() - 1;
    let start = n_steps - reached;
    let nodes: Vec<usize> = (start..=n_steps).collect();
    let sub = grid.window(start, n_steps)?;
    let rel: Vec<usize> = (0..=reached).collect();
    let fwd = solve_on_partition(chain.last().unwrap(), &sub, &problem.field, &rel, &ctrl)?;
    let round_trip_error = nodes
        .iter()
        .zip(&fwd.states)
        .map(|(&node, s)| (s - &chain[n_steps - node]).norm())
        .fold(0.0, f64::max);
    let spw = cfg.steps_per_window;
    let (times, distances): (Vec<f64>, Vec<f64>) = (0..=reached / spw)
        .map(|w| {
            let k = w * spw;
            (w as f64 * cfg.t0, (&chain[k] - &ys[n_steps - k]).norm())
        })
        .unzip();
    Ok(BackwardReport {
        fitted_rate: fit_decay_rate(&times, &distances),
        times,
        distances,
        round_trip_error,
        blew_up,
        max_newton_iters: max_iters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{DriverConfig, FieldSpec, StationaryPoint};

    fn stable(eps: f64) -> Problem {
        let field = FieldSpec::StableExample {
            a: vec![-1.0, -2.0],
            eps,
            mix: None,
        }
        .build(2)
        .unwrap();
        let driver = DriverConfig::Fbm {
            hurst: 0.4,
            dim: 2,
            refine: 2,
            gamma: None,
        };
        Problem::new(field, driver, StationaryPoint::FixedZero).unwrap()
    }

    fn cfg(nu: f64) -> ProbeConfig {
        ProbeConfig {
            nu,
            t0: 1.0,
            windows: 16,
            steps_per_window: 16,
            escape_cap: 10.0,
            mu_minus: Some(-1.0),
        }
    }

    #[test]
    fn start_on_stationary_point_stays() {
        let p = stable(0.05);
        let reps = stability_probe(&p, &RandomScenario::new(3), &[DVector::zeros(2)], &cfg(0.5)).unwrap();
        assert!(reps[0].sub_distances.iter().all(|&d| d == 0.0));
        assert_eq!(reps[0].verdict, Verdict::Stable);
    }

    #[test]
    fn decay_and_negative_control() {
        let p = stable(0.05);
        let off = [DVector::from_vec(vec![0.01, 0.0])];
        let ok = stability_probe(&p, &RandomScenario::new(1), &off, &cfg(0.5)).unwrap();
        assert_eq!(ok[0].verdict, Verdict::Stable);
        assert!(ok[0].fitted_rate.unwrap() < -0.8);
        assert_eq!(ok[0].rate_ok, Some(true));
        let bad = stability_probe(&p, &RandomScenario::new(1), &off, &cfg(1.5)).unwrap();
        assert_eq!(bad[0].verdict, Verdict::NotDecaying);
    }

    #[test]
    fn running_max_plateau() {
        let t: Vec<f64> = (0..10).map(|k| k as f64).collect();
        let d: Vec<f64> = t.iter().map(|x| (-x).exp()).collect();
        assert_eq!(weighted_running_max(&t, &d, 0.5), (1.0, 0.0));
        let (_, last) = weighted_running_max(&t, &d, 2.0);
        assert_eq!(last, 9.0);
    }

    #[test]
    fn directions_cover_axes_and_diagonals() {
        let d = sphere_directions(2, None).unwrap();
        assert_eq!(d.len(), 8);
        assert!(d.iter().all(|v| (v.norm() - 1.0).abs() < 1e-15));
        assert_eq!(sphere_directions(1, None).unwrap().len(), 2);
        assert!(sphere_directions(3, Some(4)).is_err());
    }

    #[test]
    fn newton_inverts_a_step() {
        let p = stable(0.3);
        let grid = p.driver.grid(8, 1.0, RandomScenario::new(2)).unwrap();
        let rev = grid.reverse_driver(8).unwrap();
        let g = scheme_element(&grid, 3, 4, Default::default()).unwrap();
        let g_rev = scheme_element(&rev, 4, 5, Default::default()).unwrap();
        let w0 = DVector::from_vec(vec![0.4, -0.2]);
        let target = &w0 + StepCoefficients::at(&p.field, &w0).increment(&g);
        let (w, _) = invert_step(&p, &g, &g_rev, &target, 0.0).unwrap();
        assert!((w - w0).norm() < 1e-13);
    }
}
