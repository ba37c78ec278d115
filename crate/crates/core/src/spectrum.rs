//! Lyapunov spectra of the derivative cocycle at a stationary point by
//! discrete QR re-orthonormalization, plus the subadditive top-exponent
//! bound and a tempered-growth diagnostic.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cocycle::{spectral_norm, step_propagators};
use crate::drivers::{RandomScenario, RoughPathGrid};
use crate::error::{Error, Result};
use crate::field::LinearizedCoefficients;
use crate::problem::{DriverConfig, Problem, StationaryPoint};
use crate::solver::{scheme_element, solve_rde};
use crate::stats::{fit_line, mean, slope_p_value, stderr};

/// Stored in place of a `−∞` exponent; always paired with a flag.
pub const NEG_INFINITY_SENTINEL: f64 = f64::MIN;

/// Smallest standard error used when comparing estimates; deterministic
/// problems otherwise report exactly zero.
pub const STDERR_FLOOR: f64 = 1e-9;

/// `|R_ii|` below this counts as underflow.
const UNDERFLOW: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumConfig {
    pub t0: f64,
    pub windows: usize,
    pub steps_per_window: usize,
    pub seeds: Vec<u64>,
}

impl SpectrumConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t0 > 0.0 && self.t0.is_finite()) {
            return Err(Error::InvalidArgument(format!("t0 must be positive, got {}", self.t0)));
        }
        if self.windows == 0 || self.steps_per_window == 0 || self.seeds.is_empty() {
            return Err(Error::InvalidArgument(
                "windows, steps_per_window and seeds must be non-empty".into(),
            ));
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        self.t0 * self.windows as f64
    }
}

/// Mean and standard error across scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    fn of(xs: &[f64]) -> Self {
        Self {
            mean: mean(xs),
            stderr: stderr(xs),
        }
    }

    /// Standard error with the comparison floor applied.
    pub fn effective_stderr(&self) -> f64 {
        self.stderr.max(STDERR_FLOOR)
    }
}

/// A cluster of exponents treated as one value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentGroup {
    pub value: f64,
    pub stderr: f64,
    pub multiplicity: usize,
    pub neg_infinite: bool,
}

/// Per-scenario QR results.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedSpectrum {
    pub seed: u64,
    pub exponents: Vec<f64>,
    pub neg_infinite: Vec<bool>,
    /// Running estimates after each window (`windows × m`).
    pub series: Vec<Vec<f64>>,
    /// `Σ_k log|det W_k| / (n t0)`.
    pub log_det_rate: f64,
    /// `mean_k log‖W_k‖₂ / t0`.
    pub norm_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovSpectrum {
    /// Descending; `NEG_INFINITY_SENTINEL` where `neg_infinite` is set.
    pub exponents: Vec<f64>,
    pub neg_infinite: Vec<bool>,
    pub stderr: Vec<f64>,
    pub multiplicities: Vec<usize>,
    pub groups: Vec<ExponentGroup>,
    /// Indices of exponents indistinguishable from zero.
    pub zero_exponents: Vec<usize>,
    pub log_det_rate: Estimate,
    pub top_bound: Estimate,
    pub n: usize,
    pub t0: f64,
    pub seeds: Vec<u64>,
    #[serde(skip)]
    pub per_seed: Vec<SeedSpectrum>,
}

impl LyapunovSpectrum {
    pub fn top(&self) -> Estimate {
        Estimate {
            mean: self.exponents[0],
            stderr: self.stderr[0],
        }
    }

    /// `Σ μ_i` over finite exponents.
    pub fn sum(&self) -> Estimate {
        let sums: Vec<f64> = self
            .per_seed
            .iter()
            .map(|s| s.exponents.iter().filter(|x| x.is_finite()).sum())
            .collect();
        Estimate::of(&sums)
    }

    /// Series CSV: `seed,window,t,mu_0,…`.
    pub fn write_series_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let m = self.exponents.len();
        let cols: Vec<String> = (0..m).map(|i| format!("mu_{i}")).collect();
        writeln!(out, "seed,window,t,{}", cols.join(","))?;
        for s in &self.per_seed {
            for (k, row) in s.series.iter().enumerate() {
                let vals: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
                writeln!(
                    out,
                    "{},{},{:?},{}",
                    s.seed,
                    k + 1,
                    (k + 1) as f64 * self.t0,
                    vals.join(",")
                )?;
            }
        }
        Ok(())
    }
}

/// Products `W_k = ψ` over window `k`, one per window.
fn window_products(problem: &Problem, cfg: &SpectrumConfig, seed: u64) -> Result<Vec<DMatrix<f64>>> {
    let n = cfg.windows;
    let spw = cfg.steps_per_window;
    let vf = &problem.field;
    let m = vf.state_dim();
    let scenario = RandomScenario::new(seed);
    match problem.stationary.fixed_state(m) {
        Some(y) => {
            let lin = LinearizedCoefficients::at(vf, &y);
            let product = |grid: &RoughPathGrid, k: usize| -> Result<DMatrix<f64>> {
                let mut w = DMatrix::<f64>::identity(m, m);
                let mut tmp = DMatrix::<f64>::zeros(m, m);
                let mut cache: Option<(crate::SigElement, DMatrix<f64>)> = None;
                for s in k * spw..(k + 1) * spw {
                    let g = scheme_element(grid, s, s + 1, problem.control.drift)?;
                    let p = match &cache {
                        Some((prev, p)) if *prev == g => p,
                        _ => {
                            let p = lin.propagator(&g);
                            &cache.insert((g, p)).1
                        }
                    };
                    p.mul_to(&w, &mut tmp);
                    std::mem::swap(&mut w, &mut tmp);
                }
                Ok(w)
            };
            if matches!(problem.driver, DriverConfig::Zero { .. }) {
                // every window sees the same constant driver
                let grid = problem.driver.grid(spw, cfg.t0, scenario)?;
                let w = product(&grid, 0)?;
                Ok(vec![w; n])
            } else {
                let grid = problem.driver.grid(n * spw, cfg.horizon(), scenario)?;
                (0..n).map(|k| product(&grid, k)).collect()
            }
        }
        None => {
            let grid = problem.driver.grid(n * spw, cfg.horizon(), scenario)?;
            let y0 = match &problem.stationary {
                StationaryPoint::Trajectory(f) => (f.0)(&scenario),
                _ => unreachable!("fixed points handled above"),
            };
            let run = solve_rde(&y0, &grid, vf, &problem.control)?;
            let props = step_propagators(&run, &grid, vf)?;
            let mut out = Vec::with_capacity(n);
            let mut w = DMatrix::<f64>::identity(m, m);
            let mut k = 1;
            for (p, &end) in props.iter().zip(&run.nodes[1..]) {
                w = p * w;
                if end > k * spw {
                    return Err(Error::InvalidArgument(
                        "adaptive partition crosses a window boundary; use max_block dividing steps_per_window"
                            .into(),
                    ));
                }
                if end == k * spw {
                    out.push(std::mem::replace(&mut w, DMatrix::identity(m, m)));
                    k += 1;
                }
            }
            Ok(out)
        }
    }
}

fn qr_iterate(products: &[DMatrix<f64>], t0: f64, seed: u64) -> SeedSpectrum {
    let m = products[0].nrows();
    let n = products.len();
    let mut q = DMatrix::<f64>::identity(m, m);
    let mut sums = vec![0.0; m];
    let mut neg_inf = vec![false; m];
    let mut series = Vec::with_capacity(n);
    let mut log_det = 0.0;
    let mut norm_sum = 0.0;
    for (k, w) in products.iter().enumerate() {
        let det = w.determinant().abs();
        log_det += if det > 0.0 { det.ln() } else { f64::NEG_INFINITY };
        norm_sum += spectral_norm(w).ln() / t0;
        let qr = (w * &q).qr();
        let r = qr.r();
        for i in 0..m {
            let rii = r[(i, i)].abs();
            if rii < UNDERFLOW {
                neg_inf[i] = true;
            } else {
                sums[i] += rii.ln();
            }
        }
        q = qr.q();
        let elapsed = (k + 1) as f64 * t0;
        series.push(
            (0..m)
                .map(|i| if neg_inf[i] { NEG_INFINITY_SENTINEL } else { sums[i] / elapsed })
                .collect(),
        );
    }
    let horizon = n as f64 * t0;
    let mut pairs: Vec<(f64, bool)> = (0..m)
        .map(|i| {
            if neg_inf[i] {
                (f64::NEG_INFINITY, true)
            } else {
                (sums[i] / horizon, false)
            }
        })
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    SeedSpectrum {
        seed,
        exponents: pairs.iter().map(|p| p.0).collect(),
        neg_infinite: pairs.iter().map(|p| p.1).collect(),
        series,
        log_det_rate: log_det / horizon,
        norm_rate: norm_sum / n as f64,
    }
}

/// Groups sorted exponents whose gap is within twice the combined
/// standard error (floored).
fn group(exponents: &[f64], errs: &[f64], neg: &[bool]) -> Vec<ExponentGroup> {
    let mut groups: Vec<(Vec<usize>, bool)> = Vec::new();
    for i in 0..exponents.len() {
        let merge = match groups.last() {
            Some((members, is_neg)) => {
                let j = *members.last().unwrap();
                if *is_neg || neg[i] {
                    *is_neg && neg[i]
                } else {
                    let combined = (errs[i].powi(2) + errs[j].powi(2)).sqrt().max(STDERR_FLOOR);
                    (exponents[i] - exponents[j]).abs() <= 2.0 * combined
                }
            }
            None => false,
        };
        if merge {
            groups.last_mut().unwrap().0.push(i);
        } else {
            groups.push((vec![i], neg[i]));
        }
    }
    groups
        .into_iter()
        .map(|(members, is_neg)| {
            let k = members.len() as f64;
            ExponentGroup {
                value: if is_neg {
                    NEG_INFINITY_SENTINEL
                } else {
                    members.iter().map(|&i| exponents[i]).sum::<f64>() / k
                },
                stderr: (members.iter().map(|&i| errs[i].powi(2)).sum::<f64>()).sqrt() / k,
                multiplicity: members.len(),
                neg_infinite: is_neg,
            }
        })
        .collect()
}

/// Discrete QR estimate of the spectrum, scenarios processed in parallel
/// and reduced in seed order.
pub fn lyapunov_qr(problem: &Problem, cfg: &SpectrumConfig) -> Result<LyapunovSpectrum> {
    cfg.validate()?;
    let per_seed = cfg
        .seeds
        .par_iter()
        .map(|&seed| window_products(problem, cfg, seed).map(|w| qr_iterate(&w, cfg.t0, seed)))
        .collect::<Result<Vec<_>>>()?;
    let m = problem.state_dim();
    let mut exponents = Vec::with_capacity(m);
    let mut errs = Vec::with_capacity(m);
    let mut neg = Vec::with_capacity(m);
    for i in 0..m {
        if per_seed.iter().any(|s| s.neg_infinite[i]) {
            exponents.push(NEG_INFINITY_SENTINEL);
            errs.push(0.0);
            neg.push(true);
        } else {
            let xs: Vec<f64> = per_seed.iter().map(|s| s.exponents[i]).collect();
            exponents.push(mean(&xs));
            errs.push(stderr(&xs));
            neg.push(false);
        }
    }
    let groups = group(&exponents, &errs, &neg);
    let multiplicities = groups.iter().map(|g| g.multiplicity).collect();
    let zero_exponents = (0..m)
        .filter(|&i| !neg[i] && exponents[i].abs() <= 2.0 * errs[i].max(STDERR_FLOOR))
        .collect();
    let log_dets: Vec<f64> = per_seed.iter().map(|s| s.log_det_rate).collect();
    let norms: Vec<f64> = per_seed.iter().map(|s| s.norm_rate).collect();
    Ok(LyapunovSpectrum {
        exponents,
        neg_infinite: neg,
        stderr: errs,
        multiplicities,
        groups,
        zero_exponents,
        log_det_rate: Estimate::of(&log_dets),
        top_bound: Estimate::of(&norms),
        n: cfg.windows,
        t0: cfg.t0,
        seeds: cfg.seeds.clone(),
        per_seed,
    })
}

/// Monte Carlo mean of `log‖ψ^{t0}‖₂ / t0` over windows and scenarios.
pub fn top_exponent_bound(problem: &Problem, cfg: &SpectrumConfig) -> Result<Estimate> {
    cfg.validate()?;
    let rates = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            window_products(problem, cfg, seed)
                .map(|ws| ws.iter().map(|w| spectral_norm(w).ln() / cfg.t0).sum::<f64>() / ws.len() as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Estimate::of(&rates))
}

/// Running averages and a growth-trend test of an observable sampled
/// along shifted windows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BirkhoffReport {
    pub n: usize,
    /// Scenario mean of `(1/k) Σ_{j<k} f_j`.
    pub running_mean: Vec<f64>,
    /// Scenario mean of `f_k / k`.
    pub scaled_terms: Vec<f64>,
    pub slope: f64,
    pub p_value: f64,
    /// No significant upward trend at the 1% level.
    pub tempered: bool,
}

/// `values[s][j] = f(θ_{j t0} ω_s)`. The trend test regresses the
/// scenario-mean of `f_j` on `j`; a significantly positive slope means
/// `f_n / n` does not vanish.
pub fn birkhoff_diagnostic(values: &[Vec<f64>]) -> Result<BirkhoffReport> {
    let n = values.first().map(|v| v.len()).unwrap_or(0);
    if n < 3 || values.iter().any(|v| v.len() != n) {
        return Err(Error::InvalidArgument(
            "need equal-length series of at least 3 samples".into(),
        ));
    }
    let s = values.len() as f64;
    let avg: Vec<f64> = (0..n).map(|j| values.iter().map(|v| v[j]).sum::<f64>() / s).collect();
    let mut running_mean = Vec::with_capacity(n);
    let mut acc = 0.0;
    for (j, x) in avg.iter().enumerate() {
        acc += x;
        running_mean.push(acc / (j + 1) as f64);
    }
    let scaled_terms = avg.iter().enumerate().map(|(j, x)| x / (j + 1) as f64).collect();
    let xs: Vec<f64> = (0..n).map(|j| j as f64).collect();
    let fit = fit_line(&xs, &avg).expect("n ≥ 3 distinct abscissae");
    let p_value = slope_p_value(&fit);
    Ok(BirkhoffReport {
        n,
        running_mean,
        scaled_terms,
        slope: fit.slope,
        p_value,
        tempered: !(fit.slope > 0.0 && p_value < 0.01),
    })
}

/// `log⁺ ‖X‖_{γ1, window}` for consecutive windows of `spw` steps.
pub fn window_log_holder(grid: &RoughPathGrid, spw: usize, gamma1: f64) -> Result<Vec<f64>> {
    if spw == 0 || !grid.len().is_multiple_of(spw) {
        return Err(Error::InvalidArgument(format!(
            "{} steps do not split into windows of {spw}",
            grid.len()
        )));
    }
    (0..grid.len() / spw)
        .map(|k| grid.holder_norm(gamma1, k * spw, (k + 1) * spw).map(|h| h.ln().max(0.0)))
        .collect()
}
