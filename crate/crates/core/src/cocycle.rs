//! Derivative cocycle of the discrete flow: the linearized equation along a
//! frozen trajectory, its inverse through the time-reversed driver, and a
//! continuity probe for the derivative.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::drivers::RoughPathGrid;
use crate::error::{Error, Result};
use crate::field::{LinearizedCoefficients, VectorFieldOracle};
use crate::solver::{scheme_element, solve_on_partition, SolutionPath, StepControl};
use crate::stats::loglog_slope;

/// `ψ = D_{z₀}φ^t` at one partition node of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct CocycleMatrix {
    pub psi: DMatrix<f64>,
    pub t: f64,
    /// Grid node of the run's partition.
    pub node: usize,
}

/// Linearized solution along a run: per-step propagators and their
/// running products.
#[derive(Debug, Clone)]
pub struct LinearizedRun {
    pub nodes: Vec<usize>,
    pub times: Vec<f64>,
    /// `P_k` maps `ψ` at partition index `k` to index `k + 1`.
    pub propagators: Vec<DMatrix<f64>>,
    pub psi: Vec<DMatrix<f64>>,
}

impl LinearizedRun {
    pub fn final_psi(&self) -> &DMatrix<f64> {
        self.psi.last().expect("ψ(0,0) is always present")
    }

    /// `ψ` between partition indices `i ≤ j`: `P_{j−1} ⋯ P_i`.
    pub fn between(&self, i: usize, j: usize) -> Result<DMatrix<f64>> {
        if i > j || j >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!("bad partition indices ({i}, {j})")));
        }
        let m = self.psi[0].nrows();
        Ok(self.propagators[i..j]
            .iter()
            .fold(DMatrix::identity(m, m), |acc, p| p * acc))
    }

    pub fn matrices(&self) -> Vec<CocycleMatrix> {
        self.psi
            .iter()
            .zip(&self.times)
            .zip(&self.nodes)
            .map(|((psi, &t), &node)| CocycleMatrix {
                psi: psi.clone(),
                t,
                node,
            })
            .collect()
    }

    /// Index of grid node `node` in the partition.
    pub fn index_of(&self, node: usize) -> Option<usize> {
        self.nodes.binary_search(&node).ok()
    }
}

/// Step Jacobians of the run's Davie steps, coefficients frozen at the
/// left-point states.
pub fn step_propagators(run: &SolutionPath, grid: &RoughPathGrid, vf: &VectorFieldOracle) -> Result<Vec<DMatrix<f64>>> {
    run.nodes
        .windows(2)
        .zip(&run.states)
        .map(|(w, z)| {
            let g = scheme_element(grid, w[0], w[1], run.drift)?;
            let p = LinearizedCoefficients::at(vf, z).propagator(&g);
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::Oracle(format!("non-finite propagator at node {}", w[0])));
            }
            Ok(p)
        })
        .collect()
}

/// Linearized solution along `run` with `ψ(0,0) = I`.
pub fn solve_linearized(run: &SolutionPath, grid: &RoughPathGrid, vf: &VectorFieldOracle) -> Result<LinearizedRun> {
    let m = vf.state_dim();
    let propagators = step_propagators(run, grid, vf)?;
    let mut psi = Vec::with_capacity(propagators.len() + 1);
    psi.push(DMatrix::identity(m, m));
    for p in &propagators {
        let next = p * psi.last().unwrap();
        psi.push(next);
    }
    Ok(LinearizedRun {
        nodes: run.nodes.clone(),
        times: run.times.clone(),
        propagators,
        psi,
    })
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().max()
}

/// `σ_max / σ_min` (infinite for singular input).
pub fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let s = m.singular_values();
    let lo = s.min();
    if lo == 0.0 {
        f64::INFINITY
    } else {
        s.max() / lo
    }
}

/// Inverse of `ψ(0, t0)` obtained by integrating the linearized equation
/// backwards on the reversed driver. Each reversed step is taken
/// implicitly at its right point (the forward left point), so the step
/// matrix is `I − L(z_j)·g̃_j` with `g̃_j` the reversed element; this makes
/// `ψ̃ ψ = I` hold up to rounding on the run's partition.
pub fn inverse_jacobian(
    run: &SolutionPath,
    grid: &RoughPathGrid,
    vf: &VectorFieldOracle,
    t0: usize,
) -> Result<CocycleMatrix> {
    let m = vf.state_dim();
    let k = run
        .nodes
        .binary_search(&t0)
        .map_err(|_| Error::InvalidArgument(format!("node {t0} is not on the run's partition")))?;
    if k == 0 {
        return Ok(CocycleMatrix {
            psi: DMatrix::identity(m, m),
            t: grid.time(0),
            node: 0,
        });
    }
    let rev = grid.reverse_driver(t0)?;
    let two = DMatrix::<f64>::identity(m, m) * 2.0;
    let mut inv = DMatrix::<f64>::identity(m, m);
    let mut fwd = DMatrix::<f64>::identity(m, m);
    for j in (0..k).rev() {
        let (a, b) = (run.nodes[j], run.nodes[j + 1]);
        let g_rev = scheme_element(&rev, t0 - b, t0 - a, run.drift)?;
        let lin = LinearizedCoefficients::at(vf, &run.states[j]);
        let step = &two - lin.propagator(&g_rev);
        inv = step
            .lu()
            .solve(&inv)
            .ok_or(Error::Conditioning { product: f64::INFINITY })?;
        let g = scheme_element(grid, a, b, run.drift)?;
        fwd *= lin.propagator(&g);
    }
    let product = spectral_norm(&fwd) * spectral_norm(&inv);
    if !(product <= 1e12) {
        return Err(Error::Conditioning { product });
    }
    Ok(CocycleMatrix {
        psi: inv,
        t: grid.time(t0),
        node: t0,
    })
}

/// Differences `‖Dφ(z₀ + ε u) − Dφ(z₀)‖` for a set of gaps `ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuityReport {
    pub gaps: Vec<f64>,
    pub differences: Vec<f64>,
    /// Log-log slope of difference against gap (positive differences only).
    pub slope: Option<f64>,
    pub betas: Vec<f64>,
    /// `ratios[b][i] = differences[i] / gaps[i]^betas[b]`.
    pub ratios: Vec<Vec<f64>>,
    /// Differences are non-increasing as the gap shrinks.
    pub monotone: bool,
}

/// `‖ψ_T(z1) − ψ_T(z0)‖` on a fixed partition.
pub fn derivative_difference(
    z0: &DVector<f64>,
    z1: &DVector<f64>,
    grid: &RoughPathGrid,
    vf: &VectorFieldOracle,
    partition: &[usize],
    ctrl: &StepControl,
) -> Result<f64> {
    let psi = |z: &DVector<f64>| -> Result<DMatrix<f64>> {
        let run = solve_on_partition(z, grid, vf, partition, ctrl)?;
        Ok(solve_linearized(&run, grid, vf)?.final_psi().clone())
    };
    Ok((psi(z1)? - psi(z0)?).norm())
}

/// Probes the derivative at `z0 + gap · direction` for every gap.
#[allow(clippy::too_many_arguments)]
pub fn derivative_continuity_probe(
    z0: &DVector<f64>,
    direction: &DVector<f64>,
    gaps: &[f64],
    betas: &[f64],
    grid: &RoughPathGrid,
    vf: &VectorFieldOracle,
    partition: &[usize],
    ctrl: &StepControl,
) -> Result<ContinuityReport> {
    let unit = direction.normalize();
    let differences = gaps
        .iter()
        .map(|&eps| derivative_difference(z0, &(z0 + &unit * eps), grid, vf, partition, ctrl))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..gaps.len()).collect();
    order.sort_by(|&i, &j| gaps[i].total_cmp(&gaps[j]));
    let monotone = order
        .windows(2)
        .all(|w| differences[w[0]] <= differences[w[1]] * (1.0 + 1e-9) + 1e-15);
    let ratios = betas
        .iter()
        .map(|&b| {
            gaps.iter()
                .zip(&differences)
                .map(|(g, d)| d / g.powf(b))
                .collect()
        })
        .collect();
    Ok(ContinuityReport {
        slope: loglog_slope(gaps, &differences).map(|f| f.slope),
        gaps: gaps.to_vec(),
        differences,
        betas: betas.to_vec(),
        ratios,
        monotone,
    })
}

/// CSV rows `t,psi_0_0,…,psi_{m−1}_{m−1},cond` (row-major entries).
pub fn write_cocycle_csv<W: Write>(out: &mut W, lin: &LinearizedRun) -> Result<()> {
    let m = lin.psi[0].nrows();
    let mut header = vec!["t".to_string()];
    for i in 0..m {
        for j in 0..m {
            header.push(format!("psi_{i}_{j}"));
        }
    }
    header.push("cond".into());
    writeln!(out, "{}", header.join(","))?;
    for (psi, t) in lin.psi.iter().zip(&lin.times) {
        let mut row = vec![format!("{t:?}")];
        for i in 0..m {
            for j in 0..m {
                row.push(format!("{:?}", psi[(i, j)]));
            }
        }
        row.push(format!("{:?}", condition_estimate(psi)));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
