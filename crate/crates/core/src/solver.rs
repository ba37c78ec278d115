//! Third-order Davie scheme with dyadic step control.
//!
//! Steps use the space-time signature of the driver, so the drift enters
//! as the column of the time coordinate and is integrated to the same order
//! as the noise. `DriftScheme::Euler` drops the mixed time terms and gives
//! the plain `V₀(z)·h` drift update instead.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::controlled::ControlledPathGrid;
use crate::drivers::RoughPathGrid;
use crate::error::{Error, Result};
use crate::field::{StepCoefficients, VectorFieldOracle};
use crate::stats::loglog_slope;
use crate::tensor::SigElement;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftScheme {
    #[default]
    SpaceTime,
    Euler,
}

/// Step control. Blocks of `max_block` grid steps (a power of two) are
/// tried in one Davie step and halved while the one-step / two-half-step
/// discrepancy exceeds `tol · h`; a single grid step is always accepted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepControl {
    pub tol: f64,
    pub max_steps: usize,
    pub max_block: usize,
    pub gamma1: Option<f64>,
    pub blowup_cap: f64,
    pub drift: DriftScheme,
}

impl Default for StepControl {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_steps: 1 << 22,
            max_block: 8,
            gamma1: None,
            blowup_cap: 1e12,
            drift: DriftScheme::SpaceTime,
        }
    }
}

impl StepControl {
    /// Every grid step is a solver step.
    pub fn fixed() -> Self {
        Self {
            max_block: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument("tol must be positive".into()));
        }
        if self.max_block == 0 || !self.max_block.is_power_of_two() {
            return Err(Error::InvalidArgument("max_block must be a power of two".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidArgument("max_steps must be positive".into()));
        }
        Ok(())
    }
}

/// A solution on an accepted partition of grid nodes, with the Gubinelli
/// derivatives `Z¹ = V(Z)` and `Z² = DV(V(Z))` at every partition node.
#[derive(Debug, Clone)]
pub struct SolutionPath {
    pub nodes: Vec<usize>,
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub z1: Vec<DMatrix<f64>>,
    pub z2: Vec<DMatrix<f64>>,
    /// Per-step discrepancy between one step and two half steps; NaN for
    /// steps of a single grid interval.
    pub defects: Vec<f64>,
    pub gamma1: f64,
    pub drift: DriftScheme,
}

impl SolutionPath {
    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("solution has an initial state")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("non-empty")
    }

    pub fn num_steps(&self) -> usize {
        self.nodes.len() - 1
    }

    /// State at grid node `node`, if it is a partition node.
    pub fn state_at_node(&self, node: usize) -> Option<&DVector<f64>> {
        self.nodes.binary_search(&node).ok().map(|k| &self.states[k])
    }

    /// The solution as a controlled path on the grid coarsened to the
    /// partition.
    pub fn controlled(&self, grid: &RoughPathGrid) -> Result<ControlledPathGrid> {
        if *self.nodes.last().unwrap() != grid.len() {
            return Err(Error::InvalidArgument("partial run has no controlled view".into()));
        }
        let base = Arc::new(grid.coarsen(&self.nodes)?);
        ControlledPathGrid::new(
            base,
            self.states.clone(),
            self.z1.clone(),
            self.z2.clone(),
            self.gamma1.min(grid.gamma()),
        )
    }
}

/// Drops every level-2/3 entry that involves the time coordinate.
pub fn euler_drift(g: &SigElement) -> SigElement {
    let big_d = g.dim();
    let mut out = g.clone();
    for i in 0..big_d {
        for j in 0..big_d {
            if i == 0 || j == 0 {
                out.b_mut()[i * big_d + j] = 0.0;
            }
            for k in 0..big_d {
                if i == 0 || j == 0 || k == 0 {
                    out.c_mut()[(i * big_d + j) * big_d + k] = 0.0;
                }
            }
        }
    }
    out
}

/// Embeds a spatial element and a step length into space-time, keeping
/// only the level-1 time component.
pub fn embed_euler(g: &SigElement, h: f64) -> SigElement {
    let d = g.dim();
    let big_d = d + 1;
    let mut out = SigElement::zero(big_d);
    out.a_mut()[0] = h;
    for i in 0..d {
        out.a_mut()[i + 1] = g.a()[i];
        for j in 0..d {
            out.b_mut()[(i + 1) * big_d + j + 1] = g.b_at(i, j);
            for k in 0..d {
                out.c_mut()[((i + 1) * big_d + j + 1) * big_d + k + 1] = g.c_at(i, j, k);
            }
        }
    }
    out
}

fn check_state(vf: &VectorFieldOracle, z: &DVector<f64>) -> Result<()> {
    if z.len() != vf.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: vf.state_dim(),
            found: z.len(),
            context: "state",
        });
    }
    Ok(())
}

/// One Davie step `z + V a + DV(V) b + (D²V(V,V) + DV(DV(V))) c + V₀ h`
/// for a spatial element `g`.
pub fn davie_step(z: &DVector<f64>, g: &SigElement, h: f64, vf: &VectorFieldOracle) -> Result<DVector<f64>> {
    check_state(vf, z)?;
    if g.dim() != vf.noise_dim() {
        return Err(Error::DimensionMismatch {
            expected: vf.noise_dim(),
            found: g.dim(),
            context: "davie step element",
        });
    }
    let out = spacetime_step(z, &embed_euler(g, h), vf);
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::Oracle("non-finite Davie step".into()));
    }
    Ok(out)
}

/// Davie step for a space-time element (coordinate 0 = time).
pub fn spacetime_step(z: &DVector<f64>, g: &SigElement, vf: &VectorFieldOracle) -> DVector<f64> {
    z + StepCoefficients::at(vf, z).increment(g)
}

/// The space-time element of `[s, e]` as seen by the given drift scheme.
pub fn scheme_element(grid: &RoughPathGrid, s: usize, e: usize, drift: DriftScheme) -> Result<SigElement> {
    let g = grid.spacetime_sig(s, e)?;
    Ok(match drift {
        DriftScheme::SpaceTime => g,
        DriftScheme::Euler => euler_drift(&g),
    })
}

struct Stepper<'a> {
    grid: &'a RoughPathGrid,
    vf: &'a VectorFieldOracle,
    ctrl: StepControl,
}

impl Stepper<'_> {
    fn element(&self, s: usize, e: usize) -> SigElement {
        scheme_element(self.grid, s, e, self.ctrl.drift).expect("nodes on grid")
    }

    fn step(&self, z: &DVector<f64>, s: usize, e: usize) -> DVector<f64> {
        spacetime_step(z, &self.element(s, e), self.vf)
    }

    /// Accepted sub-steps of `[s, e]` as `(end node, state, defect)`.
    fn advance(&self, z: &DVector<f64>, s: usize, e: usize, out: &mut Vec<(usize, DVector<f64>, f64)>) {
        let full = self.step(z, s, e);
        if e - s == 1 {
            out.push((e, full, f64::NAN));
            return;
        }
        let mid = s + (e - s) / 2;
        let half = self.step(&self.step(z, s, mid), mid, e);
        let err = (&full - &half).norm();
        let h = self.grid.time(e) - self.grid.time(s);
        if err <= self.ctrl.tol * h {
            out.push((e, full, err));
        } else {
            self.advance(z, s, mid, out);
            let zm = out.last().map(|x| x.1.clone()).unwrap_or_else(|| z.clone());
            self.advance(&zm, mid, e, out);
        }
    }
}

fn finish(
    nodes: Vec<usize>,
    states: Vec<DVector<f64>>,
    defects: Vec<f64>,
    grid: &RoughPathGrid,
    vf: &VectorFieldOracle,
    gamma1: f64,
    drift: DriftScheme,
) -> SolutionPath {
    let times = nodes.iter().map(|&k| grid.time(k)).collect();
    let z1 = states.iter().map(|z| vf.v(z)).collect();
    let z2 = states.iter().map(|z| vf.dv_v(z)).collect();
    SolutionPath {
        nodes,
        times,
        states,
        z1,
        z2,
        defects,
        gamma1,
        drift,
    }
}

fn prepare(z0: &DVector<f64>, grid: &RoughPathGrid, vf: &VectorFieldOracle, ctrl: &StepControl) -> Result<f64> {
    ctrl.validate()?;
    check_state(vf, z0)?;
    if grid.dim() != vf.noise_dim() {
        return Err(Error::DimensionMismatch {
            expected: vf.noise_dim(),
            found: grid.dim(),
            context: "driver dimension",
        });
    }
    let gamma1 = ctrl.gamma1.unwrap_or(grid.gamma());
    let value = 3.0 * gamma1 + grid.gamma();
    if value <= 1.0 {
        return Err(Error::ExponentCondition { value });
    }
    Ok(gamma1)
}

/// Solves `dZ = V(Z) dX + V₀(Z) dt` from `z0` over the whole grid.
pub fn solve_rde(
    z0: &DVector<f64>,
    grid: &RoughPathGrid,
    vf: &VectorFieldOracle,
    ctrl: &StepControl,
) -> Result<SolutionPath> {
    let gamma1 = prepare(z0, grid, vf, ctrl)?;
    let stepper = Stepper { grid, vf, ctrl: *ctrl };
    let mut nodes = vec![0];
    let mut states = vec![z0.clone()];
    let mut defects = Vec::new();
    let mut s = 0;
    let mut buf = Vec::new();
    while s < grid.len() {
        let e = (s + ctrl.max_block).min(grid.len());
        buf.clear();
        stepper.advance(states.last().unwrap(), s, e, &mut buf);
        for (node, z, defect) in buf.drain(..) {
            let bad = z.iter().any(|x| !x.is_finite()) || z.norm() > ctrl.blowup_cap;
            let t = grid.time(node);
            nodes.push(node);
            states.push(z);
            defects.push(defect);
            if bad {
                let partial = finish(nodes, states, defects, grid, vf, gamma1, ctrl.drift);
                return Err(Error::BlowUp {
                    t,
                    partial: Box::new(partial),
                });
            }
            if defects.len() > ctrl.max_steps {
                let partial = finish(nodes, states, defects, grid, vf, gamma1, ctrl.drift);
                return Err(Error::StepLimit {
                    max_steps: ctrl.max_steps,
                    t,
                    partial: Box::new(partial),
                });
            }
        }
        s = e;
    }
    Ok(finish(nodes, states, defects, grid, vf, gamma1, ctrl.drift))
}

/// Solves on a prescribed partition (increasing grid nodes from 0).
pub fn solve_on_partition(
    z0: &DVector<f64>,
    grid: &RoughPathGrid,
    vf: &VectorFieldOracle,
    partition: &[usize],
    ctrl: &StepControl,
) -> Result<SolutionPath> {
    let gamma1 = prepare(z0, grid, vf, ctrl)?;
    if partition.first() != Some(&0) || partition.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("partition must start at 0 and increase".into()));
    }
    if let Some(&last) = partition.last() {
        if last > grid.len() {
            return Err(Error::OffGrid {
                node: last,
                len: grid.len() + 1,
            });
        }
    }
    let stepper = Stepper { grid, vf, ctrl: *ctrl };
    let mut states = vec![z0.clone()];
    for w in partition.windows(2) {
        let z = stepper.step(states.last().unwrap(), w[0], w[1]);
        let bad = z.iter().any(|x| !x.is_finite()) || z.norm() > ctrl.blowup_cap;
        states.push(z);
        if bad {
            let n = states.len();
            let partial = finish(partition[..n].to_vec(), states, vec![f64::NAN; n - 1], grid, vf, gamma1, ctrl.drift);
            return Err(Error::BlowUp {
                t: grid.time(w[1]),
                partial: Box::new(partial),
            });
        }
    }
    let n = partition.len();
    Ok(finish(partition.to_vec(), states, vec![f64::NAN; n - 1], grid, vf, gamma1, ctrl.drift))
}

/// Per-level errors of the fixed-step solver on dyadic coarsenings of a
/// fine grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub steps: Vec<usize>,
    pub step_sizes: Vec<f64>,
    pub errors: Vec<f64>,
    /// Least-squares slope of log error against log step size; `None`
    /// when fewer than two positive errors are available.
    pub order: Option<f64>,
    pub reference: String,
}

/// Coarsens `fine` by factors `2^1 … 2^levels` (or `2^0 … 2^(levels−1)`
/// when an exact `reference` is given) and records the final-state error.
/// Without a reference the fine-grid solution serves as reference.
pub fn convergence_study(
    z0: &DVector<f64>,
    fine: &RoughPathGrid,
    vf: &VectorFieldOracle,
    levels: usize,
    reference: Option<&DVector<f64>>,
    drift: DriftScheme,
) -> Result<ConvergenceReport> {
    let ctrl = StepControl {
        drift,
        ..StepControl::fixed()
    };
    let n = fine.len();
    let (reference, label, first) = match reference {
        Some(r) => (r.clone(), "exact".to_string(), 0),
        None => (
            solve_rde(z0, fine, vf, &ctrl)?.final_state().clone(),
            "self-refinement".to_string(),
            1,
        ),
    };
    let mut steps = Vec::new();
    let mut step_sizes = Vec::new();
    let mut errors = Vec::new();
    for level in first..first + levels {
        let stride = 1usize << level;
        if stride > n || !n.is_multiple_of(stride) {
            return Err(Error::InvalidArgument(format!(
                "grid of {n} steps cannot be coarsened by {stride}"
            )));
        }
        let nodes: Vec<usize> = (0..=n / stride).map(|k| k * stride).collect();
        let z = solve_on_partition(z0, fine, vf, &nodes, &ctrl)?;
        steps.push(n / stride);
        step_sizes.push(fine.horizon() / (n / stride) as f64);
        errors.push((z.final_state() - &reference).norm());
    }
    let order = loglog_slope(&step_sizes, &errors).map(|f| f.slope);
    Ok(ConvergenceReport {
        steps,
        step_sizes,
        errors,
        order,
        reference: label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drivers::{DriverMeta, RoughPathGrid};
    use crate::field::{Polynomial3, SineMix};

    fn scalar_linear(sigma: f64, b: f64) -> VectorFieldOracle {
        VectorFieldOracle::new(
            Arc::new(Polynomial3::linear(DMatrix::from_element(1, 1, b))),
            vec![Arc::new(Polynomial3::linear(DMatrix::from_element(1, 1, sigma)))],
            "linear",
        )
        .unwrap()
    }

    #[test]
    fn zero_noise_is_euler_drift() {
        let vf = scalar_linear(0.0, -0.7);
        let z = DVector::from_element(1, 2.0);
        let out = davie_step(&z, &SigElement::segment_exp(&[0.3]), 0.1, &vf).unwrap();
        assert!((out[0] - 2.0 * (1.0 - 0.07)).abs() < 1e-15);
    }

    #[test]
    fn scalar_step_is_cubic_taylor() {
        let vf = scalar_linear(0.9, 0.0);
        let z = DVector::from_element(1, 1.5);
        let out = davie_step(&z, &SigElement::segment_exp(&[0.2]), 0.0, &vf).unwrap();
        let x: f64 = 0.18;
        assert!((out[0] - 1.5 * (1.0 + x + x * x / 2.0 + x.powi(3) / 6.0)).abs() < 1e-15);
    }

    #[test]
    fn constant_rows_reduce_to_dot_product() {
        let noise: Vec<Arc<dyn crate::field::SmoothMap>> = vec![
            Arc::new(Polynomial3::zero(1, 1).with_constant(DVector::from_element(1, 2.0))),
            Arc::new(Polynomial3::zero(1, 1).with_constant(DVector::from_element(1, -1.0))),
        ];
        let vf = VectorFieldOracle::new(Arc::new(Polynomial3::zero(1, 1)), noise, "const").unwrap();
        let g = SigElement::segment_exp(&[0.3, 0.4]);
        let out = davie_step(&DVector::from_element(1, 0.0), &g, 0.5, &vf).unwrap();
        assert!((out[0] - (0.6 - 0.4)).abs() < 1e-15);
    }

    #[test]
    fn gubinelli_derivatives_stored() {
        let sine = SineMix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 0.5]));
        let vf = VectorFieldOracle::new(
            Arc::new(Polynomial3::linear(DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -2.0]))),
            vec![Arc::new(sine)],
            "t",
        )
        .unwrap();
        let grid = RoughPathGrid::from_function(|t| vec![(3.0 * t).sin()], 1, 32, 1.0, 4, 0.5).unwrap();
        let z0 = DVector::from_vec(vec![0.5, -0.2]);
        let run = solve_rde(&z0, &grid, &vf, &StepControl::default()).unwrap();
        for (k, z) in run.states.iter().enumerate() {
            assert_eq!(run.z1[k], vf.v(z));
            assert_eq!(run.z2[k], vf.dv_v(z));
        }
        assert!(run.controlled(&grid).is_ok());
    }

    #[test]
    fn adaptive_partition_respects_blocks() {
        let vf = scalar_linear(1.0, 0.0);
        let incs: Vec<Vec<f64>> = (0..64).map(|k| vec![((k * 13 % 7) as f64 - 3.0) * 0.05]).collect();
        let grid = RoughPathGrid::lift_uniform(1.0, &incs, 1, 0.5, DriverMeta::polyline()).unwrap();
        let ctrl = StepControl {
            max_block: 16,
            tol: 1e-6,
            ..StepControl::default()
        };
        let run = solve_rde(&DVector::from_element(1, 1.0), &grid, &vf, &ctrl).unwrap();
        for k in 0..=4 {
            assert!(run.nodes.contains(&(16 * k)));
        }
        for (w, d) in run.nodes.windows(2).zip(&run.defects) {
            let h = grid.time(w[1]) - grid.time(w[0]);
            assert!(d.is_nan() || *d <= 1e-6 * h);
        }
    }

    /// Nested adaptive partitions on smooth or constant drivers. With fBm
    /// drivers the scalar truncation errors all share one sign, so refining
    /// a step over a returning excursion can raise the error.
    #[test]
    fn halving_tol_never_increases_error_on_smooth_linear_problems() {
        let (sigma, b) = (0.8, -0.5);
        let vf = scalar_linear(sigma, b);
        let drift = DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 0.0, -0.5]);
        let drift_only = VectorFieldOracle::new(
            Arc::new(Polynomial3::linear(drift)),
            vec![Arc::new(Polynomial3::zero(2, 2))],
            "drift-only",
        )
        .unwrap();
        let t = 2.0f64;
        let e_at = DVector::from_vec(vec![
            2.0 * ((-t).exp() - (-0.5 * t).exp()) / (-1.0 + 0.5),
            (-0.5 * t).exp(),
        ]);
        let flat = RoughPathGrid::from_function(|_| vec![0.0], 1, 512, t, 1, 0.5).unwrap();
        for freq in [2.0, 5.0, 11.0] {
            let grid = RoughPathGrid::from_function(|s| vec![(freq * s).sin()], 1, 512, 1.0, 4, 0.5).unwrap();
            let exact = (sigma * grid.sig(0, grid.len()).unwrap().a()[0] + b).exp();
            let cases: [(&VectorFieldOracle, &RoughPathGrid, DVector<f64>, DVector<f64>); 2] = [
                (&vf, &grid, DVector::from_element(1, 1.0), DVector::from_element(1, exact)),
                (&drift_only, &flat, DVector::from_vec(vec![0.0, 1.0]), e_at.clone()),
            ];
            for (case, (field, g, z0, want)) in cases.into_iter().enumerate() {
                let mut prev = f64::INFINITY;
                for k in 0..24 {
                    let ctrl = StepControl { tol: 1e-1 / 2f64.powi(k), max_block: 64, ..StepControl::default() };
                    let err = (solve_rde(&z0, g, field, &ctrl).unwrap().final_state() - &want).amax();
                    assert!(err <= prev, "case {case}, freq {freq}, tol 2^-{k}/10: {err:e} > {prev:e}");
                    prev = err;
                }
            }
        }
    }

    #[test]
    fn blow_up_reports_partial_trace() {
        let mut cubic = Polynomial3::zero(1, 1);
        cubic.add_monomial(0, &[0, 0, 0], 1.0).unwrap();
        let vf = VectorFieldOracle::new(
            Arc::new(cubic),
            vec![Arc::new(Polynomial3::zero(1, 1))],
            "cubic",
        )
        .unwrap();
        let grid = RoughPathGrid::from_function(|t| vec![t], 1, 256, 4.0, 1, 0.5).unwrap();
        let ctrl = StepControl {
            blowup_cap: 1e6,
            ..StepControl::fixed()
        };
        match solve_rde(&DVector::from_element(1, 3.0), &grid, &vf, &ctrl) {
            Err(Error::BlowUp { partial, .. }) => assert!(partial.states.len() > 1),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn step_limit_aborts() {
        let vf = scalar_linear(1.0, 0.0);
        let grid = RoughPathGrid::from_function(|t| vec![(40.0 * t).sin()], 1, 64, 1.0, 4, 0.5).unwrap();
        let ctrl = StepControl {
            max_steps: 5,
            ..StepControl::fixed()
        };
        assert!(matches!(
            solve_rde(&DVector::from_element(1, 1.0), &grid, &vf, &ctrl),
            Err(Error::StepLimit { .. })
        ));
    }

    #[test]
    fn zero_fields_give_zero_error() {
        let vf = VectorFieldOracle::new(
            Arc::new(Polynomial3::zero(1, 1)),
            vec![Arc::new(Polynomial3::zero(1, 1))],
            "zero",
        )
        .unwrap();
        let grid = RoughPathGrid::from_function(|t| vec![t.sin()], 1, 64, 1.0, 1, 0.5).unwrap();
        let rep = convergence_study(&DVector::from_element(1, 1.0), &grid, &vf, 4, None, DriftScheme::SpaceTime).unwrap();
        assert!(rep.errors.iter().all(|&e| e == 0.0));
        assert_eq!(rep.order, None);
    }
}
