//! Declarative problem descriptions: field families, driver configuration
//! and stationary points.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::drivers::{default_gamma, fbm_grid, DriverMeta, FbmSpec, RandomScenario, RoughPathGrid};
use crate::error::{Error, Result};
use crate::field::{MapSum, Polynomial3, SineMix, SmoothMap, VectorFieldOracle};
use crate::solver::{solve_on_partition, StepControl};

/// One monomial `coef · Π z_vars` of output component `out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub out: usize,
    #[serde(default)]
    pub vars: Vec<usize>,
    pub coef: f64,
}

/// Named vector-field families with parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FieldSpec {
    /// `V₀(z) = A z`, `V_i(z) = B_i z`.
    Linear {
        drift: Vec<Vec<f64>>,
        noise: Vec<Vec<Vec<f64>>>,
    },
    /// Polynomial drift and noise columns of degree at most three.
    Polynomial {
        state_dim: usize,
        drift: Vec<Term>,
        noise: Vec<Vec<Term>>,
    },
    /// `V₀(z) = diag(a) z`, `V_i(z) = eps · M_i sin(z)`.
    StableExample {
        a: Vec<f64>,
        eps: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mix: Option<Vec<Vec<Vec<f64>>>>,
    },
    /// Scalar `V₀(z) = z − z³`, `V(z) = sigma (z − z³)`.
    BistableCubic { sigma: f64 },
    /// `V₀(z) = diag(a) z`, one noise column `eps · sin(z)` componentwise.
    LinearSaddle { a: Vec<f64>, eps: f64 },
    /// Scalar `V₀(z) = b z`, `V(z) = sigma z`.
    ScalarGeometric { sigma: f64, b: f64 },
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map(|x| x.len()).unwrap_or(0);
    if r == 0 || c == 0 || rows.iter().any(|x| x.len() != c) {
        return Err(Error::Spec(format!("{what}: expected a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn square(rows: &[Vec<f64>], m: usize, what: &str) -> Result<DMatrix<f64>> {
    let mat = matrix(rows, what)?;
    if mat.shape() != (m, m) {
        return Err(Error::Spec(format!("{what}: expected {m}x{m}, got {}x{}", mat.nrows(), mat.ncols())));
    }
    Ok(mat)
}

fn polynomial(m: usize, terms: &[Term], what: &str) -> Result<Polynomial3> {
    let mut p = Polynomial3::zero(m, m);
    for t in terms {
        p.add_monomial(t.out, &t.vars, t.coef)
            .map_err(|e| Error::Spec(format!("{what}: {e}")))?;
    }
    Ok(p)
}

/// Fixed mixing matrices used by the stable example when none are given.
fn default_mix(m: usize, d: usize) -> Vec<DMatrix<f64>> {
    (0..d)
        .map(|i| {
            DMatrix::from_fn(m, m, |r, c| {
                if r == c {
                    1.0
                } else {
                    0.5 * (((r + 2 * c + 3 * i) % 5) as f64 - 2.0) / 2.0
                }
            })
        })
        .collect()
}

impl FieldSpec {
    /// Builds the oracle for a driver of dimension `d`.
    pub fn build(&self, d: usize) -> Result<VectorFieldOracle> {
        let arc = |p: Polynomial3| -> Arc<dyn SmoothMap> { Arc::new(p) };
        match self {
            FieldSpec::Linear { drift, noise } => {
                let a = matrix(drift, "field.drift")?;
                let m = a.nrows();
                let a = square(drift, m, "field.drift")?;
                if noise.len() != d {
                    return Err(Error::Spec(format!(
                        "field.noise: expected {d} matrices for a {d}-dimensional driver, got {}",
                        noise.len()
                    )));
                }
                let cols = noise
                    .iter()
                    .map(|b| square(b, m, "field.noise").map(|b| arc(Polynomial3::linear(b))))
                    .collect::<Result<Vec<_>>>()?;
                VectorFieldOracle::new(arc(Polynomial3::linear(a)), cols, "linear")
            }
            FieldSpec::Polynomial {
                state_dim,
                drift,
                noise,
            } => {
                if noise.len() != d {
                    return Err(Error::Spec(format!(
                        "field.noise: expected {d} columns, got {}",
                        noise.len()
                    )));
                }
                let cols = noise
                    .iter()
                    .map(|t| polynomial(*state_dim, t, "field.noise").map(arc))
                    .collect::<Result<Vec<_>>>()?;
                VectorFieldOracle::new(arc(polynomial(*state_dim, drift, "field.drift")?), cols, "polynomial, locally Lipschitz")
            }
            FieldSpec::StableExample { a, eps, mix } => {
                let m = a.len();
                if m == 0 {
                    return Err(Error::Spec("field.a must be non-empty".into()));
                }
                let mixes = match mix {
                    Some(ms) => {
                        if ms.len() != d {
                            return Err(Error::Spec(format!("field.mix: expected {d} matrices")));
                        }
                        ms.iter().map(|x| square(x, m, "field.mix")).collect::<Result<Vec<_>>>()?
                    }
                    None => default_mix(m, d),
                };
                let drift = Polynomial3::linear(DMatrix::from_diagonal(&DVector::from_column_slice(a)));
                let cols: Vec<Arc<dyn SmoothMap>> = mixes
                    .into_iter()
                    .map(|mx| Arc::new(SineMix::new(mx * *eps)) as Arc<dyn SmoothMap>)
                    .collect();
                VectorFieldOracle::new(arc(drift), cols, "linear drift, bounded smooth noise")
            }
            FieldSpec::BistableCubic { sigma } => {
                if d != 1 {
                    return Err(Error::Spec("bistable-cubic needs a one-dimensional driver".into()));
                }
                let mut p = Polynomial3::linear(DMatrix::from_element(1, 1, 1.0));
                p.add_monomial(0, &[0, 0, 0], -1.0)?;
                let noise: Arc<dyn SmoothMap> = Arc::new(crate::field::Scaled(*sigma, Arc::new(p.clone())));
                VectorFieldOracle::new(arc(p), vec![noise], "cubic, one-sided growth")
            }
            FieldSpec::LinearSaddle { a, eps } => {
                if d != 1 {
                    return Err(Error::Spec("linear-saddle needs a one-dimensional driver".into()));
                }
                let m = a.len();
                let drift = Polynomial3::linear(DMatrix::from_diagonal(&DVector::from_column_slice(a)));
                let noise: Arc<dyn SmoothMap> = Arc::new(SineMix::new(DMatrix::identity(m, m) * *eps));
                VectorFieldOracle::new(arc(drift), vec![noise], "linear drift, bounded smooth noise")
            }
            FieldSpec::ScalarGeometric { sigma, b } => {
                if d != 1 {
                    return Err(Error::Spec("scalar-geometric needs a one-dimensional driver".into()));
                }
                VectorFieldOracle::new(
                    arc(Polynomial3::linear(DMatrix::from_element(1, 1, *b))),
                    vec![arc(Polynomial3::linear(DMatrix::from_element(1, 1, *sigma)))],
                    "linear",
                )
            }
        }
    }
}

/// Sum of two maps; kept for callers composing custom fields.
pub fn map_sum(maps: Vec<Arc<dyn SmoothMap>>) -> Arc<dyn SmoothMap> {
    Arc::new(MapSum(maps))
}

/// How driver realizations are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DriverConfig {
    Fbm {
        hurst: f64,
        dim: usize,
        #[serde(default = "default_refine")]
        refine: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gamma: Option<f64>,
    },
    /// Constant driver; only the drift acts.
    Zero { dim: usize },
    /// `X^i_t = amplitude · sin((i + 1) · frequency · t)`.
    Sine {
        dim: usize,
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default = "one")]
        frequency: f64,
        #[serde(default = "default_refine")]
        refine: usize,
    },
}

fn default_refine() -> usize {
    4
}

fn one() -> f64 {
    1.0
}

impl DriverConfig {
    pub fn dim(&self) -> usize {
        match self {
            DriverConfig::Fbm { dim, .. } | DriverConfig::Zero { dim } | DriverConfig::Sine { dim, .. } => *dim,
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            DriverConfig::Fbm { hurst, gamma, .. } => gamma.unwrap_or_else(|| default_gamma(*hurst, 0.02)),
            _ => 0.5,
        }
    }

    /// Realization with `steps` intervals on `[0, horizon]`.
    pub fn grid(&self, steps: usize, horizon: f64, scenario: RandomScenario) -> Result<RoughPathGrid> {
        match self {
            DriverConfig::Fbm {
                hurst,
                dim,
                refine,
                gamma,
            } => fbm_grid(
                &FbmSpec {
                    hurst: *hurst,
                    dim: *dim,
                    steps,
                    horizon,
                    refine: *refine,
                    gamma: *gamma,
                },
                scenario,
            ),
            DriverConfig::Zero { dim } => RoughPathGrid::lift_uniform(
                horizon,
                &vec![vec![0.0; *dim]; steps],
                1,
                0.5,
                DriverMeta::polyline(),
            ),
            DriverConfig::Sine {
                dim,
                amplitude,
                frequency,
                refine,
            } => RoughPathGrid::from_function(
                |t| {
                    (0..*dim)
                        .map(|i| amplitude * ((i + 1) as f64 * frequency * t).sin())
                        .collect()
                },
                *dim,
                steps,
                horizon,
                *refine,
                0.5,
            ),
        }
    }
}

/// User-supplied stationary trajectory: `initial(ω)` gives `Y_ω`.
#[derive(Clone)]
pub struct TrajectoryFn(pub Arc<dyn Fn(&RandomScenario) -> DVector<f64> + Send + Sync>);

impl fmt::Debug for TrajectoryFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("TrajectoryFn")
    }
}

/// The reference solution `Y` that probes and spectra are taken around.
#[derive(Debug, Clone)]
pub enum StationaryPoint {
    FixedZero,
    /// A constant state where drift and noise vanish.
    Fixed(DVector<f64>),
    /// `Y_{θ_t ω} = φ^t_ω(Y_ω)`, computed by solving from `Y_ω`.
    Trajectory(TrajectoryFn),
}

/// Serializable form of the non-trajectory stationary points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StationarySpec {
    #[default]
    FixedZero,
    Fixed { point: Vec<f64> },
}

impl From<&StationarySpec> for StationaryPoint {
    fn from(s: &StationarySpec) -> Self {
        match s {
            StationarySpec::FixedZero => StationaryPoint::FixedZero,
            StationarySpec::Fixed { point } => StationaryPoint::Fixed(DVector::from_column_slice(point)),
        }
    }
}

impl StationaryPoint {
    /// The constant state, for fixed points.
    pub fn fixed_state(&self, m: usize) -> Option<DVector<f64>> {
        match self {
            StationaryPoint::FixedZero => Some(DVector::zeros(m)),
            StationaryPoint::Fixed(p) => Some(p.clone()),
            StationaryPoint::Trajectory(_) => None,
        }
    }

    /// For fixed points, checks `V(Y) = V₀(Y) = 0` to 1e-12.
    pub fn validate(&self, vf: &VectorFieldOracle) -> Result<()> {
        if let Some(p) = self.fixed_state(vf.state_dim()) {
            if p.len() != vf.state_dim() {
                return Err(Error::DimensionMismatch {
                    expected: vf.state_dim(),
                    found: p.len(),
                    context: "stationary point",
                });
            }
            let worst = vf
                .columns()
                .iter()
                .map(|c| c.eval(&p).amax())
                .fold(0.0, f64::max);
            if worst > 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "fields do not vanish at the stationary point (max |V| = {worst:e})"
                )));
            }
        }
        Ok(())
    }

    /// `Y` at every grid node for the scenario.
    pub fn along(
        &self,
        scenario: &RandomScenario,
        grid: &RoughPathGrid,
        vf: &VectorFieldOracle,
        ctrl: &StepControl,
    ) -> Result<Vec<DVector<f64>>> {
        match self {
            StationaryPoint::Trajectory(f) => {
                let nodes: Vec<usize> = (0..=grid.len()).collect();
                Ok(solve_on_partition(&(f.0)(scenario), grid, vf, &nodes, ctrl)?.states)
            }
            _ => Ok(vec![self.fixed_state(vf.state_dim()).unwrap(); grid.len() + 1]),
        }
    }
}

/// Field, driver and stationary point together.
#[derive(Debug, Clone)]
pub struct Problem {
    pub field: VectorFieldOracle,
    pub driver: DriverConfig,
    pub stationary: StationaryPoint,
    pub control: StepControl,
}

impl Problem {
    pub fn new(field: VectorFieldOracle, driver: DriverConfig, stationary: StationaryPoint) -> Result<Self> {
        if field.noise_dim() != driver.dim() {
            return Err(Error::DimensionMismatch {
                expected: field.noise_dim(),
                found: driver.dim(),
                context: "driver vs field noise dimension",
            });
        }
        stationary.validate(&field)?;
        Ok(Self {
            field,
            driver,
            stationary,
            control: StepControl::fixed(),
        })
    }

    pub fn with_control(mut self, control: StepControl) -> Self {
        self.control = control;
        self
    }

    pub fn state_dim(&self) -> usize {
        self.field.state_dim()
    }
}

/// Checks that a user trajectory is stationary on one window: solving from
/// `Y_ω` for `shift_steps` grid steps lands on `Y_{θ_s ω}` (the initial
/// value of the shifted scenario). Returns the mismatch.
pub fn stationarity_defect(
    traj: &TrajectoryFn,
    problem: &Problem,
    scenario: &RandomScenario,
    steps: usize,
    horizon: f64,
    shift_steps: usize,
) -> Result<f64> {
    let grid = problem.driver.grid(steps, horizon, *scenario)?;
    let y0 = (traj.0)(scenario);
    let nodes: Vec<usize> = (0..=shift_steps).collect();
    let run = solve_on_partition(&y0, &grid, &problem.field, &nodes, &problem.control)?;
    let refine = match problem.driver {
        DriverConfig::Fbm { refine, .. } | DriverConfig::Sine { refine, .. } => refine,
        DriverConfig::Zero { .. } => 1,
    };
    let shifted = scenario.shifted(scenario.shift + shift_steps * refine);
    Ok((run.final_state() - (traj.0)(&shifted)).norm())
}
