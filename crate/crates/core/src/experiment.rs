//! Declarative experiment specs, the built-in catalog, and the task
//! pipeline that writes CSV/JSON artifacts plus a hashed manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cocycle::{solve_linearized, write_cocycle_csv};
use crate::drivers::RandomScenario;
use crate::error::{Error, Result};
use crate::manifold::{
    backward_probe, radius_estimate, stability_probe, BackwardConfig, Bisection, DecayReport, ProbeConfig,
    RadiusReport, Verdict,
};
use crate::problem::{DriverConfig, FieldSpec, Problem, StationaryPoint, StationarySpec};
use crate::solver::{convergence_study, solve_rde, StepControl};
use crate::spectrum::{lyapunov_qr, SpectrumConfig, STDERR_FLOOR};

/// Version of the artifact layout documented in `docs/artifact_schema.md`.
pub const ARTIFACT_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Solve,
    Convergence,
    Spectrum,
    Stability,
    Radius,
    Backward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub horizon: f64,
    pub steps: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedPolicy {
    #[serde(default)]
    pub base: u64,
    #[serde(default = "one")]
    pub count: usize,
}

impl Default for SeedPolicy {
    fn default() -> Self {
        Self { base: 0, count: 1 }
    }
}

impl SeedPolicy {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.count as u64).map(|k| self.base.wrapping_add(k)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveTask {
    pub z0: Vec<f64>,
    #[serde(default)]
    pub linearize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceKind {
    /// Closed form where the field family has one, else self-refinement.
    #[default]
    Auto,
    SelfRefinement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceTask {
    pub z0: Vec<f64>,
    pub levels: usize,
    #[serde(default)]
    pub reference: ReferenceKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumTask {
    pub t0: f64,
    pub windows: usize,
    pub steps_per_window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityTask {
    pub probe: ProbeConfig,
    pub offsets: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadiusTask {
    /// Probe settings; `probe.nu` is replaced by each entry of `nus`.
    pub probe: ProbeConfig,
    pub nus: Vec<f64>,
    pub bisection: Bisection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sphere_points: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackwardTask {
    pub config: BackwardConfig,
    pub z: Vec<f64>,
}

/// Acceptance thresholds evaluated in `--check` mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CheckSpec {
    /// Spectrum: `μ̂₁ + 3·stderr` stays below this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_exponent_below: Option<f64>,
    /// Stability: every probe is stable with fitted rate at most this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_fitted_rate: Option<f64>,
    /// Radius: every estimate stays below this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius_below: Option<f64>,
    /// Radius: estimates do not increase with `ν`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius_nonincreasing: Option<bool>,
    /// Backward: fitted rate within `backward_rate_tol` of this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backward_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backward_rate_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_round_trip: Option<f64>,
    /// Convergence: fitted order at least this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_order: Option<f64>,
    /// Convergence/solve: finest-level error at most this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_error: Option<f64>,
}

impl CheckSpec {
    pub fn is_empty(&self) -> bool {
        *self == CheckSpec::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub task: Task,
    pub driver: DriverConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    pub field: FieldSpec,
    #[serde(default)]
    pub stationary: StationarySpec,
    #[serde(default)]
    pub control: StepControl,
    #[serde(default)]
    pub seeds: SeedPolicy,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solve: Option<SolveTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence: Option<ConvergenceTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<SpectrumTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stability: Option<StabilityTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<RadiusTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backward: Option<BackwardTask>,
    #[serde(default, skip_serializing_if = "CheckSpec::is_empty")]
    pub check: CheckSpec,
}

fn spec_err(msg: impl Into<String>) -> Error {
    Error::Spec(msg.into())
}

/// 1-based line of the `[table]` header (or `table.` dotted key) in `text`.
fn table_line(text: &str, table: &str) -> Option<usize> {
    let header = format!("[{table}]");
    let dotted = format!("{table}.");
    text.lines()
        .position(|l| {
            let l = l.trim();
            l == header || l.starts_with(&dotted)
        })
        .map(|i| i + 1)
}

impl ExperimentSpec {
    /// Parses and validates; errors carry line/column where available.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| {
            let loc = e
                .span()
                .map(|s| {
                    let before = &text[..s.start.min(text.len())];
                    let line = before.matches('\n').count() + 1;
                    let col = before.len() - before.rfind('\n').map(|i| i + 1).unwrap_or(0) + 1;
                    format!("line {line}, column {col}: ")
                })
                .unwrap_or_default();
            spec_err(format!("{loc}{}", e.message()))
        })?;
        spec.validate().map_err(|e| match e {
            Error::Spec(msg) => {
                let table = msg.split(['.', ':', ' ']).next().unwrap_or("");
                match table_line(text, table) {
                    Some(line) => spec_err(format!("line {line}: {msg}")),
                    None => spec_err(msg),
                }
            }
            other => other,
        })?;
        Ok(spec)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// Builds the problem and checks that the task's table is present.
    pub fn validate(&self) -> Result<()> {
        self.control
            .validate()
            .map_err(|e| spec_err(format!("control: {e}")))?;
        self.problem()?;
        if self.seeds.count == 0 {
            return Err(spec_err("seeds.count must be at least 1"));
        }
        let m = self.field.build(self.driver.dim()).map(|f| f.state_dim())?;
        let dim_check = |what: &str, v: &[f64]| -> Result<()> {
            if v.len() != m {
                return Err(spec_err(format!("{what} has {} entries, state dimension is {m}", v.len())));
            }
            Ok(())
        };
        let missing = |t: &str| spec_err(format!("{t}: table required for task = \"{t}\""));
        match self.task {
            Task::Solve => {
                let s = self.solve.as_ref().ok_or_else(|| missing("solve"))?;
                dim_check("solve.z0", &s.z0)?;
                self.grid.as_ref().ok_or_else(|| spec_err("grid: table required for task = \"solve\""))?;
            }
            Task::Convergence => {
                let c = self.convergence.as_ref().ok_or_else(|| missing("convergence"))?;
                dim_check("convergence.z0", &c.z0)?;
                let g = self
                    .grid
                    .as_ref()
                    .ok_or_else(|| spec_err("grid: table required for task = \"convergence\""))?;
                if c.levels == 0 || g.steps % (1 << c.levels) != 0 {
                    return Err(spec_err(format!(
                        "convergence.levels = {} does not divide grid.steps = {}",
                        c.levels, g.steps
                    )));
                }
            }
            Task::Spectrum => {
                let s = self.spectrum.as_ref().ok_or_else(|| missing("spectrum"))?;
                self.spectrum_config(s)
                    .validate()
                    .map_err(|e| spec_err(format!("spectrum: {e}")))?;
            }
            Task::Stability => {
                let s = self.stability.as_ref().ok_or_else(|| missing("stability"))?;
                if s.offsets.is_empty() {
                    return Err(spec_err("stability.offsets must not be empty"));
                }
                for o in &s.offsets {
                    dim_check("stability.offsets entry", o)?;
                }
            }
            Task::Radius => {
                let r = self.radius.as_ref().ok_or_else(|| missing("radius"))?;
                if r.nus.is_empty() {
                    return Err(spec_err("radius.nus must not be empty"));
                }
                if !(r.bisection.lo > 0.0 && r.bisection.lo < r.bisection.hi) {
                    return Err(spec_err("radius.bisection needs 0 < lo < hi"));
                }
            }
            Task::Backward => {
                let b = self.backward.as_ref().ok_or_else(|| missing("backward"))?;
                dim_check("backward.z", &b.z)?;
            }
        }
        Ok(())
    }

    pub fn problem(&self) -> Result<Problem> {
        let field = self.field.build(self.driver.dim()).map_err(|e| match e {
            Error::Spec(m) => spec_err(format!("field: {m}")),
            other => spec_err(format!("field: {other}")),
        })?;
        if let DriverConfig::Fbm { hurst, .. } = self.driver {
            if !(hurst > 0.25 && hurst <= 1.0) {
                return Err(spec_err(format!("driver.hurst = {hurst} must lie in (1/4, 1]")));
            }
        }
        let stationary = StationaryPoint::from(&self.stationary);
        Problem::new(field, self.driver.clone(), stationary)
            .map(|p| p.with_control(self.control))
            .map_err(|e| spec_err(format!("stationary: {e}")))
    }

    fn spectrum_config(&self, s: &SpectrumTask) -> SpectrumConfig {
        SpectrumConfig {
            t0: s.t0,
            windows: s.windows,
            steps_per_window: s.steps_per_window,
            seeds: self.seeds.seeds(),
        }
    }
}

/// One built-in catalog entry.
#[derive(Debug, Clone, Serialize)]
pub struct Builtin {
    pub name: &'static str,
    pub description: &'static str,
    pub spec: &'static str,
}

const LINEAR_DIAGONAL: &str = r#"name = "linear-diagonal"
task = "spectrum"

[driver]
kind = "zero"
dim = 1

[field]
family = "linear"
drift = [[-1.0, 0.0], [0.0, -2.0]]
noise = [[[0.0, 0.0], [0.0, 0.0]]]

[seeds]
base = 0
count = 100

[spectrum]
t0 = 1.0
windows = 1024
steps_per_window = 1024

[check]
top_exponent_below = 0.0
"#;

const LINEAR_STABLE: &str = r#"name = "linear-stable"
task = "spectrum"

[driver]
kind = "fbm"
hurst = 0.4
dim = 1
refine = 4

[field]
family = "linear"
drift = [[-1.0, 0.5], [0.0, -2.0]]
noise = [[[0.2, 0.0], [0.1, -0.2]]]

[seeds]
base = 1
count = 16

[spectrum]
t0 = 1.0
windows = 128
steps_per_window = 16

[check]
top_exponent_below = 0.0
"#;

const STABLE_EXAMPLE: &str = r#"name = "stable-example"
task = "stability"

[driver]
kind = "fbm"
hurst = 0.35
dim = 2
refine = 4

[field]
family = "stable-example"
a = [-1.0, -2.0]
eps = 0.05

[seeds]
base = 7

[stability]
offsets = [[0.01, 0.0], [0.0, 0.01], [-0.007, 0.007], [0.005, -0.005]]

[stability.probe]
nu = 0.5
t0 = 1.0
windows = 16
steps_per_window = 16
escape_cap = 10.0
mu_minus = -1.0

[check]
max_fitted_rate = -0.8
"#;

const BISTABLE_CUBIC: &str = r#"name = "bistable-cubic"
task = "radius"

[driver]
kind = "fbm"
hurst = 0.4
dim = 1
refine = 4

[field]
family = "bistable-cubic"
sigma = 0.2

[stationary]
kind = "fixed"
point = [1.0]

[seeds]
base = 3

[radius]
nus = [0.5, 1.0]

[radius.probe]
nu = 0.5
t0 = 1.0
windows = 16
steps_per_window = 16
escape_cap = 10.0

[radius.bisection]
lo = 0.01
hi = 1.0
iters = 12

[check]
radius_below = 1.0
radius_nonincreasing = true
"#;

const LINEAR_SADDLE: &str = r#"name = "linear-saddle"
task = "backward"

[driver]
kind = "fbm"
hurst = 0.4
dim = 1
refine = 4

[field]
family = "linear-saddle"
a = [1.0, -1.0]
eps = 0.1

[seeds]
base = 5

[backward]
z = [0.1, 0.0]

[backward.config]
t0 = 1.0
windows = 16
steps_per_window = 16
escape_cap = 10.0

[check]
backward_rate = -1.0
backward_rate_tol = 0.15
max_round_trip = 1e-6
"#;

const SCALAR_GEOMETRIC: &str = r#"name = "scalar-geometric"
task = "convergence"

[driver]
kind = "fbm"
hurst = 0.35
dim = 1
refine = 4

[grid]
horizon = 1.0
steps = 4096

[field]
family = "scalar-geometric"
sigma = 0.1
b = 0.3

[seeds]
base = 11

[convergence]
z0 = [1.0]
levels = 5

[check]
max_error = 1e-6
"#;

/// Problem families shipped with the tool, each a complete spec.
pub fn builtins() -> Vec<Builtin> {
    vec![
        Builtin {
            name: "linear-diagonal",
            description: "drift-only linear system diag(-1,-2); spectrum",
            spec: LINEAR_DIAGONAL,
        },
        Builtin {
            name: "linear-stable",
            description: "stable linear drift with linear fBm noise; spectrum",
            spec: LINEAR_STABLE,
        },
        Builtin {
            name: "stable-example",
            description: "diag(-1,-2) drift with small bounded smooth fBm noise vanishing at 0; decay probes",
            spec: STABLE_EXAMPLE,
        },
        Builtin {
            name: "bistable-cubic",
            description: "scalar z - z^3 drift with multiplicative noise around the stable point 1; stability radius",
            spec: BISTABLE_CUBIC,
        },
        Builtin {
            name: "linear-saddle",
            description: "saddle diag(1,-1) with bounded noise; backward pre-images on the unstable axis",
            spec: LINEAR_SADDLE,
        },
        Builtin {
            name: "scalar-geometric",
            description: "scalar linear equation with closed-form solution; convergence",
            spec: SCALAR_GEOMETRIC,
        },
    ]
}

/// Machine-readable catalog: name, description, task and default spec.
pub fn catalog_json() -> Result<String> {
    let entries = builtins()
        .into_iter()
        .map(|b| {
            let spec = ExperimentSpec::from_toml_str(b.spec)?;
            Ok(serde_json::json!({
                "name": b.name,
                "description": b.description,
                "task": spec.task,
                "family": serde_json::to_value(&spec.field)?["family"],
                "spec": b.spec,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(serde_json::to_string_pretty(&entries)?)
}

pub fn builtin(name: &str) -> Option<Builtin> {
    builtins().into_iter().find(|b| b.name == name)
}

/// Outcome of one acceptance check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn show(x: Option<f64>) -> String {
    x.map_or_else(|| "none".into(), |v| format!("{v:.4}"))
}

fn check(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed,
        detail,
    }
}

/// What a run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub files: Vec<String>,
    pub checks: Vec<CheckResult>,
    /// Set when the task failed; artifacts written so far are kept.
    pub failure: Option<String>,
}

impl RunOutcome {
    pub fn checks_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub spec_hash: String,
    pub files: Vec<ManifestEntry>,
    pub versions: std::collections::BTreeMap<String, String>,
    pub created_unix: u64,
}

struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
}

impl Artifacts {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn csv(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }
}

fn vector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

fn run_task(spec: &ExperimentSpec, art: &mut Artifacts) -> Result<Vec<CheckResult>> {
    let problem = spec.problem()?;
    let vf = &problem.field;
    let seed = spec.seeds.base;
    let scenario = RandomScenario::new(seed);
    let chk = &spec.check;
    let mut checks = Vec::new();
    match spec.task {
        Task::Solve => {
            let task = spec.solve.as_ref().expect("validated");
            let g = spec.grid.as_ref().expect("validated");
            let grid = spec.driver.grid(g.steps, g.horizon, scenario)?;
            let run = solve_rde(&vector(&task.z0), &grid, vf, &spec.control)?;
            art.csv("solution.csv", |out| {
                let m = run.states[0].len();
                let cols: Vec<String> = (0..m).map(|i| format!("z_{i}")).collect();
                writeln!(out, "node,t,{},defect", cols.join(","))?;
                for (k, z) in run.states.iter().enumerate() {
                    let vals: Vec<String> = z.iter().map(|x| format!("{x:?}")).collect();
                    let defect = if k == 0 { f64::NAN } else { run.defects[k - 1] };
                    writeln!(out, "{},{:?},{},{:?}", run.nodes[k], run.times[k], vals.join(","), defect)?;
                }
                Ok(())
            })?;
            if task.linearize {
                let lin = solve_linearized(&run, &grid, vf)?;
                art.csv("cocycle.csv", |out| write_cocycle_csv(out, &lin))?;
            }
            art.json(
                "solve.json",
                &serde_json::json!({
                    "final_state": run.final_state().as_slice(),
                    "final_time": run.final_time(),
                    "steps": run.num_steps(),
                    "seed": seed,
                }),
            )?;
        }
        Task::Convergence => {
            let task = spec.convergence.as_ref().expect("validated");
            let g = spec.grid.as_ref().expect("validated");
            let grid = spec.driver.grid(g.steps, g.horizon, scenario)?;
            let z0 = vector(&task.z0);
            let exact = match (&spec.field, task.reference) {
                (FieldSpec::ScalarGeometric { sigma, b }, ReferenceKind::Auto) => {
                    let x = grid.sig(0, grid.len())?.a()[0];
                    Some(DVector::from_element(1, z0[0] * (sigma * x + b * grid.horizon()).exp()))
                }
                _ => None,
            };
            let levels = if exact.is_some() { task.levels + 1 } else { task.levels };
            let rep = convergence_study(&z0, &grid, vf, levels, exact.as_ref(), spec.control.drift)?;
            art.csv("convergence.csv", |out| {
                writeln!(out, "steps,h,error")?;
                for ((n, h), e) in rep.steps.iter().zip(&rep.step_sizes).zip(&rep.errors) {
                    writeln!(out, "{n},{h:?},{e:?}")?;
                }
                Ok(())
            })?;
            art.json("convergence.json", &rep)?;
            if let Some(min) = chk.min_order {
                let ok = rep.order.is_some_and(|o| o >= min);
                checks.push(check("min_order", ok, format!("order {} vs {min}", show(rep.order))));
            }
            if let Some(max) = chk.max_error {
                let e = rep.errors[0];
                checks.push(check("max_error", e <= max, format!("finest error {e:e} vs {max:e}")));
            }
        }
        Task::Spectrum => {
            let task = spec.spectrum.as_ref().expect("validated");
            let spectrum = lyapunov_qr(&problem, &spec.spectrum_config(task))?;
            art.json("spectrum.json", &spectrum)?;
            art.csv("spectrum_series.csv", |out| spectrum.write_series_csv(out))?;
            if let Some(bound) = chk.top_exponent_below {
                let top = spectrum.top();
                let upper = top.mean + 3.0 * top.stderr.max(STDERR_FLOOR);
                checks.push(check(
                    "top_exponent_below",
                    !spectrum.neg_infinite[0] && upper < bound || spectrum.neg_infinite[0],
                    format!("mu_1 = {} ± {} vs {bound}", top.mean, top.stderr),
                ));
            }
        }
        Task::Stability => {
            let task = spec.stability.as_ref().expect("validated");
            let offsets: Vec<DVector<f64>> = task.offsets.iter().map(|o| vector(o)).collect();
            let reports = stability_probe(&problem, &scenario, &offsets, &task.probe)?;
            art.csv("decay.csv", |out| write_decay_csv(out, &reports, task.probe.steps_per_window))?;
            art.json("stability.json", &decay_summary(&reports))?;
            if let Some(max) = chk.max_fitted_rate {
                let ok = reports
                    .iter()
                    .all(|r| r.verdict == Verdict::Stable && r.fitted_rate.is_some_and(|x| x <= max));
                let rates: Vec<String> = reports.iter().map(|r| show(r.fitted_rate)).collect();
                checks.push(check("max_fitted_rate", ok, format!("rates [{}] vs {max}", rates.join(", "))));
            }
        }
        Task::Radius => {
            let task = spec.radius.as_ref().expect("validated");
            let mut reports: Vec<RadiusReport> = Vec::new();
            for &nu in &task.nus {
                let cfg = ProbeConfig {
                    nu,
                    ..task.probe.clone()
                };
                reports.push(radius_estimate(&problem, &scenario, &cfg, &task.bisection, task.sphere_points)?);
            }
            art.csv("radius.csv", |out| {
                writeln!(out, "nu,r,passed")?;
                for rep in &reports {
                    for (r, ok) in &rep.tested {
                        writeln!(out, "{:?},{r:?},{}", rep.nu, u8::from(*ok))?;
                    }
                }
                Ok(())
            })?;
            art.json("radius.json", &reports)?;
            if let Some(max) = chk.radius_below {
                let ok = reports.iter().all(|r| r.radius < max);
                checks.push(check("radius_below", ok, format!("radii below {max}")));
            }
            if chk.radius_nonincreasing == Some(true) {
                let mut by_nu: Vec<(f64, f64)> = reports.iter().map(|r| (r.nu, r.radius)).collect();
                by_nu.sort_by(|a, b| a.0.total_cmp(&b.0));
                let ok = by_nu.windows(2).all(|w| w[1].1 <= w[0].1);
                checks.push(check("radius_nonincreasing", ok, format!("{by_nu:?}")));
            }
        }
        Task::Backward => {
            let task = spec.backward.as_ref().expect("validated");
            let rep = backward_probe(&problem, &scenario, &vector(&task.z), &task.config)?;
            art.csv("backward.csv", |out| {
                writeln!(out, "t_back,distance")?;
                for (t, d) in rep.times.iter().zip(&rep.distances) {
                    writeln!(out, "{t:?},{d:?}")?;
                }
                Ok(())
            })?;
            art.json("backward.json", &rep)?;
            if let Some(target) = chk.backward_rate {
                let tol = chk.backward_rate_tol.unwrap_or(0.15);
                let ok = rep.fitted_rate.is_some_and(|r| (r - target).abs() <= tol);
                checks.push(check("backward_rate", ok, format!("rate {} vs {target} ± {tol}", show(rep.fitted_rate))));
            }
            if let Some(max) = chk.max_round_trip {
                checks.push(check(
                    "max_round_trip",
                    rep.round_trip_error <= max,
                    format!("{:e} vs {max:e}", rep.round_trip_error),
                ));
            }
        }
    }
    Ok(checks)
}

fn write_decay_csv<W: Write>(out: &mut W, reports: &[DecayReport], spw: usize) -> Result<()> {
    writeln!(out, "probe,t,distance,weighted,window_node")?;
    for (p, r) in reports.iter().enumerate() {
        for (k, (t, d)) in r.sub_times.iter().zip(&r.sub_distances).enumerate() {
            let w = (r.nu * t).exp() * d;
            writeln!(out, "{p},{t:?},{d:?},{w:?},{}", u8::from(k % spw == 0))?;
        }
    }
    Ok(())
}

fn decay_summary(reports: &[DecayReport]) -> serde_json::Value {
    let probes: Vec<serde_json::Value> = reports
        .iter()
        .map(|r| {
            serde_json::json!({
                "offset": r.offset,
                "nu": r.nu,
                "fitted_rate": r.fitted_rate,
                "weighted_sup": r.weighted_sup,
                "last_new_max": r.last_new_max,
                "plateau": r.plateau,
                "escaped": r.escaped,
                "rate_ok": r.rate_ok,
                "verdict": r.verdict,
            })
        })
        .collect();
    serde_json::json!({ "probes": probes })
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Runs the spec's task into `out_dir` (created if needed). Task failures
/// are recorded in `status.json` and returned as `failure`; spec and I/O
/// errors are returned as `Err`.
pub fn run_experiment(spec: &ExperimentSpec, out_dir: &Path) -> Result<RunOutcome> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut art = Artifacts {
        dir: out_dir.to_path_buf(),
        files: Vec::new(),
    };
    art.write("spec.toml", spec.to_toml()?.as_bytes())?;
    let (checks, failure) = match run_task(spec, &mut art) {
        Ok(c) => (c, None),
        Err(e) if matches!(e, Error::Io(_)) => return Err(e),
        Err(e) => (Vec::new(), Some(e)),
    };
    let status = match &failure {
        None => serde_json::json!({ "status": "ok" }),
        Some(e) => serde_json::json!({
            "status": "failed",
            "numerical": e.is_numerical(),
            "error": e.to_string(),
        }),
    };
    art.json("status.json", &status)?;
    if !spec.check.is_empty() && failure.is_none() {
        art.json("check.json", &checks)?;
    }
    let mut files = art.files.clone();
    files.sort();
    let entries = files
        .iter()
        .map(|f| {
            Ok(ManifestEntry {
                path: f.clone(),
                sha256: sha256_file(&out_dir.join(f))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut versions = std::collections::BTreeMap::new();
    versions.insert("roughdyn".to_string(), env!("CARGO_PKG_VERSION").to_string());
    versions.insert("artifact_format".to_string(), ARTIFACT_FORMAT.to_string());
    let manifest = Manifest {
        spec_hash: spec.hash()?,
        files: entries,
        versions,
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(out_dir.join("manifest.json"), text)?;
    Ok(RunOutcome {
        out_dir: out_dir.to_path_buf(),
        files,
        checks,
        failure: failure.map(|e| e.to_string()),
    })
}

/// Recomputes every file hash listed in a manifest; returns mismatches.
pub fn verify_manifest(out_dir: &Path) -> Result<Vec<String>> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json"))?)?;
    let mut bad = Vec::new();
    for e in &manifest.files {
        if sha256_file(&out_dir.join(&e.path))? != e.sha256 {
            bad.push(e.path.clone());
        }
    }
    Ok(bad)
}
