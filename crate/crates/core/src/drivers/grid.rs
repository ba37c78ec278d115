use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::SigElement;

/// How the per-step elements compose.
///
/// `Reversed` grids come from [`RoughPathGrid::reverse_driver`]: their steps
/// are negated copies of the original ones and compose with
/// [`SigElement::reversed_chen_mul`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Forward,
    Reversed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverKind {
    Fbm,
    Polyline,
    Smooth,
}

impl DriverKind {
    pub fn code(self) -> u8 {
        match self {
            DriverKind::Fbm => 0,
            DriverKind::Polyline => 1,
            DriverKind::Smooth => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DriverKind::Fbm),
            1 => Some(DriverKind::Polyline),
            2 => Some(DriverKind::Smooth),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverMeta {
    pub kind: DriverKind,
    pub hurst: Option<f64>,
    pub seed: Option<u64>,
}

impl DriverMeta {
    pub fn polyline() -> Self {
        Self {
            kind: DriverKind::Polyline,
            hurst: None,
            seed: None,
        }
    }
}

/// A driver realization on a time grid.
///
/// Every step stores the signature of the *space-time* path `(t, X_t)`:
/// coordinate `0` is time and coordinates `1..=d` are the driver. The
/// spatial signature is the projection onto `1..=d`. Keeping the time
/// coordinate lets the solver treat the drift at the same order as the
/// rough part.
#[derive(Debug, Clone, PartialEq)]
pub struct RoughPathGrid {
    times: Vec<f64>,
    steps: Vec<SigElement>,
    spatial: Vec<SigElement>,
    gamma: f64,
    meta: DriverMeta,
    orientation: Orientation,
}

fn spatial_coords(d: usize) -> Vec<usize> {
    (1..=d).collect()
}

impl RoughPathGrid {
    /// Assembles a grid from space-time steps; checks shapes and time order.
    pub fn from_spacetime_steps(
        times: Vec<f64>,
        steps: Vec<SigElement>,
        gamma: f64,
        meta: DriverMeta,
        orientation: Orientation,
    ) -> Result<Self> {
        if times.len() != steps.len() + 1 || steps.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "grid needs N >= 1 steps and N + 1 times, got {} steps and {} times",
                steps.len(),
                times.len()
            )));
        }
        if !times.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument("grid times must be strictly increasing".into()));
        }
        let big_d = steps[0].dim();
        if big_d < 2 {
            return Err(Error::InvalidArgument("space-time steps need dimension >= 2".into()));
        }
        if let Some(bad) = steps.iter().find(|s| s.dim() != big_d) {
            return Err(Error::DimensionMismatch {
                expected: big_d,
                found: bad.dim(),
                context: "grid steps",
            });
        }
        if !(gamma > 0.25 && gamma <= 1.0) {
            return Err(Error::InvalidArgument(format!("gamma {gamma} outside (1/4, 1]")));
        }
        let keep = spatial_coords(big_d - 1);
        let spatial = steps.iter().map(|s| s.project(&keep)).collect();
        Ok(Self {
            times,
            steps,
            spatial,
            gamma,
            meta,
            orientation,
        })
    }

    /// Piecewise-linear lift of a path given by its increments.
    ///
    /// `increments` holds `N * refine` rows of length `d`; each grid
    /// interval `[times[i], times[i+1]]` is split uniformly into `refine`
    /// sub-segments and its step is the Chen product of their segment
    /// exponentials.
    pub fn lift_polyline(
        times: Vec<f64>,
        increments: &[Vec<f64>],
        refine: usize,
        gamma: f64,
        meta: DriverMeta,
    ) -> Result<Self> {
        if refine == 0 {
            return Err(Error::InvalidArgument("refine must be positive".into()));
        }
        let n = times.len().saturating_sub(1);
        if increments.len() != n * refine {
            return Err(Error::InvalidArgument(format!(
                "expected {} increments for {} steps with refine {}, got {}",
                n * refine,
                n,
                refine,
                increments.len()
            )));
        }
        let d = increments.first().map(|r| r.len()).unwrap_or(0);
        if d == 0 {
            return Err(Error::InvalidArgument("increments must have positive dimension".into()));
        }
        let mut steps = Vec::with_capacity(n);
        let mut seg = vec![0.0; d + 1];
        for i in 0..n {
            let h = (times[i + 1] - times[i]) / refine as f64;
            let mut acc = SigElement::zero(d + 1);
            for row in &increments[i * refine..(i + 1) * refine] {
                if row.len() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        found: row.len(),
                        context: "polyline increments",
                    });
                }
                if row.iter().any(|x| !x.is_finite()) {
                    return Err(Error::InvalidArgument("non-finite increment".into()));
                }
                seg[0] = h;
                seg[1..].copy_from_slice(row);
                acc.chen_mul_assign(&SigElement::segment_exp(&seg));
            }
            steps.push(acc);
        }
        Self::from_spacetime_steps(times, steps, gamma, meta, Orientation::Forward)
    }

    /// Uniform grid on `[0, horizon]` lifted from `N * refine` increments.
    pub fn lift_uniform(
        horizon: f64,
        increments: &[Vec<f64>],
        refine: usize,
        gamma: f64,
        meta: DriverMeta,
    ) -> Result<Self> {
        if refine == 0 || !increments.len().is_multiple_of(refine) {
            return Err(Error::InvalidArgument(
                "increment count must be a multiple of refine".into(),
            ));
        }
        let n = increments.len() / refine;
        let times = uniform_times(horizon, n);
        Self::lift_polyline(times, increments, refine, gamma, meta)
    }

    /// Lift of a sampled deterministic path `f` on `[0, horizon]`.
    pub fn from_function<F>(
        f: F,
        dim: usize,
        steps: usize,
        horizon: f64,
        refine: usize,
        gamma: f64,
    ) -> Result<Self>
    where
        F: Fn(f64) -> Vec<f64>,
    {
        let fine = steps * refine;
        let mut prev = f(0.0);
        if prev.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: prev.len(),
                context: "path function",
            });
        }
        let mut incs = Vec::with_capacity(fine);
        for k in 1..=fine {
            let x = f(horizon * k as f64 / fine as f64);
            incs.push(x.iter().zip(&prev).map(|(a, b)| a - b).collect());
            prev = x;
        }
        let meta = DriverMeta {
            kind: DriverKind::Smooth,
            hurst: None,
            seed: None,
        };
        Self::lift_uniform(horizon, &incs, refine, gamma, meta)
    }

    /// Driver dimension `d`.
    pub fn dim(&self) -> usize {
        self.steps[0].dim() - 1
    }

    /// Number of steps `N`.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn time(&self, node: usize) -> f64 {
        self.times[node]
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.len()] - self.times[0]
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn meta(&self) -> &DriverMeta {
        &self.meta
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    /// Spatial step `i` (interval `[t_i, t_{i+1}]`).
    pub fn step(&self, i: usize) -> &SigElement {
        &self.spatial[i]
    }

    pub fn steps(&self) -> &[SigElement] {
        &self.spatial
    }

    /// Space-time step `i`; coordinate 0 is time.
    pub fn spacetime_step(&self, i: usize) -> &SigElement {
        &self.steps[i]
    }

    pub fn spacetime_steps(&self) -> &[SigElement] {
        &self.steps
    }

    fn check_nodes(&self, s: usize, t: usize) -> Result<()> {
        let len = self.times.len();
        if s >= len {
            return Err(Error::OffGrid { node: s, len });
        }
        if t >= len {
            return Err(Error::OffGrid { node: t, len });
        }
        if s > t {
            return Err(Error::InvalidArgument(format!("node {s} after node {t}")));
        }
        Ok(())
    }

    fn fold(&self, items: &[SigElement], dim: usize) -> SigElement {
        match self.orientation {
            Orientation::Forward => {
                let mut acc = SigElement::zero(dim);
                for g in items {
                    acc.chen_mul_assign(g);
                }
                acc
            }
            Orientation::Reversed => {
                // undo the negation, fold in original time order, negate back
                let mut acc = SigElement::zero(dim);
                for g in items.iter().rev() {
                    acc.chen_mul_assign(&g.reverse_element());
                }
                acc.reverse_element()
            }
        }
    }

    /// Spatial signature over `[t_s, t_t]` by folding the covered steps.
    pub fn sig(&self, s: usize, t: usize) -> Result<SigElement> {
        self.check_nodes(s, t)?;
        Ok(self.fold(&self.spatial[s..t], self.dim()))
    }

    /// Space-time signature over `[t_s, t_t]`.
    pub fn spacetime_sig(&self, s: usize, t: usize) -> Result<SigElement> {
        self.check_nodes(s, t)?;
        Ok(self.fold(&self.steps[s..t], self.dim() + 1))
    }

    /// Calls `f(t, sig(s, t))` for `t = s+1 ..= end` with one Chen product
    /// per call.
    pub fn for_each_sig_from<F>(&self, s: usize, end: usize, mut f: F)
    where
        F: FnMut(usize, &SigElement),
    {
        let mut acc = SigElement::zero(self.dim());
        for t in s + 1..=end {
            match self.orientation {
                Orientation::Forward => acc.chen_mul_assign(&self.spatial[t - 1]),
                Orientation::Reversed => {
                    acc = acc
                        .reversed_chen_mul(&self.spatial[t - 1])
                        .expect("equal dimensions");
                }
            }
            f(t, &acc);
        }
    }

    /// Largest shuffle defect over the steps, measured on the forward
    /// representative of each step.
    pub fn max_shuffle_defect(&self) -> f64 {
        self.steps
            .iter()
            .map(|g| match self.orientation {
                Orientation::Forward => g.shuffle_defect(),
                Orientation::Reversed => g.reverse_element().shuffle_defect(),
            })
            .fold(0.0, f64::max)
    }

    /// Level-wise Hölder quotients over node pairs in `[t_i0, t_i1]`:
    /// `(‖δX‖/Δ^γ, ‖𝕏²‖/Δ^{2γ}, ‖𝕏³‖/Δ^{3γ})`, maximized separately.
    pub fn holder_components(&self, gamma1: f64, i0: usize, i1: usize) -> Result<[f64; 3]> {
        self.check_nodes(i0, i1)?;
        let mut out = [0.0f64; 3];
        for s in i0..i1 {
            self.for_each_sig_from(s, i1, |t, g| {
                let dt = self.times[t] - self.times[s];
                let [n1, n2, n3] = g.level_norms();
                out[0] = out[0].max(n1 / dt.powf(gamma1));
                out[1] = out[1].max(n2 / dt.powf(2.0 * gamma1));
                out[2] = out[2].max(n3 / dt.powf(3.0 * gamma1));
            });
        }
        Ok(out)
    }

    /// Rough-path Hölder norm estimated over grid nodes in `[t_i0, t_i1]`:
    /// the max of the level-1 quotient, the square root of the level-2
    /// quotient and the cube root of the level-3 quotient. Empty interval
    /// gives 0.
    pub fn holder_norm(&self, gamma1: f64, i0: usize, i1: usize) -> Result<f64> {
        if gamma1 > self.gamma + 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "gamma1 {gamma1} exceeds grid gamma {}",
                self.gamma
            )));
        }
        let [h1, h2, h3] = self.holder_components(gamma1, i0, i1)?;
        Ok(h1.max(h2.sqrt()).max(h3.cbrt()))
    }

    /// Sub-grid on nodes `[s, e]` with times re-based to start at 0.
    pub fn window(&self, s: usize, e: usize) -> Result<RoughPathGrid> {
        self.check_nodes(s, e)?;
        if s == e {
            return Err(Error::InvalidArgument("empty window".into()));
        }
        let t0 = self.times[s];
        Ok(RoughPathGrid {
            times: self.times[s..=e].iter().map(|t| t - t0).collect(),
            steps: self.steps[s..e].to_vec(),
            spatial: self.spatial[s..e].to_vec(),
            gamma: self.gamma,
            meta: self.meta.clone(),
            orientation: self.orientation,
        })
    }

    /// The driver seen from node `s`: `X_{s, s+·}` re-based to time 0.
    pub fn shift_window(&self, s: usize) -> Result<RoughPathGrid> {
        if s == self.len() {
            return Err(Error::InvalidArgument("shift leaves an empty grid".into()));
        }
        self.window(s, self.len())
    }

    /// Time-reversed driver on `[0, t_{t0}]`: `X̃_t = X_{t0 − t}` with
    /// negated higher levels, steps in reverse order.
    pub fn reverse_driver(&self, t0: usize) -> Result<RoughPathGrid> {
        self.check_nodes(0, t0)?;
        if t0 == 0 {
            return Err(Error::InvalidArgument("reversal over an empty interval".into()));
        }
        let end = self.times[t0];
        let times = (0..=t0).map(|k| end - self.times[t0 - k]).collect();
        let steps = self.steps[..t0].iter().rev().map(|g| g.reverse_element()).collect();
        let spatial = self.spatial[..t0].iter().rev().map(|g| g.reverse_element()).collect();
        let orientation = match self.orientation {
            Orientation::Forward => Orientation::Reversed,
            Orientation::Reversed => Orientation::Forward,
        };
        Ok(RoughPathGrid {
            times,
            steps,
            spatial,
            gamma: self.gamma,
            meta: self.meta.clone(),
            orientation,
        })
    }

    /// Coarser grid on the given increasing node subset (must start at 0
    /// and end at N); each new step is the fold of the covered steps.
    pub fn coarsen(&self, nodes: &[usize]) -> Result<RoughPathGrid> {
        if nodes.len() < 2 || nodes[0] != 0 || *nodes.last().unwrap() != self.len() {
            return Err(Error::InvalidArgument(
                "coarsening nodes must start at 0 and end at N".into(),
            ));
        }
        let mut times = Vec::with_capacity(nodes.len());
        let mut steps = Vec::with_capacity(nodes.len() - 1);
        times.push(self.times[0]);
        for w in nodes.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidArgument("coarsening nodes must increase".into()));
            }
            steps.push(self.spacetime_sig(w[0], w[1])?);
            times.push(self.times[w[1]]);
        }
        Self::from_spacetime_steps(times, steps, self.gamma, self.meta.clone(), self.orientation)
    }

    /// Same grid with a different Hölder exponent.
    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        if !(gamma > 0.25 && gamma <= 1.0) {
            return Err(Error::InvalidArgument(format!("gamma {gamma} outside (1/4, 1]")));
        }
        self.gamma = gamma;
        Ok(self)
    }

    /// Index of the node at time `t`, if `t` is (up to 1e-12 relative) a node.
    pub fn node_at(&self, t: f64) -> Option<usize> {
        let tol = 1e-12 * self.horizon().max(1.0);
        let idx = self.times.partition_point(|&x| x < t - tol);
        (idx < self.times.len() && (self.times[idx] - t).abs() <= tol).then_some(idx)
    }
}

pub fn uniform_times(horizon: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|k| horizon * k as f64 / n as f64).collect()
}
