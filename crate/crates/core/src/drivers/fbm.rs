//! Exact fBm increments by circulant embedding (Davies–Harte / Wood–Chan).

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::grid::{DriverKind, DriverMeta, RoughPathGrid};
use crate::error::{Error, Result};

/// One realization `ω` of the noise together with a shift `θ_s`.
///
/// The generator is ChaCha20 seeded with `seed`; coordinate pairs use
/// separate ChaCha streams. `shift` counts fine sample steps: the window
/// starts `shift` increments into the sampled sequence, so the same seed
/// with shift `s` sees the increments of shift `0` from index `s` on (as
/// long as both fit in the same power-of-two sample length).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomScenario {
    pub seed: u64,
    #[serde(default)]
    pub shift: usize,
}

impl RandomScenario {
    pub fn new(seed: u64) -> Self {
        Self { seed, shift: 0 }
    }

    pub fn shifted(self, shift: usize) -> Self {
        Self { shift, ..self }
    }
}

/// Autocovariance of unit-step fractional Gaussian noise at lag `k`.
pub fn fgn_autocovariance(hurst: f64, k: usize) -> f64 {
    let k = k as f64;
    let e = 2.0 * hurst;
    0.5 * ((k + 1.0).powf(e) - 2.0 * k.powf(e) + (k - 1.0).abs().powf(e))
}

/// Square roots of the scaled circulant eigenvalues for `m` fGn samples.
fn circulant_weights(hurst: f64, m: usize) -> Result<Vec<f64>> {
    let size = 2 * m;
    let mut row: Vec<Complex64> = (0..size)
        .map(|j| {
            let lag = if j <= m { j } else { size - j };
            Complex64::new(fgn_autocovariance(hurst, lag), 0.0)
        })
        .collect();
    let fft = FftPlanner::new().plan_fft_forward(size);
    fft.process(&mut row);
    let max = row.iter().map(|z| z.re).fold(0.0, f64::max);
    let min = row.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
    if min < -1e-10 * max.max(1.0) {
        return Err(Error::NonPsdEmbedding { min_eigenvalue: min });
    }
    Ok(row.iter().map(|z| (z.re.max(0.0) / size as f64).sqrt()).collect())
}

struct Sampler {
    weights: Vec<f64>,
    fft: Arc<dyn rustfft::Fft<f64>>,
    m: usize,
}

impl Sampler {
    fn new(hurst: f64, m: usize) -> Result<Self> {
        let weights = circulant_weights(hurst, m)?;
        let fft = FftPlanner::new().plan_fft_forward(2 * m);
        Ok(Self { weights, fft, m })
    }

    /// Two independent unit-step fGn sequences of length `m`.
    fn pair(&self, rng: &mut ChaCha20Rng) -> (Vec<f64>, Vec<f64>) {
        let mut buf: Vec<Complex64> = self
            .weights
            .iter()
            .map(|&w| {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                Complex64::new(w * re, w * im)
            })
            .collect();
        self.fft.process(&mut buf);
        let re = buf[..self.m].iter().map(|z| z.re).collect();
        let im = buf[..self.m].iter().map(|z| z.im).collect();
        (re, im)
    }
}

fn check_hurst(hurst: f64) -> Result<()> {
    if !(hurst > 0.25 && hurst <= 1.0) {
        return Err(Error::InvalidArgument(format!("Hurst index {hurst} outside (1/4, 1]")));
    }
    Ok(())
}

/// `n × d` matrix (row per step) of fBm increments on a uniform grid of
/// `[0, horizon]`, taken from the scenario's shifted window.
pub fn sample_fbm(
    hurst: f64,
    dim: usize,
    n: usize,
    horizon: f64,
    scenario: RandomScenario,
) -> Result<Vec<Vec<f64>>> {
    check_hurst(hurst)?;
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::InvalidArgument(format!("step count {n} is not a power of two")));
    }
    if dim == 0 {
        return Err(Error::InvalidArgument("dimension must be positive".into()));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidArgument(format!("horizon {horizon} must be positive")));
    }
    let m = (scenario.shift + n).next_power_of_two();
    let sampler = Sampler::new(hurst, m)?;
    let scale = (horizon / n as f64).powf(hurst);
    let mut out = vec![vec![0.0; dim]; n];
    let mut rng = ChaCha20Rng::seed_from_u64(scenario.seed);
    for pair in 0..dim.div_ceil(2) {
        rng.set_stream(pair as u64);
        rng.set_word_pos(0);
        let (re, im) = sampler.pair(&mut rng);
        for (k, row) in out.iter_mut().enumerate() {
            row[2 * pair] = scale * re[scenario.shift + k];
            if 2 * pair + 1 < dim {
                row[2 * pair + 1] = scale * im[scenario.shift + k];
            }
        }
    }
    Ok(out)
}

/// Default Hölder exponent for an fBm driver: `H − offset` clipped into
/// `[0.251, 0.5]`.
pub fn default_gamma(hurst: f64, offset: f64) -> f64 {
    (hurst - offset).clamp(0.251, 0.5)
}

/// Parameters of an fBm grid: `steps` grid intervals each lifted from
/// `refine` fine samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FbmSpec {
    pub hurst: f64,
    pub dim: usize,
    pub steps: usize,
    pub horizon: f64,
    pub refine: usize,
    pub gamma: Option<f64>,
}

impl FbmSpec {
    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or_else(|| default_gamma(self.hurst, 0.02))
    }
}

/// Samples fBm at `steps·refine` points, lifts the polyline and folds
/// every `refine` sub-steps into one grid step.
pub fn fbm_grid(spec: &FbmSpec, scenario: RandomScenario) -> Result<RoughPathGrid> {
    if spec.refine == 0 || !spec.refine.is_power_of_two() {
        return Err(Error::InvalidArgument("refine must be a power of two".into()));
    }
    let incs = sample_fbm(
        spec.hurst,
        spec.dim,
        spec.steps * spec.refine,
        spec.horizon,
        scenario,
    )?;
    let meta = DriverMeta {
        kind: DriverKind::Fbm,
        hurst: Some(spec.hurst),
        seed: Some(scenario.seed),
    };
    RoughPathGrid::lift_uniform(spec.horizon, &incs, spec.refine, spec.gamma(), meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn autocovariance_of_white_noise() {
        assert_eq!(fgn_autocovariance(0.5, 0), 1.0);
        assert!(fgn_autocovariance(0.5, 3).abs() < 1e-15);
        assert!((fgn_autocovariance(1.0, 5) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_per_scenario() {
        let a = sample_fbm(0.35, 3, 64, 1.0, RandomScenario::new(7)).unwrap();
        let b = sample_fbm(0.35, 3, 64, 1.0, RandomScenario::new(7)).unwrap();
        let c = sample_fbm(0.35, 3, 64, 1.0, RandomScenario::new(8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn shift_reads_later_increments() {
        let base = sample_fbm(0.4, 2, 64, 64.0, RandomScenario::new(3)).unwrap();
        let shifted = sample_fbm(0.4, 2, 32, 32.0, RandomScenario::new(3).shifted(32)).unwrap();
        assert_eq!(&base[32..], &shifted[..]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(sample_fbm(0.2, 1, 8, 1.0, RandomScenario::new(0)).is_err());
        assert!(sample_fbm(0.5, 1, 12, 1.0, RandomScenario::new(0)).is_err());
        assert!(sample_fbm(0.5, 0, 8, 1.0, RandomScenario::new(0)).is_err());
    }

    #[test]
    fn embedding_is_psd_across_range() {
        for h in [0.26, 0.35, 0.5, 0.75, 0.99, 1.0] {
            circulant_weights(h, 256).unwrap();
        }
    }

    #[test]
    fn default_gamma_clips() {
        assert_eq!(default_gamma(0.9, 0.02), 0.5);
        assert!((default_gamma(0.35, 0.02) - 0.33).abs() < 1e-15);
        assert_eq!(default_gamma(0.26, 0.02), 0.251);
    }

    #[test]
    fn fbm_grid_is_geometric() {
        let spec = FbmSpec {
            hurst: 0.35,
            dim: 2,
            steps: 32,
            horizon: 1.0,
            refine: 8,
            gamma: None,
        };
        let g = fbm_grid(&spec, RandomScenario::new(11)).unwrap();
        assert_eq!(g.len(), 32);
        assert!(g.max_shuffle_defect() < 1e-10);
        assert_eq!(g.meta().seed, Some(11));
    }
}
