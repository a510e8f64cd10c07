use serde::{Deserialize, Serialize};

use super::rng::XorShift64Star;
use super::{PeakError, PeakPatch, PeakPosition, PATCH_PIXELS, PATCH_SIZE};

/// Parameters of one synthetic peak.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub center: (f64, f64),
    pub amplitude: f64,
    pub sigma: (f64, f64),
    pub background: f64,
    /// Noise standard deviation as a fraction of `amplitude`.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthParams {
    pub fn validate(&self) -> Result<(), PeakError> {
        let (cx, cy) = self.center;
        let (sx, sy) = self.sigma;
        let all = [cx, cy, self.amplitude, sx, sy, self.background, self.noise_sigma];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(PeakError::InvalidParams("all parameters must be finite".into()));
        }
        if self.amplitude <= 0.0 {
            return Err(PeakError::InvalidParams(format!("amplitude {} must be positive", self.amplitude)));
        }
        if !(0.5..=3.0).contains(&sx) || !(0.5..=3.0).contains(&sy) {
            return Err(PeakError::InvalidParams(format!("widths ({sx}, {sy}) must lie in [0.5, 3]")));
        }
        if !(2.0..=9.0).contains(&cx) || !(2.0..=9.0).contains(&cy) {
            return Err(PeakError::InvalidParams(format!("center ({cx}, {cy}) must lie in [2, 9]²")));
        }
        if self.noise_sigma < 0.0 {
            return Err(PeakError::InvalidParams("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// background + A·exp(−((x−cx)²/2σx² + (y−cy)²/2σy²)) at pixel centers,
/// plus N(0, (noise_sigma·A)²) per pixel in row-major order.
pub fn render_patch(params: &SynthParams) -> Result<PeakPatch, PeakError> {
    params.validate()?;
    let (cx, cy) = params.center;
    let (sx, sy) = params.sigma;
    let mut rng = XorShift64Star::new(params.seed);
    let mut intensities = [0f32; PATCH_PIXELS];
    for j in 0..PATCH_SIZE {
        for i in 0..PATCH_SIZE {
            let dx = i as f64 + 0.5 - cx;
            let dy = j as f64 + 0.5 - cy;
            let mut v = params.background
                + params.amplitude * (-(dx * dx / (2.0 * sx * sx) + dy * dy / (2.0 * sy * sy))).exp();
            if params.noise_sigma > 0.0 {
                v += params.noise_sigma * params.amplitude * rng.normal();
            }
            intensities[j * PATCH_SIZE + i] = v as f32;
        }
    }
    Ok(PeakPatch { truth: Some(PeakPosition::new(cx, cy)), ..PeakPatch::new(intensities) })
}

/// Ranges the dataset generator draws peak parameters from, uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamDistribution {
    pub center_range: (f64, f64),
    pub amplitude_range: (f64, f64),
    pub sigma_range: (f64, f64),
    pub background_range: (f64, f64),
    pub noise_sigma: f64,
}

impl Default for ParamDistribution {
    fn default() -> Self {
        ParamDistribution {
            center_range: (2.0, 9.0),
            amplitude_range: (100.0, 1000.0),
            sigma_range: (0.6, 1.6),
            background_range: (0.0, 20.0),
            noise_sigma: 0.02,
        }
    }
}

impl ParamDistribution {
    pub fn with_noise(noise_sigma: f64) -> Self {
        ParamDistribution { noise_sigma, ..Default::default() }
    }

    /// Draws one parameter set, including the per-patch noise seed.
    pub fn sample(&self, rng: &mut XorShift64Star) -> SynthParams {
        let mut draw = |(lo, hi): (f64, f64)| rng.uniform(lo, hi);
        let cx = draw(self.center_range);
        let cy = draw(self.center_range);
        let amplitude = draw(self.amplitude_range);
        let sx = draw(self.sigma_range);
        let sy = draw(self.sigma_range);
        let background = draw(self.background_range);
        SynthParams {
            center: (cx, cy),
            amplitude,
            sigma: (sx, sy),
            background,
            noise_sigma: self.noise_sigma,
            seed: rng.next_u64(),
        }
    }
}

pub fn synth_dataset(n: usize, dist: &ParamDistribution, seed: u64) -> Result<Vec<PeakPatch>, PeakError> {
    if n == 0 {
        return Err(PeakError::Empty("at least one patch is required".into()));
    }
    let mut rng = XorShift64Star::new(seed);
    (0..n).map(|_| render_patch(&dist.sample(&mut rng))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

/// Train / validation / test sizes of the reference gold-sample partition.
pub const REFERENCE_PARTITION: PartitionSizes = PartitionSizes { train: 55478, validation: 6000, test: 7869 };

#[derive(Debug, Clone)]
pub struct Partitions {
    pub train: Vec<PeakPatch>,
    pub validation: Vec<PeakPatch>,
    pub test: Vec<PeakPatch>,
}

/// Three independent synthetic sets; partition `k` is seeded with
/// `splitmix64(seed + k)`.
pub fn synth_partitions(sizes: PartitionSizes, dist: &ParamDistribution, seed: u64) -> Result<Partitions, PeakError> {
    let part = |n, k: u64| synth_dataset(n, dist, super::splitmix64(seed.wrapping_add(k)));
    Ok(Partitions { train: part(sizes.train, 0)?, validation: part(sizes.validation, 1)?, test: part(sizes.test, 2)? })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(center: (f64, f64), sigma: (f64, f64), noise: f64) -> SynthParams {
        SynthParams { center, amplitude: 100.0, sigma, background: 5.0, noise_sigma: noise, seed: 1 }
    }

    #[test]
    fn same_seed_same_bytes() {
        let d = ParamDistribution::default();
        let a = synth_dataset(50, &d, 99).unwrap();
        let b = synth_dataset(50, &d, 99).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_dataset(50, &d, 100).unwrap());
    }

    #[test]
    fn noiseless_peak_is_rotation_symmetric() {
        // Rotating by 90° about (5, 5) maps pixel center (i+.5, j+.5) to
        // the center of pixel (9 - j, i); compare where both are on the grid.
        let p = render_patch(&params((5.0, 5.0), (1.0, 1.0), 0.0)).unwrap();
        for j in 0..10 {
            for i in 0..10 {
                assert_eq!(p.at(i, j), p.at(9 - j, i), "({i},{j})");
            }
        }
    }

    #[test]
    fn parameter_guards() {
        assert!(render_patch(&params((1.0, 5.0), (1.0, 1.0), 0.0)).is_err());
        assert!(render_patch(&params((5.0, 5.0), (0.4, 1.0), 0.0)).is_err());
        assert!(render_patch(&params((5.0, 5.0), (1.0, 1.0), -0.1)).is_err());
        let mut p = params((5.0, 5.0), (1.0, 1.0), 0.0);
        p.amplitude = 0.0;
        assert!(render_patch(&p).is_err());
        assert!(synth_dataset(0, &ParamDistribution::default(), 1).is_err());
    }

    #[test]
    fn truths_are_interior() {
        for p in synth_dataset(200, &ParamDistribution::default(), 5).unwrap() {
            let t = p.truth.unwrap();
            assert!((2.0..=9.0).contains(&t.x) && (2.0..=9.0).contains(&t.y));
        }
    }

    #[test]
    fn reference_partition_sizes() {
        assert_eq!(REFERENCE_PARTITION.train, 55478);
        assert_eq!(REFERENCE_PARTITION.validation, 6000);
        assert_eq!(REFERENCE_PARTITION.test, 7869);
        let small = PartitionSizes { train: 8, validation: 3, test: 2 };
        let parts = synth_partitions(small, &ParamDistribution::default(), 11).unwrap();
        assert_eq!((parts.train.len(), parts.validation.len(), parts.test.len()), (8, 3, 2));
        assert_ne!(parts.train[0], parts.validation[0]);
    }
}
