//! Reference scientific workload: 11×11 Bragg-peak patches, two classical
//! localizers, and a small convolutional regressor packaged as a servable.
//!
//! Pixel `(i, j)` (column `i`, row `j`) covers `[i, i+1) × [j, j+1)` and
//! has its center at `(i + 0.5, j + 0.5)`. Intensities are stored row-major,
//! so the value at `(i, j)` is `intensities[j * 11 + i]`.

mod dataset;
mod localize;
mod net;
mod rng;
mod servable;
mod synth;
mod train;

use serde::{Deserialize, Serialize};

use crate::metadata::{Dim, ElementType, IoSignature};

pub use dataset::{
    patches_from_tensor, patches_to_tensor, positions_from_tensor, positions_to_tensor, read_patches, read_patch_count,
    write_patches, DATASET_MAGIC,
};
pub use localize::{centroid_locate, gaussian_fit_locate, GaussianFit};
pub use net::{arch_fingerprint, forward_raw, nn_forward, nn_forward_f32, Precision, TinyNetWeights, ARCHITECTURE, PARAM_COUNT};
pub use rng::{splitmix64, XorShift64Star};
pub use servable::{export_servable, RUNNER_KIND, WEIGHTS_FILE};
pub use synth::{
    render_patch, synth_dataset, synth_partitions, ParamDistribution, PartitionSizes, Partitions, SynthParams,
    REFERENCE_PARTITION,
};
pub use train::{gradient_check, loss_and_gradient, train_tiny, EpochLog, GradientCheck, TrainConfig, TrainOutcome};

pub const PATCH_SIZE: usize = 11;
pub const PATCH_PIXELS: usize = PATCH_SIZE * PATCH_SIZE;
pub const PIXEL_PITCH_UM: f64 = 200.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PeakError {
    #[error("degenerate patch: {0}")]
    Degenerate(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("weights version mismatch: {0}")]
    Version(String),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error("empty input: {0}")]
    Empty(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakPosition {
    pub x: f64,
    pub y: f64,
}

impl PeakPosition {
    pub fn new(x: f64, y: f64) -> Self {
        PeakPosition { x, y }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeakPatch {
    pub intensities: [f32; PATCH_PIXELS],
    pub pixel_pitch_um: f64,
    pub truth: Option<PeakPosition>,
}

impl PeakPatch {
    pub fn new(intensities: [f32; PATCH_PIXELS]) -> Self {
        PeakPatch { intensities, pixel_pitch_um: PIXEL_PITCH_UM, truth: None }
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.intensities[j * PATCH_SIZE + i]
    }

    pub fn check_finite(&self) -> Result<(), PeakError> {
        match self.intensities.iter().position(|v| !v.is_finite()) {
            Some(k) => Err(PeakError::Degenerate(format!("pixel {k} is not finite"))),
            None => Ok(()),
        }
    }
}

/// Input signature of the reference regressor: `[batch, 1, 11, 11]` float32.
pub fn input_signature() -> IoSignature {
    IoSignature::new(
        ElementType::Float32,
        vec![Dim::Variable, Dim::Fixed(1), Dim::Fixed(PATCH_SIZE as u64), Dim::Fixed(PATCH_SIZE as u64)],
        "intensity patch",
    )
}

/// Output signature: `[batch, 2]` float32 sub-pixel (x, y) in pixel units.
pub fn output_signature() -> IoSignature {
    IoSignature::new(ElementType::Float32, vec![Dim::Variable, Dim::Fixed(2)], "peak position")
}
