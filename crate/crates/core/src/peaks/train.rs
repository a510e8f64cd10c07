//! Mini-batch SGD with momentum for the reference regressor.
//!
//! Training runs in f64 on master weights; the returned weights are the
//! f32 rounding of the best-validation epoch.

use serde::{Deserialize, Serialize};

use super::net::{
    forward_cached, Activations, C1, C1B, C1W, C2, C2B, C2W, F1B, F1W, F2B, F2W, FLAT, HIDDEN, S1, S2,
};
use super::rng::XorShift64Star;
use super::{PeakError, PeakPatch, TinyNetWeights, PARAM_COUNT, PATCH_PIXELS, PATCH_SIZE};

const MOMENTUM: f64 = 0.9;
const OUTPUT_SCALE: f64 = PATCH_SIZE as f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 500, batch_size: 512, learning_rate: 1e-3, patience: 10, validation_fraction: 0.1, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PeakError> {
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(PeakError::InvalidParams("epochs, batch_size and patience must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(PeakError::InvalidParams("learning_rate must be finite and non-negative".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(PeakError::InvalidParams("validation_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mean_error: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: TinyNetWeights,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn best(&self) -> &EpochLog {
        &self.log[self.best_epoch - 1]
    }
}

fn accumulate_gradient(w: &[f64], a: &Activations<f64>, dout: [f64; 2], grad: &mut [f64]) {
    let mut dz = [0.0; 2];
    for k in 0..2 {
        dz[k] = dout[k] * OUTPUT_SCALE * a.sig[k] * (1.0 - a.sig[k]);
    }

    let mut dpre3 = [0.0; HIDDEN];
    for k in 0..2 {
        grad[F2B + k] += dz[k];
        for h in 0..HIDDEN {
            grad[F2W + k * HIDDEN + h] += dz[k] * a.pre3[h].max(0.0);
            dpre3[h] += dz[k] * w[F2W + k * HIDDEN + h];
        }
    }
    for (h, d) in dpre3.iter_mut().enumerate() {
        if a.pre3[h] <= 0.0 {
            *d = 0.0;
        }
    }

    let mut dpre2 = vec![0.0; FLAT];
    for h in 0..HIDDEN {
        let d = dpre3[h];
        if d == 0.0 {
            continue;
        }
        grad[F1B + h] += d;
        let row = F1W + h * FLAT;
        for f in 0..FLAT {
            grad[row + f] += d * a.pre2[f].max(0.0);
            dpre2[f] += d * w[row + f];
        }
    }
    for (f, d) in dpre2.iter_mut().enumerate() {
        if a.pre2[f] <= 0.0 {
            *d = 0.0;
        }
    }

    let mut dact1 = vec![0.0; C1 * S1 * S1];
    for o in 0..C2 {
        for y in 0..S2 {
            for x in 0..S2 {
                let g = dpre2[(o * S2 + y) * S2 + x];
                if g == 0.0 {
                    continue;
                }
                grad[C2B + o] += g;
                for c in 0..C1 {
                    let k = C2W + (o * C1 + c) * 9;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let idx = (c * S1 + y + ky) * S1 + x + kx;
                            grad[k + ky * 3 + kx] += g * a.pre1[idx].max(0.0);
                            dact1[idx] += g * w[k + ky * 3 + kx];
                        }
                    }
                }
            }
        }
    }

    for c in 0..C1 {
        for y in 0..S1 {
            for x in 0..S1 {
                let idx = (c * S1 + y) * S1 + x;
                if a.pre1[idx] <= 0.0 {
                    continue;
                }
                let g = dact1[idx];
                grad[C1B + c] += g;
                for ky in 0..3 {
                    for kx in 0..3 {
                        grad[C1W + c * 9 + ky * 3 + kx] += g * a.input[(y + ky) * PATCH_SIZE + x + kx];
                    }
                }
            }
        }
    }
}

/// Mean squared Euclidean distance over the batch and its gradient with
/// respect to every parameter.
pub fn loss_and_gradient(params: &[f64], patches: &[&[f32; PATCH_PIXELS]], truths: &[[f64; 2]]) -> (f64, Vec<f64>) {
    assert_eq!(params.len(), PARAM_COUNT);
    assert_eq!(patches.len(), truths.len());
    let scale = 1.0 / patches.len() as f64;
    let mut grad = vec![0.0; PARAM_COUNT];
    let mut loss = 0.0;
    for (patch, t) in patches.iter().zip(truths) {
        let a = forward_cached::<f64>(params, patch);
        let o = a.output();
        let r = [o[0] - t[0], o[1] - t[1]];
        loss += r[0] * r[0] + r[1] * r[1];
        accumulate_gradient(params, &a, [2.0 * r[0] * scale, 2.0 * r[1] * scale], &mut grad);
    }
    (loss * scale, grad)
}

fn loss_only(params: &[f64], patch: &[f32; PATCH_PIXELS], t: [f64; 2]) -> f64 {
    let o = forward_cached::<f64>(params, patch).output();
    (o[0] - t[0]).powi(2) + (o[1] - t[1]).powi(2)
}

/// Returns (mean squared distance, mean Euclidean distance).
fn evaluate(params: &[f64], patches: &[&[f32; PATCH_PIXELS]], truths: &[[f64; 2]]) -> (f64, f64) {
    let (mut sq, mut dist) = (0.0, 0.0);
    for (p, t) in patches.iter().zip(truths) {
        let o = forward_cached::<f64>(params, p).output();
        let d2 = (o[0] - t[0]).powi(2) + (o[1] - t[1]).powi(2);
        sq += d2;
        dist += d2.sqrt();
    }
    let n = patches.len() as f64;
    (sq / n, dist / n)
}

pub fn train_tiny(dataset: &[PeakPatch], config: &TrainConfig) -> Result<TrainOutcome, PeakError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(PeakError::Empty("training requires at least one patch".into()));
    }
    let mut truths = Vec::with_capacity(dataset.len());
    for (k, p) in dataset.iter().enumerate() {
        p.check_finite()?;
        let t = p.truth.ok_or_else(|| PeakError::InvalidParams(format!("patch {k} has no truth")))?;
        truths.push([t.x, t.y]);
    }
    let n_val = ((dataset.len() as f64 * config.validation_fraction).round() as usize).max(1);
    if n_val >= dataset.len() {
        return Err(PeakError::Empty("validation split leaves no training patches".into()));
    }

    let mut rng = XorShift64Star::new(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    rng.shuffle(&mut order);
    let (val_idx, train_idx) = order.split_at(n_val);
    let val_patches: Vec<&[f32; PATCH_PIXELS]> = val_idx.iter().map(|&i| &dataset[i].intensities).collect();
    let val_truths: Vec<[f64; 2]> = val_idx.iter().map(|&i| truths[i]).collect();
    let mut train_idx = train_idx.to_vec();

    let init = TinyNetWeights::glorot(rng.next_u64());
    let mut params: Vec<f64> = init.params().iter().map(|&v| v as f64).collect();
    let mut velocity = vec![0.0; PARAM_COUNT];
    let mut best: Option<(f64, usize, Vec<f32>)> = None;
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=config.epochs {
        rng.shuffle(&mut train_idx);
        let mut epoch_loss = 0.0;
        for chunk in train_idx.chunks(config.batch_size) {
            let patches: Vec<&[f32; PATCH_PIXELS]> = chunk.iter().map(|&i| &dataset[i].intensities).collect();
            let ts: Vec<[f64; 2]> = chunk.iter().map(|&i| truths[i]).collect();
            let (loss, grad) = loss_and_gradient(&params, &patches, &ts);
            epoch_loss += loss * chunk.len() as f64;
            for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = MOMENTUM * *v + g;
                *p -= config.learning_rate * *v;
            }
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(PeakError::InvalidParams(format!("training diverged in epoch {epoch}")));
        }

        let rounded: Vec<f32> = params.iter().map(|&v| v as f32).collect();
        let widened: Vec<f64> = rounded.iter().map(|&v| v as f64).collect();
        let (val_loss, val_mean_error) = evaluate(&widened, &val_patches, &val_truths);
        log.push(EpochLog { epoch, train_loss: epoch_loss / train_idx.len() as f64, val_loss, val_mean_error });

        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, rounded));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stopped_early = epoch < config.epochs;
                break;
            }
        }
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { weights: TinyNetWeights::new(best_params)?, log, best_epoch, stopped_early })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub probes: usize,
    pub max_relative_error: f64,
    pub failures: usize,
}

/// Compares analytic gradients with central differences of the loss on
/// random (weights, patch, parameter) probes.
///
/// Relative error is `|a - n| / max(|a|, |n|)`; when both are below 1e-8
/// the absolute difference is used instead.
pub fn gradient_check(seed: u64, probes: usize, tolerance: f64) -> GradientCheck {
    let mut rng = XorShift64Star::new(seed);
    let dist = super::ParamDistribution::default();
    let h = 1e-6;
    let mut max_rel: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..probes {
        // Nonzero biases keep pre-activations off the ReLU kink.
        let mut params: Vec<f64> = TinyNetWeights::glorot(rng.next_u64()).params().iter().map(|&v| v as f64).collect();
        for (offset, count) in [(C1B, C1), (C2B, C2), (F1B, HIDDEN), (F2B, 2)] {
            for p in &mut params[offset..offset + count] {
                *p = rng.uniform(-0.1, 0.1);
            }
        }
        let patch = super::render_patch(&dist.sample(&mut rng)).expect("sampled parameters are valid");
        let t = [rng.uniform(2.0, 9.0), rng.uniform(2.0, 9.0)];
        let k = rng.below(PARAM_COUNT);

        let (_, grad) = loss_and_gradient(&params, &[&patch.intensities], &[t]);
        let analytic = grad[k];
        let orig = params[k];
        params[k] = orig + h;
        let up = loss_only(&params, &patch.intensities, t);
        params[k] = orig - h;
        let down = loss_only(&params, &patch.intensities, t);
        let numeric = (up - down) / (2.0 * h);

        let scale = analytic.abs().max(numeric.abs());
        let err = if scale < 1e-8 { (analytic - numeric).abs() } else { (analytic - numeric).abs() / scale };
        max_rel = max_rel.max(err);
        if err > tolerance {
            failures += 1;
        }
    }
    GradientCheck { probes, max_relative_error: max_rel, failures }
}

#[cfg(test)]
mod tests {
    use super::super::{synth_dataset, ParamDistribution};
    use super::*;

    #[test]
    fn gradients_match_finite_differences() {
        let report = gradient_check(17, 40, 1e-4);
        assert_eq!(report.failures, 0, "{report:?}");
    }

    #[test]
    fn config_guards() {
        let data = synth_dataset(10, &ParamDistribution::default(), 1).unwrap();
        for bad in [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { patience: 0, ..Default::default() },
            TrainConfig { validation_fraction: 1.0, ..Default::default() },
        ] {
            assert!(train_tiny(&data, &bad).is_err());
        }
        assert!(train_tiny(&[], &TrainConfig::default()).is_err());
        let mut no_truth = data.clone();
        no_truth[3].truth = None;
        assert!(train_tiny(&no_truth, &TrainConfig { epochs: 1, ..Default::default() }).is_err());
    }

    #[test]
    fn plateau_stops_after_second_epoch() {
        let data = synth_dataset(40, &ParamDistribution::default(), 2).unwrap();
        let cfg = TrainConfig { epochs: 10, batch_size: 8, learning_rate: 0.0, patience: 1, validation_fraction: 0.25, seed: 1 };
        let out = train_tiny(&data, &cfg).unwrap();
        assert_eq!(out.log.len(), 2);
        assert!(out.stopped_early);
        assert_eq!(out.best_epoch, 1);
    }

    #[test]
    fn same_seed_same_weights() {
        let data = synth_dataset(60, &ParamDistribution::default(), 3).unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 16, learning_rate: 0.01, patience: 5, validation_fraction: 0.2, seed: 4 };
        let a = train_tiny(&data, &cfg).unwrap();
        let b = train_tiny(&data, &cfg).unwrap();
        assert_eq!(a.weights, b.weights);
        let c = train_tiny(&data, &TrainConfig { seed: 5, ..cfg }).unwrap();
        assert_ne!(a.weights, c.weights);
    }
}
