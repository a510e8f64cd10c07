//! "BraggNN-lite": a fixed small regressor from an 11×11 patch to (x, y).
//!
//! conv 3×3 1→16, ReLU → conv 3×3 16→8, ReLU (valid padding, 11→9→7)
//! → flatten (8·7·7 = 392, channel-major) → dense 392→64, ReLU
//! → dense 64→2 → sigmoid × 11.
//!
//! Each patch is min-max normalized to [0, 1] before the first layer
//! (a constant patch maps to all zeros).

use std::ops::{Add, Div, Mul, Sub};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::rng::XorShift64Star;
use super::{PeakError, PeakPatch, PeakPosition, PATCH_PIXELS, PATCH_SIZE};

pub const ARCHITECTURE: &str =
    "braggnn-lite/v1:in1x11x11:minmax|conv3x3:1-16:relu|conv3x3:16-8:relu|flatten:392|dense:392-64:relu|dense:64-2|sigmoid*11";

pub(crate) const C1: usize = 16;
pub(crate) const C2: usize = 8;
pub(crate) const S1: usize = PATCH_SIZE - 2; // 9
pub(crate) const S2: usize = S1 - 2; // 7
pub(crate) const FLAT: usize = C2 * S2 * S2; // 392
pub(crate) const HIDDEN: usize = 64;

pub(crate) const C1W: usize = 0;
pub(crate) const C1B: usize = C1W + C1 * 9;
pub(crate) const C2W: usize = C1B + C1;
pub(crate) const C2B: usize = C2W + C2 * C1 * 9;
pub(crate) const F1W: usize = C2B + C2;
pub(crate) const F1B: usize = F1W + HIDDEN * FLAT;
pub(crate) const F2W: usize = F1B + HIDDEN;
pub(crate) const F2B: usize = F2W + 2 * HIDDEN;
pub const PARAM_COUNT: usize = F2B + 2;

const WEIGHTS_MAGIC: &[u8; 4] = b"TNW1";
const OUTPUT_SCALE: f64 = PATCH_SIZE as f64;
/// Largest f32 strictly below 11.
const OUTPUT_MAX: f32 = f32::from_bits(11f32.to_bits() - 1);

/// First 16 hex chars of sha256 over [`ARCHITECTURE`].
pub fn arch_fingerprint() -> &'static str {
    static FP: OnceLock<String> = OnceLock::new();
    FP.get_or_init(|| hex::encode(Sha256::digest(ARCHITECTURE.as_bytes()))[..16].to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Precision {
    /// Every operation in f32.
    #[default]
    #[serde(rename = "strict-f32")]
    StrictF32,
    /// Inputs and weights widened to f64, outputs rounded to f32.
    #[serde(rename = "f64-accumulate")]
    F64Accumulate,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::StrictF32 => "strict-f32",
            Precision::F64Accumulate => "f64-accumulate",
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "strict-f32" => Ok(Precision::StrictF32),
            "f64-accumulate" => Ok(Precision::F64Accumulate),
            other => Err(format!("unknown precision {other:?} (expected strict-f32 or f64-accumulate)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyNetWeights {
    fingerprint: String,
    params: Vec<f32>,
}

impl TinyNetWeights {
    pub fn new(params: Vec<f32>) -> Result<Self, PeakError> {
        if params.len() != PARAM_COUNT {
            return Err(PeakError::InvalidParams(format!("expected {PARAM_COUNT} parameters, got {}", params.len())));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(PeakError::InvalidParams("weights must be finite".into()));
        }
        Ok(TinyNetWeights { fingerprint: arch_fingerprint().to_string(), params })
    }

    pub fn zeros() -> Self {
        TinyNetWeights { fingerprint: arch_fingerprint().to_string(), params: vec![0.0; PARAM_COUNT] }
    }

    /// Uniform ±√(6 / (fan_in + fan_out)) weights, zero biases.
    pub fn glorot(seed: u64) -> Self {
        let mut rng = XorShift64Star::new(seed);
        let mut params = vec![0f32; PARAM_COUNT];
        let layers = [(C1W, C1 * 9, 9, C1 * 9), (C2W, C2 * C1 * 9, C1 * 9, C2 * 9), (F1W, HIDDEN * FLAT, FLAT, HIDDEN), (F2W, 2 * HIDDEN, HIDDEN, 2)];
        for (offset, count, fan_in, fan_out) in layers {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut params[offset..offset + count] {
                *p = rng.uniform(-limit, limit) as f32;
            }
        }
        TinyNetWeights { fingerprint: arch_fingerprint().to_string(), params }
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// `TNW1`, 16-byte ASCII fingerprint, u32 big-endian count, f32 little-endian values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 4 * self.params.len());
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(self.fingerprint.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_be_bytes());
        for v in &self.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PeakError> {
        if bytes.len() < 24 || &bytes[..4] != WEIGHTS_MAGIC {
            return Err(PeakError::Format("not a TNW1 weights file".into()));
        }
        let fingerprint = String::from_utf8_lossy(&bytes[4..20]).into_owned();
        if fingerprint != arch_fingerprint() {
            return Err(PeakError::Version(format!(
                "weights built for architecture {fingerprint}, this build is {}",
                arch_fingerprint()
            )));
        }
        let count = u32::from_be_bytes(bytes[20..24].try_into().expect("4 bytes")) as usize;
        if bytes.len() != 24 + 4 * count {
            return Err(PeakError::Format(format!("header declares {count} parameters, file is {} bytes", bytes.len())));
        }
        let params = bytes[24..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        TinyNetWeights::new(params)
    }

    fn check(&self) -> Result<(), PeakError> {
        if self.fingerprint != arch_fingerprint() {
            return Err(PeakError::Version(format!("fingerprint {} does not match {}", self.fingerprint, arch_fingerprint())));
        }
        if self.params.len() != PARAM_COUNT {
            return Err(PeakError::Version(format!("{} parameters for a {PARAM_COUNT}-parameter architecture", self.params.len())));
        }
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn with_fingerprint(mut self, fp: &str) -> Self {
        self.fingerprint = fp.to_string();
        self
    }
}

pub(crate) trait Real:
    Copy + PartialOrd + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self>
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f32(v: f32) -> Self {
        v
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
}

fn relu<T: Real>(v: T) -> T {
    if v > T::ZERO {
        v
    } else {
        T::ZERO
    }
}

/// Every intermediate of one forward pass, kept for backpropagation.
pub(crate) struct Activations<T> {
    pub input: [T; PATCH_PIXELS],
    pub pre1: Vec<T>,
    pub pre2: Vec<T>,
    pub pre3: [T; HIDDEN],
    pub sig: [T; 2],
}

impl<T: Real> Activations<T> {
    pub fn output(&self) -> [T; 2] {
        let scale = T::from_f64(OUTPUT_SCALE);
        [self.sig[0] * scale, self.sig[1] * scale]
    }
}

pub(crate) fn normalize<T: Real>(patch: &[f32; PATCH_PIXELS]) -> [T; PATCH_PIXELS] {
    let vals: [T; PATCH_PIXELS] = patch.map(T::from_f32);
    let mut lo = vals[0];
    let mut hi = vals[0];
    for &v in &vals[1..] {
        if v < lo {
            lo = v;
        }
        if v > hi {
            hi = v;
        }
    }
    let range = hi - lo;
    if !(range > T::ZERO) {
        return [T::ZERO; PATCH_PIXELS];
    }
    vals.map(|v| (v - lo) / range)
}

pub(crate) fn forward_cached<T: Real>(w: &[T], patch: &[f32; PATCH_PIXELS]) -> Activations<T> {
    let input = normalize::<T>(patch);

    let mut pre1 = vec![T::ZERO; C1 * S1 * S1];
    for c in 0..C1 {
        let k = &w[C1W + c * 9..C1W + c * 9 + 9];
        for y in 0..S1 {
            for x in 0..S1 {
                let mut s = w[C1B + c];
                for ky in 0..3 {
                    for kx in 0..3 {
                        s = s + k[ky * 3 + kx] * input[(y + ky) * PATCH_SIZE + x + kx];
                    }
                }
                pre1[(c * S1 + y) * S1 + x] = s;
            }
        }
    }
    let act1: Vec<T> = pre1.iter().map(|&v| relu(v)).collect();

    let mut pre2 = vec![T::ZERO; FLAT];
    for o in 0..C2 {
        for y in 0..S2 {
            for x in 0..S2 {
                let mut s = w[C2B + o];
                for c in 0..C1 {
                    let k = &w[C2W + (o * C1 + c) * 9..C2W + (o * C1 + c) * 9 + 9];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            s = s + k[ky * 3 + kx] * act1[(c * S1 + y + ky) * S1 + x + kx];
                        }
                    }
                }
                pre2[(o * S2 + y) * S2 + x] = s;
            }
        }
    }

    let mut pre3 = [T::ZERO; HIDDEN];
    for (h, out) in pre3.iter_mut().enumerate() {
        let row = &w[F1W + h * FLAT..F1W + (h + 1) * FLAT];
        let mut s = w[F1B + h];
        for (wv, &a) in row.iter().zip(&pre2) {
            s = s + *wv * relu(a);
        }
        *out = s;
    }

    let mut sig = [T::ZERO; 2];
    for (k, out) in sig.iter_mut().enumerate() {
        let row = &w[F2W + k * HIDDEN..F2W + (k + 1) * HIDDEN];
        let mut z = w[F2B + k];
        for (wv, &a) in row.iter().zip(&pre3) {
            z = z + *wv * relu(a);
        }
        *out = T::ONE / (T::ONE + (T::ZERO - z).exp());
    }

    Activations { input, pre1, pre2, pre3, sig }
}

fn finish<T: Real>(out: [T; 2]) -> [f32; 2] {
    out.map(|v| {
        let v = v.to_f64() as f32;
        if v.is_nan() {
            v
        } else {
            v.clamp(0.0, OUTPUT_MAX)
        }
    })
}

/// One patch through the network with raw parameters, no fingerprint check.
pub fn forward_raw(params: &[f32], patch: &[f32; PATCH_PIXELS], precision: Precision) -> [f32; 2] {
    match precision {
        Precision::StrictF32 => finish(forward_cached::<f32>(params, patch).output()),
        Precision::F64Accumulate => {
            let wide: Vec<f64> = params.iter().map(|&v| v as f64).collect();
            finish(forward_cached::<f64>(&wide, patch).output())
        }
    }
}

/// Batched inference; items are independent, so large batches are split
/// across threads without changing any output bit.
pub fn nn_forward_f32(
    weights: &TinyNetWeights,
    patches: &[[f32; PATCH_PIXELS]],
    precision: Precision,
) -> Result<Vec<[f32; 2]>, PeakError> {
    weights.check()?;
    if patches.is_empty() {
        return Err(PeakError::Empty("batch must contain at least one patch".into()));
    }
    let wide: Vec<f64> = match precision {
        Precision::F64Accumulate => weights.params.iter().map(|&v| v as f64).collect(),
        Precision::StrictF32 => Vec::new(),
    };
    let one = |p: &[f32; PATCH_PIXELS]| match precision {
        Precision::StrictF32 => finish(forward_cached::<f32>(&weights.params, p).output()),
        Precision::F64Accumulate => finish(forward_cached::<f64>(&wide, p).output()),
    };
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(16);
    if patches.len() < 256 || threads == 1 {
        return Ok(patches.iter().map(one).collect());
    }
    let chunk = patches.len().div_ceil(threads);
    let mut out = vec![[0f32; 2]; patches.len()];
    std::thread::scope(|s| {
        for (src, dst) in patches.chunks(chunk).zip(out.chunks_mut(chunk)) {
            s.spawn(move || {
                for (p, o) in src.iter().zip(dst.iter_mut()) {
                    *o = one(p);
                }
            });
        }
    });
    Ok(out)
}

pub fn nn_forward(weights: &TinyNetWeights, batch: &[PeakPatch], precision: Precision) -> Result<Vec<PeakPosition>, PeakError> {
    let raw: Vec<[f32; PATCH_PIXELS]> = batch.iter().map(|p| p.intensities).collect();
    Ok(nn_forward_f32(weights, &raw, precision)?
        .into_iter()
        .map(|[x, y]| PeakPosition::new(x as f64, y as f64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::super::{synth_dataset, ParamDistribution};
    use super::*;

    #[test]
    fn parameter_count() {
        assert_eq!(PARAM_COUNT, 26602);
        assert_eq!(arch_fingerprint().len(), 16);
    }

    #[test]
    fn zero_weights_give_patch_center() {
        let patches = synth_dataset(5, &ParamDistribution::default(), 1).unwrap();
        for prec in [Precision::StrictF32, Precision::F64Accumulate] {
            for p in nn_forward(&TinyNetWeights::zeros(), &patches, prec).unwrap() {
                assert_eq!((p.x, p.y), (5.5, 5.5));
            }
        }
    }

    #[test]
    fn permuted_batch_permutes_outputs() {
        let w = TinyNetWeights::glorot(3);
        let patches = synth_dataset(300, &ParamDistribution::default(), 2).unwrap();
        let out = nn_forward(&w, &patches, Precision::StrictF32).unwrap();
        let mut idx: Vec<usize> = (0..patches.len()).collect();
        XorShift64Star::new(9).shuffle(&mut idx);
        let permuted: Vec<PeakPatch> = idx.iter().map(|&i| patches[i].clone()).collect();
        let out2 = nn_forward(&w, &permuted, Precision::StrictF32).unwrap();
        for (k, &i) in idx.iter().enumerate() {
            assert_eq!(out2[k].x.to_bits(), out[i].x.to_bits());
            assert_eq!(out2[k].y.to_bits(), out[i].y.to_bits());
        }
    }

    #[test]
    fn outputs_in_bounds_and_profiles_agree() {
        let w = TinyNetWeights::glorot(5);
        let patches = synth_dataset(64, &ParamDistribution::default(), 3).unwrap();
        let a = nn_forward(&w, &patches, Precision::StrictF32).unwrap();
        let b = nn_forward(&w, &patches, Precision::F64Accumulate).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((0.0..11.0).contains(&p.x) && (0.0..11.0).contains(&p.y));
            assert!((p.x - q.x).abs() < 1e-5 && (p.y - q.y).abs() < 1e-5);
        }
    }

    #[test]
    fn weights_file_round_trip_and_version_guard() {
        let w = TinyNetWeights::glorot(8);
        let bytes = w.to_bytes();
        assert_eq!(bytes.len(), 24 + 4 * PARAM_COUNT);
        assert_eq!(TinyNetWeights::from_bytes(&bytes).unwrap(), w);

        let mut bad = bytes.clone();
        bad[4] ^= 1;
        assert!(matches!(TinyNetWeights::from_bytes(&bad), Err(PeakError::Version(_))));

        let stale = w.clone().with_fingerprint("0000000000000000");
        let patches = synth_dataset(1, &ParamDistribution::default(), 1).unwrap();
        assert!(matches!(nn_forward(&stale, &patches, Precision::StrictF32), Err(PeakError::Version(_))));
        assert!(matches!(nn_forward(&w, &[], Precision::StrictF32), Err(PeakError::Empty(_))));
        assert!(TinyNetWeights::new(vec![0.0; 10]).is_err());
    }

    #[test]
    fn constant_patch_normalizes_to_zero() {
        let z: [f64; PATCH_PIXELS] = normalize(&[4.0; PATCH_PIXELS]);
        assert!(z.iter().all(|&v| v == 0.0));
    }
}
