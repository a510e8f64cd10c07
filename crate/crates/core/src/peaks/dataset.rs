//! `BPK1` patch files and raw tensor conversions.
//!
//! File layout: magic `BPK1`, record count as u32 big-endian, then per
//! record 121 little-endian f32 intensities followed by the truth (x, y) as
//! two little-endian f32, NaN when absent.

use super::{PeakError, PeakPatch, PeakPosition, PATCH_PIXELS};

pub const DATASET_MAGIC: &[u8; 4] = b"BPK1";
const RECORD_BYTES: usize = (PATCH_PIXELS + 2) * 4;

pub fn write_patches(patches: &[PeakPatch]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + patches.len() * RECORD_BYTES);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(patches.len() as u32).to_be_bytes());
    for p in patches {
        for v in p.intensities {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let (x, y) = p.truth.map_or((f32::NAN, f32::NAN), |t| (t.x as f32, t.y as f32));
        out.extend_from_slice(&x.to_le_bytes());
        out.extend_from_slice(&y.to_le_bytes());
    }
    out
}

/// Record count from the header, checking the file length.
pub fn read_patch_count(bytes: &[u8]) -> Result<usize, PeakError> {
    if bytes.len() < 8 || &bytes[..4] != DATASET_MAGIC {
        return Err(PeakError::Format("missing BPK1 header".into()));
    }
    let count = u32::from_be_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let expected = 8 + count * RECORD_BYTES;
    if bytes.len() != expected {
        return Err(PeakError::Format(format!("{count} records need {expected} bytes, file has {}", bytes.len())));
    }
    Ok(count)
}

/// Reads records `start..start + count`, or all of them when `range` is `None`.
pub fn read_patches(bytes: &[u8], range: Option<(usize, usize)>) -> Result<Vec<PeakPatch>, PeakError> {
    let total = read_patch_count(bytes)?;
    let (start, count) = range.unwrap_or((0, total));
    if start.checked_add(count).is_none_or(|end| end > total) {
        return Err(PeakError::Format(format!("slice {start}+{count} exceeds {total} records")));
    }
    let body = &bytes[8..];
    Ok((start..start + count)
        .map(|r| {
            let rec = &body[r * RECORD_BYTES..(r + 1) * RECORD_BYTES];
            let f = |k: usize| f32::from_le_bytes(rec[k * 4..k * 4 + 4].try_into().expect("4 bytes"));
            let mut intensities = [0f32; PATCH_PIXELS];
            for (k, v) in intensities.iter_mut().enumerate() {
                *v = f(k);
            }
            let (x, y) = (f(PATCH_PIXELS), f(PATCH_PIXELS + 1));
            let truth = (!x.is_nan() && !y.is_nan()).then(|| PeakPosition::new(x as f64, y as f64));
            PeakPatch { truth, ..PeakPatch::new(intensities) }
        })
        .collect())
}

/// `[n, 1, 11, 11]` little-endian f32 tensor bytes.
pub fn patches_to_tensor(patches: &[PeakPatch]) -> Vec<u8> {
    patches.iter().flat_map(|p| p.intensities.iter().flat_map(|v| v.to_le_bytes())).collect()
}

pub fn patches_from_tensor(bytes: &[u8]) -> Result<Vec<PeakPatch>, PeakError> {
    if bytes.len() % (PATCH_PIXELS * 4) != 0 {
        return Err(PeakError::Format(format!("{} bytes is not a whole number of 11x11 f32 patches", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(PATCH_PIXELS * 4)
        .map(|chunk| {
            let mut intensities = [0f32; PATCH_PIXELS];
            for (v, b) in intensities.iter_mut().zip(chunk.chunks_exact(4)) {
                *v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
            }
            PeakPatch::new(intensities)
        })
        .collect())
}

/// `[n, 2]` little-endian f32 tensor bytes.
pub fn positions_to_tensor(positions: &[[f32; 2]]) -> Vec<u8> {
    positions.iter().flat_map(|p| p.iter().flat_map(|v| v.to_le_bytes())).collect()
}

pub fn positions_from_tensor(bytes: &[u8]) -> Result<Vec<PeakPosition>, PeakError> {
    if bytes.len() % 8 != 0 {
        return Err(PeakError::Format(format!("{} bytes is not a whole number of (x, y) f32 pairs", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| {
            let x = f32::from_le_bytes(c[..4].try_into().expect("4 bytes"));
            let y = f32::from_le_bytes(c[4..].try_into().expect("4 bytes"));
            PeakPosition::new(x as f64, y as f64)
        })
        .collect())
}
