use serde::{Deserialize, Serialize};

use super::{PeakError, PeakPatch, PeakPosition, PATCH_PIXELS, PATCH_SIZE};

/// Intensity-weighted mean of pixel centers after subtracting the patch minimum.
pub fn centroid_locate(patch: &PeakPatch) -> Result<PeakPosition, PeakError> {
    patch.check_finite()?;
    let min = patch.intensities.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let (mut total, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for j in 0..PATCH_SIZE {
        for i in 0..PATCH_SIZE {
            let w = patch.at(i, j) as f64 - min;
            total += w;
            sx += w * (i as f64 + 0.5);
            sy += w * (j as f64 + 0.5);
        }
    }
    if total <= 0.0 {
        return Err(PeakError::Degenerate("no intensity above the patch minimum".into()));
    }
    Ok(PeakPosition::new(sx / total, sy / total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub position: PeakPosition,
    /// `[cx, cy, amplitude, sigma_x, sigma_y, background]`.
    pub params: [f64; 6],
    pub iterations: usize,
    pub converged: bool,
    /// Half the residual sum of squares at the returned iterate.
    pub final_cost: f64,
}

const NPARAM: usize = 6;

fn model_and_jacobian(p: &[f64; NPARAM], i: usize, j: usize) -> (f64, [f64; NPARAM]) {
    let [cx, cy, a, sx, sy, b] = *p;
    let dx = i as f64 + 0.5 - cx;
    let dy = j as f64 + 0.5 - cy;
    let g = (-(dx * dx / (2.0 * sx * sx) + dy * dy / (2.0 * sy * sy))).exp();
    let ag = a * g;
    let jac = [
        ag * dx / (sx * sx),
        ag * dy / (sy * sy),
        g,
        ag * dx * dx / (sx * sx * sx),
        ag * dy * dy / (sy * sy * sy),
        1.0,
    ];
    (b + ag, jac)
}

fn cost(p: &[f64; NPARAM], data: &[f64; PATCH_PIXELS]) -> f64 {
    let mut c = 0.0;
    for j in 0..PATCH_SIZE {
        for i in 0..PATCH_SIZE {
            let r = model_and_jacobian(p, i, j).0 - data[j * PATCH_SIZE + i];
            c += r * r;
        }
    }
    0.5 * c
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: [[f64; NPARAM]; NPARAM], mut b: [f64; NPARAM]) -> Option<[f64; NPARAM]> {
    for col in 0..NPARAM {
        let pivot = (col..NPARAM).max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..NPARAM {
            let f = a[row][col] / a[col][col];
            for k in col..NPARAM {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; NPARAM];
    for row in (0..NPARAM).rev() {
        let mut s = b[row];
        for k in row + 1..NPARAM {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn initial_guess(patch: &PeakPatch) -> Result<[f64; NPARAM], PeakError> {
    let c = centroid_locate(patch)?;
    let min = patch.intensities.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let max = patch.intensities.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let (mut total, mut vx, mut vy) = (0.0, 0.0, 0.0);
    for j in 0..PATCH_SIZE {
        for i in 0..PATCH_SIZE {
            let w = patch.at(i, j) as f64 - min;
            total += w;
            vx += w * (i as f64 + 0.5 - c.x).powi(2);
            vy += w * (j as f64 + 0.5 - c.y).powi(2);
        }
    }
    let sx = (vx / total).sqrt().clamp(0.5, 3.0);
    let sy = (vy / total).sqrt().clamp(0.5, 3.0);
    Ok([c.x, c.y, max - min, sx, sy, min])
}

/// Levenberg–Marquardt fit of a 2-D Gaussian with separate widths and a
/// constant background, started from the centroid and second moments.
///
/// Converged means an accepted step with norm below `tol`, or damping grew
/// past the point where no step can lower the cost. Running out of
/// iterations returns the last iterate with `converged = false`.
pub fn gaussian_fit_locate(patch: &PeakPatch, tol: f64, max_iter: usize) -> Result<GaussianFit, PeakError> {
    let mut p = initial_guess(patch)?;
    let mut data = [0f64; PATCH_PIXELS];
    for (d, v) in data.iter_mut().zip(patch.intensities) {
        *d = v as f64;
    }
    let mut c = cost(&p, &data);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iter {
        iterations += 1;
        let mut jtj = [[0.0; NPARAM]; NPARAM];
        let mut jtr = [0.0; NPARAM];
        for j in 0..PATCH_SIZE {
            for i in 0..PATCH_SIZE {
                let (f, jac) = model_and_jacobian(&p, i, j);
                let r = f - data[j * PATCH_SIZE + i];
                for a in 0..NPARAM {
                    jtr[a] += jac[a] * r;
                    for b in a..NPARAM {
                        jtj[a][b] += jac[a] * jac[b];
                    }
                }
            }
        }
        for a in 0..NPARAM {
            for b in 0..a {
                jtj[a][b] = jtj[b][a];
            }
        }

        loop {
            let mut damped = jtj;
            for (a, row) in damped.iter_mut().enumerate() {
                row[a] += lambda * jtj[a][a].max(1e-12);
            }
            let step = solve(damped, jtr.map(|g| -g));
            let candidate = step.map(|s| std::array::from_fn::<f64, NPARAM, _>(|k| p[k] + s[k]));
            let trial = candidate.filter(|q| q[3] > 0.05 && q[4] > 0.05).map(|q| (q, cost(&q, &data)));
            match trial {
                Some((q, qc)) if qc <= c => {
                    let step_norm = step.expect("accepted step").iter().map(|s| s * s).sum::<f64>().sqrt();
                    p = q;
                    c = qc;
                    lambda = (lambda * 0.1).max(1e-12);
                    if step_norm < tol {
                        converged = true;
                    }
                    break;
                }
                _ => {
                    lambda *= 10.0;
                    if lambda > 1e16 {
                        converged = true;
                        break;
                    }
                }
            }
        }
        if converged {
            break;
        }
    }

    Ok(GaussianFit { position: PeakPosition::new(p[0], p[1]), params: p, iterations, converged, final_cost: c })
}

#[cfg(test)]
mod tests {
    use super::super::{render_patch, SynthParams};
    use super::*;

    fn noiseless(cx: f64, cy: f64) -> PeakPatch {
        noiseless_with_sigma(cx, cy, (1.1, 0.9))
    }

    fn noiseless_with_sigma(cx: f64, cy: f64, sigma: (f64, f64)) -> PeakPatch {
        render_patch(&SynthParams {
            center: (cx, cy),
            amplitude: 500.0,
            sigma,
            background: 10.0,
            noise_sigma: 0.0,
            seed: 0,
        })
        .unwrap()
    }

    #[test]
    fn impulse_centroid() {
        let mut v = [0f32; PATCH_PIXELS];
        v[7 * PATCH_SIZE + 3] = 4.0;
        let p = centroid_locate(&PeakPatch::new(v)).unwrap();
        assert_eq!((p.x, p.y), (3.5, 7.5));
    }

    #[test]
    fn symmetric_peak_centroid() {
        let p = centroid_locate(&noiseless(5.5, 5.5)).unwrap();
        assert!((p.x - 5.5).abs() < 1e-9 && (p.y - 5.5).abs() < 1e-9, "{p:?}");
    }

    #[test]
    fn off_center_centroid_matches_direct_formula() {
        let patch = noiseless_with_sigma(4.2, 6.1, (1.8, 1.8));
        let min = patch.intensities.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
        let mut num = (0.0, 0.0);
        let mut den = 0.0;
        for (k, v) in patch.intensities.iter().enumerate() {
            let w = *v as f64 - min;
            num.0 += w * ((k % 11) as f64 + 0.5);
            num.1 += w * ((k / 11) as f64 + 0.5);
            den += w;
        }
        let c = centroid_locate(&patch).unwrap();
        assert!((c.x - num.0 / den).abs() < 1e-12 && (c.y - num.1 / den).abs() < 1e-12);
        let fit = gaussian_fit_locate(&patch, 1e-10, 200).unwrap();
        let centroid_err = ((c.x - 4.2).powi(2) + (c.y - 6.1).powi(2)).sqrt();
        let fit_err = ((fit.position.x - 4.2).powi(2) + (fit.position.y - 6.1).powi(2)).sqrt();
        assert!(centroid_err > 1e-3, "centroid is expected to be biased: {centroid_err}");
        assert!(fit_err < centroid_err);
    }

    #[test]
    fn degenerate_patches() {
        assert!(matches!(centroid_locate(&PeakPatch::new([0.0; PATCH_PIXELS])), Err(PeakError::Degenerate(_))));
        assert!(matches!(centroid_locate(&PeakPatch::new([3.0; PATCH_PIXELS])), Err(PeakError::Degenerate(_))));
        assert!(gaussian_fit_locate(&PeakPatch::new([0.0; PATCH_PIXELS]), 1e-10, 100).is_err());
        let mut v = [1f32; PATCH_PIXELS];
        v[3] = f32::NAN;
        assert!(centroid_locate(&PeakPatch::new(v)).is_err());
    }

    #[test]
    fn noiseless_fit_is_exact() {
        for (cx, cy) in [(2.0, 2.0), (3.3, 7.9), (5.5, 5.5), (9.0, 4.4)] {
            let fit = gaussian_fit_locate(&noiseless(cx, cy), 1e-10, 200).unwrap();
            assert!(fit.converged);
            assert!((fit.position.x - cx).abs() < 1e-6 && (fit.position.y - cy).abs() < 1e-6, "{cx},{cy}: {fit:?}");
        }
    }

    #[test]
    fn iteration_cap_is_flagged() {
        let fit = gaussian_fit_locate(&noiseless(4.3, 5.2), 0.0, 1).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.iterations, 1);
    }

    #[test]
    fn translation_by_one_pixel() {
        // Narrow enough that the tails vanish in f32 before the patch edge.
        let a = centroid_locate(&noiseless_with_sigma(4.2, 5.0, (0.6, 0.6))).unwrap();
        let b = centroid_locate(&noiseless_with_sigma(5.2, 5.0, (0.6, 0.6))).unwrap();
        assert!((b.x - a.x - 1.0).abs() < 1e-12 && (b.y - a.y).abs() < 1e-12);
    }
}
