//! Fully connected CRF refinement of per-class score stacks, mean-field
//! approximation, with the usual pair of Potts-compatibility kernels: an
//! appearance-blind smoothness kernel and a color-sensitive bilateral one.
//!
//! Kernel support is part of the contract, not an optimization detail: each
//! kernel covers a square window of radius `ceil(3 * sxy)` around the pixel
//! (self excluded) and nothing outside it. Any independent reimplementation
//! must apply the same support rule to reproduce these numbers, because the
//! mass beyond three standard deviations, while visually negligible, is far
//! larger than the tolerances this module is tested to.
//!
//! Updates are synchronous — every pixel's new distribution is computed from
//! the previous iteration's field — which makes row-parallel execution
//! bit-identical to serial execution.

use ndarray::{Array2, Array3, ArrayView3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrfParams {
    pub iterations: usize,
    /// Spatial bandwidth (pixels) of the smoothness kernel.
    pub gauss_sxy: f64,
    pub gauss_weight: f64,
    /// Spatial bandwidth (pixels) of the bilateral kernel.
    pub bilat_sxy: f64,
    /// Color bandwidth (8-bit intensity units) of the bilateral kernel.
    pub bilat_srgb: f64,
    pub bilat_weight: f64,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            iterations: 3,
            gauss_sxy: 3.0,
            gauss_weight: 3.0,
            bilat_sxy: 80.0,
            bilat_srgb: 13.0,
            bilat_weight: 10.0,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gauss_sxy", self.gauss_sxy),
            ("bilat_sxy", self.bilat_sxy),
            ("bilat_srgb", self.bilat_srgb),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParam(format!(
                    "{name} must be a positive finite bandwidth, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("gauss_weight", self.gauss_weight),
            ("bilat_weight", self.bilat_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParam(format!(
                    "{name} must be a non-negative finite weight, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// The square-window radius a kernel of bandwidth `sxy` covers.
pub fn support_radius(sxy: f64) -> usize {
    (3.0 * sxy).ceil() as usize
}

/// How the background channel of the unary field is synthesized from a
/// foreground-only score stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackgroundMode {
    /// A flat score: pixels become background unless some class clearly
    /// beats `value`. The natural companion to min-max-normalized maps.
    Constant { value: f64 },
    /// One minus the strongest class score, so confident foreground pixels
    /// get near-zero background mass.
    OneMinusMax,
}

impl Default for BackgroundMode {
    fn default() -> Self {
        BackgroundMode::Constant { value: 0.5 }
    }
}

/// Per-pixel label distributions, background at channel 0. Probabilities are
/// non-negative and sum to one per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryField<T: Real> {
    /// `[labels × H × W]`, label 0 = background.
    pub probs: Array3<T>,
}

impl<T: Real> UnaryField<T> {
    pub fn validate(&self) -> Result<()> {
        let (l, h, w) = self.probs.dim();
        if l == 0 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch("unary field is empty".into()));
        }
        let tol = T::of(1e-5);
        for y in 0..h {
            for x in 0..w {
                let mut sum = T::zero();
                for c in 0..l {
                    let p = self.probs[[c, y, x]];
                    if !p.is_finite() || p < T::zero() {
                        return Err(Error::ShapeMismatch(format!(
                            "unary probability {p:?} at ({y}, {x}) label {c} is invalid"
                        )));
                    }
                    sum += p;
                }
                if (sum - T::one()).abs() > tol {
                    return Err(Error::ShapeMismatch(format!(
                        "unary probabilities at ({y}, {x}) sum to {sum:?}, not 1"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Turn a foreground score stack into a full unary field: synthesize the
/// background score per `mode`, prepend it as channel 0, and softmax each
/// pixel across all channels. Label indices of the resulting field therefore
/// line up with final label maps (0 = background, foreground 1-based).
pub fn to_unary<T: Real>(scores: &Array3<T>, mode: &BackgroundMode) -> Result<UnaryField<T>> {
    let (l, h, w) = scores.dim();
    if l == 0 || h == 0 || w == 0 {
        return Err(Error::ShapeMismatch("empty score stack".into()));
    }
    if let Some(v) = scores.iter().find(|v| !v.is_finite()) {
        return Err(Error::ShapeMismatch(format!(
            "score stack contains non-finite value {v:?}"
        )));
    }
    if let BackgroundMode::Constant { value } = mode {
        if !value.is_finite() {
            return Err(Error::InvalidParam(format!(
                "constant background score {value} is not finite"
            )));
        }
    }

    let mut probs = Array3::zeros((l + 1, h, w));
    let mut stack = vec![T::zero(); l + 1];
    for y in 0..h {
        for x in 0..w {
            stack[0] = match mode {
                BackgroundMode::Constant { value } => T::of(*value),
                BackgroundMode::OneMinusMax => {
                    let mut max = T::neg_infinity();
                    for c in 0..l {
                        let v = scores[[c, y, x]];
                        if v > max {
                            max = v;
                        }
                    }
                    T::one() - max
                }
            };
            for c in 0..l {
                stack[c + 1] = scores[[c, y, x]];
            }
            // Per-pixel softmax, max-shifted.
            let max = stack.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in stack.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for (c, v) in stack.iter().enumerate() {
                probs[[c, y, x]] = *v / total;
            }
        }
    }
    Ok(UnaryField { probs })
}

/// Offsets and weights of one truncated kernel, self excluded.
fn gaussian_offsets(sxy: f64, weight: f64) -> Vec<(i32, i32, f64)> {
    if weight == 0.0 {
        return Vec::new();
    }
    let r = support_radius(sxy) as i32;
    let inv = 1.0 / (2.0 * sxy * sxy);
    let mut out = Vec::with_capacity(((2 * r + 1) * (2 * r + 1) - 1) as usize);
    for dy in -r..=r {
        for dx in -r..=r {
            if dy == 0 && dx == 0 {
                continue;
            }
            let d2 = f64::from(dx * dx + dy * dy);
            out.push((dy, dx, (-d2 * inv).exp()));
        }
    }
    out
}

fn argmax_labels(probs: &[f64], h: usize, w: usize, l_total: usize) -> Array2<u8> {
    let mut labels = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * l_total;
            let mut best = f64::NEG_INFINITY;
            let mut best_l = 0usize;
            for l in 0..l_total {
                let v = probs[base + l];
                if v > best {
                    best = v;
                    best_l = l;
                }
            }
            labels[[y, x]] = best_l as u8;
        }
    }
    labels
}

/// Run mean-field refinement and return `(marginals, labels)`: the final
/// per-pixel distributions in `[labels × H × W]` layout and their argmax
/// (ties to the lowest label).
///
/// `image` is the guidance photo as `[H × W × 3]` RGB bytes at the same
/// resolution as the unary field. Internals run in `f64` regardless of `T`.
pub fn mean_field<T: Real>(
    unary: &UnaryField<T>,
    image: &ArrayView3<'_, u8>,
    params: &CrfParams,
) -> Result<(Array3<T>, Array2<u8>)> {
    params.validate()?;
    unary.validate()?;
    let (l_total, h, w) = unary.probs.dim();
    if l_total > 256 {
        return Err(Error::InvalidParam(format!(
            "{l_total} labels exceed the u8 label map"
        )));
    }
    if image.dim() != (h, w, 3) {
        return Err(Error::ShapeMismatch(format!(
            "guidance image is {:?}, unary field is {h}x{w}",
            image.dim()
        )));
    }

    let npix = h * w;
    // Pixel-major working copies: q[(y*w + x) * l_total + l].
    let mut q = vec![0f64; npix * l_total];
    let mut log_u = vec![0f64; npix * l_total];
    for l in 0..l_total {
        for y in 0..h {
            for x in 0..w {
                let p = unary.probs[[l, y, x]].to_f64();
                q[(y * w + x) * l_total + l] = p;
                log_u[(y * w + x) * l_total + l] = p.ln(); // ln(0) = -inf is fine
            }
        }
    }
    let colors: Vec<[f64; 3]> = (0..npix)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            [
                f64::from(image[[y, x, 0]]),
                f64::from(image[[y, x, 1]]),
                f64::from(image[[y, x, 2]]),
            ]
        })
        .collect();

    let gauss = gaussian_offsets(params.gauss_sxy, params.gauss_weight);
    let bil_r = support_radius(params.bilat_sxy) as i32;
    let bil_spatial_inv = 1.0 / (2.0 * params.bilat_sxy * params.bilat_sxy);
    let bil_color_inv = 1.0 / (2.0 * params.bilat_srgb * params.bilat_srgb);
    let run_bilateral = params.bilat_weight > 0.0;

    for _ in 0..params.iterations {
        let mut next = vec![0f64; npix * l_total];
        next.par_chunks_mut(w * l_total)
            .enumerate()
            .for_each(|(y, row_out)| {
                let mut acc_g = vec![0f64; l_total];
                let mut acc_b = vec![0f64; l_total];
                let mut scores = vec![0f64; l_total];
                for x in 0..w {
                    let i = y * w + x;
                    acc_g.iter_mut().for_each(|v| *v = 0.0);
                    acc_b.iter_mut().for_each(|v| *v = 0.0);

                    for &(dy, dx, wgt) in &gauss {
                        let (yy, xx) = (y as i32 + dy, x as i32 + dx);
                        if yy < 0 || yy >= h as i32 || xx < 0 || xx >= w as i32 {
                            continue;
                        }
                        let j = (yy as usize * w + xx as usize) * l_total;
                        for l in 0..l_total {
                            acc_g[l] += wgt * q[j + l];
                        }
                    }

                    if run_bilateral {
                        let ci = colors[i];
                        let y_lo = (y as i32 - bil_r).max(0);
                        let y_hi = (y as i32 + bil_r).min(h as i32 - 1);
                        let x_lo = (x as i32 - bil_r).max(0);
                        let x_hi = (x as i32 + bil_r).min(w as i32 - 1);
                        for yy in y_lo..=y_hi {
                            for xx in x_lo..=x_hi {
                                if yy as usize == y && xx as usize == x {
                                    continue;
                                }
                                let dy = f64::from(yy - y as i32);
                                let dx = f64::from(xx - x as i32);
                                let cj = colors[yy as usize * w + xx as usize];
                                let dc = (ci[0] - cj[0]).powi(2)
                                    + (ci[1] - cj[1]).powi(2)
                                    + (ci[2] - cj[2]).powi(2);
                                // One exp for both terms: spatial and color
                                // affinity form a single kernel value.
                                let wgt = (-(dy * dy + dx * dx) * bil_spatial_inv
                                    - dc * bil_color_inv)
                                    .exp();
                                let jdx = (yy as usize * w + xx as usize) * l_total;
                                for l in 0..l_total {
                                    acc_b[l] += wgt * q[jdx + l];
                                }
                            }
                        }
                    }

                    // Potts compatibility: each label is pushed down by the
                    // message mass of every *other* label.
                    let mut total = 0.0;
                    for l in 0..l_total {
                        scores[l] = params.gauss_weight * acc_g[l] + params.bilat_weight * acc_b[l];
                        total += scores[l];
                    }
                    let base = i * l_total;
                    for l in 0..l_total {
                        scores[l] = log_u[base + l] - (total - scores[l]);
                    }

                    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for v in scores.iter_mut() {
                        *v = (*v - max).exp();
                        z += *v;
                    }
                    for l in 0..l_total {
                        row_out[x * l_total + l] = scores[l] / z;
                    }
                }
            });
        q = next;
    }

    let labels = argmax_labels(&q, h, w, l_total);
    let mut marginals = Array3::zeros((l_total, h, w));
    for l in 0..l_total {
        for y in 0..h {
            for x in 0..w {
                marginals[[l, y, x]] = T::of(q[(y * w + x) * l_total + l]);
            }
        }
    }
    Ok((marginals, labels))
}
