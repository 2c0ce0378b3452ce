//! Synthetic low-quality artifacts: pixelation, out-of-focus (Gaussian) blur
//! and motion blur, plus the random policy that picks one per image.
//!
//! All filters keep the image size. Convolutions are correlations anchored
//! at `size / 2` with edge replication, accumulated in float64 and rounded
//! once at the end.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::math;

pub const PIXEL_RES_MIN: usize = 16;
pub const PIXEL_RES_MAX: usize = 64;
pub const OOF_KERNEL_MIN: usize = 5;
pub const OOF_KERNEL_MAX: usize = 21;
pub const MOTION_LEN_MIN: usize = 8;
pub const MOTION_LEN_MAX: usize = 20;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DegradeError {
    #[error("pixelation target {0} outside [16, 64]")]
    PixelTarget(usize),
    #[error("Gaussian kernel size {0} must be odd and within [5, 21]")]
    OofKernel(usize),
    #[error("Gaussian sigma must be positive, got {0}")]
    Sigma(f64),
    #[error("motion blur length {0} outside [8, 20]")]
    MotionLength(usize),
    #[error("motion blur angle {0} outside [0, 180] degrees")]
    MotionAngle(f64),
    #[error("invalid artifact policy: {0}")]
    Policy(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Pixelation,
    OofBlur,
    MotionBlur,
}

/// Which artifact (if any) was applied, with its sampled parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Artifact {
    None,
    Pixelation { resolution: usize },
    OofBlur { kernel: usize, sigma: f64 },
    MotionBlur { length: usize, angle: f64 },
}

impl Artifact {
    pub fn kind(&self) -> Option<ArtifactKind> {
        match self {
            Artifact::None => None,
            Artifact::Pixelation { .. } => Some(ArtifactKind::Pixelation),
            Artifact::OofBlur { .. } => Some(ArtifactKind::OofBlur),
            Artifact::MotionBlur { .. } => Some(ArtifactKind::MotionBlur),
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Artifact::None)
    }

    /// Re-applies a recorded artifact.
    pub fn apply(&self, img: &Image) -> Result<Image, DegradeError> {
        match *self {
            Artifact::None => Ok(img.clone()),
            Artifact::Pixelation { resolution } => pixelate(img, resolution),
            Artifact::OofBlur { kernel, sigma } => oof_blur(img, kernel, sigma),
            Artifact::MotionBlur { length, angle } => motion_blur(img, length, angle),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactPolicy {
    pub enabled: Vec<ArtifactKind>,
    pub apply_probability: f64,
    pub pixel_res_range: [usize; 2],
    pub oof_kernel_range: [usize; 2],
    pub motion_len_range: [usize; 2],
    pub motion_angle_range: [f64; 2],
    pub rng_seed: u64,
}

impl Default for ArtifactPolicy {
    fn default() -> Self {
        Self {
            enabled: vec![
                ArtifactKind::Pixelation,
                ArtifactKind::OofBlur,
                ArtifactKind::MotionBlur,
            ],
            apply_probability: 0.5,
            pixel_res_range: [PIXEL_RES_MIN, PIXEL_RES_MAX],
            oof_kernel_range: [OOF_KERNEL_MIN, OOF_KERNEL_MAX],
            motion_len_range: [MOTION_LEN_MIN, MOTION_LEN_MAX],
            motion_angle_range: [0.0, 180.0],
            rng_seed: 0,
        }
    }
}

impl ArtifactPolicy {
    /// Same ranges, always applied. Used to build LQ twins.
    pub fn always(&self) -> Self {
        Self {
            apply_probability: 1.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), DegradeError> {
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(DegradeError::Policy("apply_probability must lie in [0, 1]"));
        }
        if self.enabled.is_empty() && self.apply_probability > 0.0 {
            return Err(DegradeError::Policy("no artifact enabled"));
        }
        let [plo, phi] = self.pixel_res_range;
        if plo > phi || plo < PIXEL_RES_MIN || phi > PIXEL_RES_MAX {
            return Err(DegradeError::Policy("pixel_res_range must lie in [16, 64]"));
        }
        let [olo, ohi] = self.oof_kernel_range;
        if olo > ohi || olo < OOF_KERNEL_MIN || ohi > OOF_KERNEL_MAX {
            return Err(DegradeError::Policy("oof_kernel_range must lie in [5, 21]"));
        }
        if olo % 2 == 0 || ohi % 2 == 0 {
            return Err(DegradeError::Policy("oof_kernel_range bounds must be odd"));
        }
        let [mlo, mhi] = self.motion_len_range;
        if mlo > mhi || mlo < MOTION_LEN_MIN || mhi > MOTION_LEN_MAX {
            return Err(DegradeError::Policy("motion_len_range must lie in [8, 20]"));
        }
        let [alo, ahi] = self.motion_angle_range;
        if !(alo <= ahi && alo >= 0.0 && ahi <= 180.0) {
            return Err(DegradeError::Policy(
                "motion_angle_range must lie in [0, 180]",
            ));
        }
        Ok(())
    }
}

/// Bilinear resample with half-pixel centers and clamped borders, kept in
/// float64. `src` is `sh × sw × 3`.
fn resize_bilinear(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let sy = sh as f64 / dh as f64;
    let sx = sw as f64 / dw as f64;
    let coord = |d: usize, scale: f64, limit: usize| {
        let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (limit - 1) as f64);
        let i0 = math::floor(s) as usize;
        let i1 = (i0 + 1).min(limit - 1);
        (i0, i1, s - i0 as f64)
    };
    let cols: Vec<(usize, usize, f64)> = (0..dw).map(|x| coord(x, sx, sw)).collect();
    let mut out = vec![0.0; dh * dw * 3];
    for y in 0..dh {
        let (y0, y1, ty) = coord(y, sy, sh);
        for (x, &(x0, x1, tx)) in cols.iter().enumerate() {
            for c in 0..3 {
                let p = |yy: usize, xx: usize| src[(yy * sw + xx) * 3 + c];
                let top = (1.0 - tx) * p(y0, x0) + tx * p(y0, x1);
                let bot = (1.0 - tx) * p(y1, x0) + tx * p(y1, x1);
                out[(y * dw + x) * 3 + c] = (1.0 - ty) * top + ty * bot;
            }
        }
    }
    out
}

fn to_f64(img: &Image) -> Vec<f64> {
    img.data().iter().map(|&v| v as f64).collect()
}

fn from_f64(h: usize, w: usize, data: &[f64]) -> Image {
    Image::new(h, w, data.iter().map(|&v| math::to_u8(v)).collect())
        .expect("filters preserve dimensions")
}

/// Bilinear down-sample to `target × target` (stored as 8-bit), then bilinear
/// up-sample back to the original size.
pub fn pixelate(img: &Image, target: usize) -> Result<Image, DegradeError> {
    if !(PIXEL_RES_MIN..=PIXEL_RES_MAX).contains(&target) {
        return Err(DegradeError::PixelTarget(target));
    }
    let (h, w) = (img.height(), img.width());
    let small = resize_bilinear(&to_f64(img), h, w, target, target);
    let small: Vec<f64> = small.iter().map(|&v| math::to_u8(v) as f64).collect();
    let back = resize_bilinear(&small, target, target, h, w);
    Ok(from_f64(h, w, &back))
}

/// Normalized 1-D Gaussian weights of odd length `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            math::exp(-d * d / (2.0 * sigma * sigma))
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Default sigma for a Gaussian kernel: the kernel spans ±3σ.
pub fn default_sigma(kernel: usize) -> f64 {
    kernel as f64 / 6.0
}

/// Separable Gaussian blur with edge replication.
pub fn oof_blur(img: &Image, kernel: usize, sigma: f64) -> Result<Image, DegradeError> {
    if kernel % 2 == 0 || !(OOF_KERNEL_MIN..=OOF_KERNEL_MAX).contains(&kernel) {
        return Err(DegradeError::OofKernel(kernel));
    }
    if !(sigma > 0.0) {
        return Err(DegradeError::Sigma(sigma));
    }
    let wts = gaussian_kernel(kernel, sigma);
    let (h, w) = (img.height(), img.width());
    let half = (kernel / 2) as isize;
    let src = to_f64(img);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut horiz = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                horiz[(y * w + x) * 3 + c] = wts
                    .iter()
                    .enumerate()
                    .map(|(k, wk)| {
                        let xx = clamp(x as isize + k as isize - half, w);
                        wk * src[(y * w + xx) * 3 + c]
                    })
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[(y * w + x) * 3 + c] = wts
                    .iter()
                    .enumerate()
                    .map(|(k, wk)| {
                        let yy = clamp(y as isize + k as isize - half, h);
                        wk * horiz[(yy * w + x) * 3 + c]
                    })
                    .sum();
            }
        }
    }
    Ok(from_f64(h, w, &out))
}

/// `length × length` kernel: a horizontal line of ones through row
/// `(length - 1) / 2`, rotated counter-clockwise by `angle` degrees about
/// the kernel center with bilinear sampling, normalized to sum 1.
pub fn motion_kernel(length: usize, angle: f64) -> Vec<f64> {
    let n = length;
    let mut base = vec![0.0; n * n];
    let mid = (n - 1) / 2;
    for x in 0..n {
        base[mid * n + x] = 1.0;
    }
    let c = n as f64 / 2.0 - 0.5;
    let theta = angle.to_radians();
    let (s, co) = (math::sin(theta), math::cos(theta));
    let sample = |yy: f64, xx: f64| -> f64 {
        let y0 = math::floor(yy);
        let x0 = math::floor(xx);
        let ty = yy - y0;
        let tx = xx - x0;
        let at = |y: f64, x: f64| -> f64 {
            if y < 0.0 || x < 0.0 || y > (n - 1) as f64 || x > (n - 1) as f64 {
                0.0
            } else {
                base[y as usize * n + x as usize]
            }
        };
        (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x0 + 1.0))
            + ty * ((1.0 - tx) * at(y0 + 1.0, x0) + tx * at(y0 + 1.0, x0 + 1.0))
    };
    let mut k = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            // inverse-map the destination pixel; counter-clockwise on screen
            // means the y axis (pointing down) flips the usual sign.
            let dx = x as f64 - c;
            let dy = y as f64 - c;
            let sx = co * dx - s * dy + c;
            let sy = s * dx + co * dy + c;
            let v = sample(sy, sx);
            k[y * n + x] = if math::abs(v) < 1e-12 { 0.0 } else { v };
        }
    }
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// 2-D correlation anchored at `size / 2`, edge replicated.
fn convolve2d(img: &Image, kernel: &[f64], size: usize) -> Image {
    let (h, w) = (img.height(), img.width());
    let half = (size / 2) as isize;
    let src = to_f64(img);
    let taps: Vec<(isize, isize, f64)> = (0..size)
        .flat_map(|i| (0..size).map(move |j| (i, j)))
        .filter_map(|(i, j)| {
            let v = kernel[i * size + j];
            (v != 0.0).then_some((i as isize - half, j as isize - half, v))
        })
        .collect();
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for &(dy, dx, v) in &taps {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                let p = (yy * w + xx) * 3;
                acc[0] += v * src[p];
                acc[1] += v * src[p + 1];
                acc[2] += v * src[p + 2];
            }
            out[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&acc);
        }
    }
    from_f64(h, w, &out)
}

/// Linear motion blur. `length == 1` is accepted as the identity kernel.
pub fn motion_blur(img: &Image, length: usize, angle: f64) -> Result<Image, DegradeError> {
    if length != 1 && !(MOTION_LEN_MIN..=MOTION_LEN_MAX).contains(&length) {
        return Err(DegradeError::MotionLength(length));
    }
    if !(0.0..=180.0).contains(&angle) {
        return Err(DegradeError::MotionAngle(angle));
    }
    let k = motion_kernel(length, angle);
    Ok(convolve2d(img, &k, length))
}

/// With probability `apply_probability`, applies one enabled artifact chosen
/// uniformly, with parameters drawn uniformly from the policy ranges.
pub fn apply_policy<R: Rng + ?Sized>(
    img: &Image,
    policy: &ArtifactPolicy,
    rng: &mut R,
) -> Result<(Image, Artifact), DegradeError> {
    policy.validate()?;
    let draw: f64 = rng.random();
    if draw >= policy.apply_probability || policy.enabled.is_empty() {
        return Ok((img.clone(), Artifact::None));
    }
    let kind = policy.enabled[rng.random_range(0..policy.enabled.len())];
    let artifact = match kind {
        ArtifactKind::Pixelation => {
            let [lo, hi] = policy.pixel_res_range;
            Artifact::Pixelation {
                resolution: rng.random_range(lo..=hi),
            }
        }
        ArtifactKind::OofBlur => {
            let [lo, hi] = policy.oof_kernel_range;
            let kernel = lo + 2 * rng.random_range(0..=(hi - lo) / 2);
            Artifact::OofBlur {
                kernel,
                sigma: default_sigma(kernel),
            }
        }
        ArtifactKind::MotionBlur => {
            let [lo, hi] = policy.motion_len_range;
            let length = rng.random_range(lo..=hi);
            let [alo, ahi] = policy.motion_angle_range;
            let angle = if alo == ahi {
                alo
            } else {
                rng.random_range(alo..=ahi)
            };
            Artifact::MotionBlur { length, angle }
        }
    };
    Ok((artifact.apply(img)?, artifact))
}

/// Variance of the 4-neighbour Laplacian of the channel-mean intensity over
/// interior pixels. A crude sharpness score: blur lowers it.
pub fn laplacian_variance(img: &Image) -> f64 {
    let (h, w) = (img.height(), img.width());
    let lum = |y: usize, x: usize| {
        let p = img.pixel(y, x);
        (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0
    };
    let mut vals = Vec::with_capacity((h - 2) * (w - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            vals.push(
                lum(y - 1, x) + lum(y + 1, x) + lum(y, x - 1) + lum(y, x + 1) - 4.0 * lum(y, x),
            );
        }
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}
