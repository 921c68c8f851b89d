use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_ROTATION_DEG: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub enabled: bool,
    pub flip_prob: f64,
    /// Rotation drawn uniformly from ±`rotation_deg`.
    pub rotation_deg: f64,
    /// Additive shift drawn from ±`brightness`, in units of the normalized
    /// image's standard deviation.
    pub brightness: f64,
    /// Contrast scale drawn from 1 ± `contrast`.
    pub contrast: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            flip_prob: 0.5,
            rotation_deg: 10.0,
            brightness: 0.1,
            contrast: 0.1,
        }
    }
}

impl AugmentationPolicy {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config(format!("flip probability {} outside [0, 1]", self.flip_prob)));
        }
        if !(0.0..=MAX_ROTATION_DEG).contains(&self.rotation_deg) {
            return Err(Error::config(format!(
                "rotation range {}° outside [0, {MAX_ROTATION_DEG}]",
                self.rotation_deg
            )));
        }
        if !(0.0..1.0).contains(&self.contrast) || !(0.0..=1.0).contains(&self.brightness) {
            return Err(Error::config("jitter ranges must lie in [0, 1)"));
        }
        Ok(())
    }
}

fn planes(image: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::dim(format!("expected C×H×W, got {s:?}"))),
    }
}

pub fn flip_horizontal(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (_, _, w) = planes(image)?;
    let mut out = image.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    Ok(out)
}

/// Rotation about the image centre by `degrees` (counter-clockwise),
/// bilinear sampling with edge clamping.
pub fn rotate(image: &Tensor<f32>, degrees: f64) -> Result<Tensor<f32>> {
    let (c, h, w) = planes(image)?;
    if degrees == 0.0 {
        return Ok(image.clone());
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = image.data();
    let mut out = vec![0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sx = (cos * dx + sin * dy + cx).clamp(0.0, (w - 1) as f64);
            let sy = (-sin * dx + cos * dy + cy).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for ch in 0..c {
                let p = &src[ch * h * w..(ch + 1) * h * w];
                let at = |yy: usize, xx: usize| p[yy * w + xx] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[ch * h * w + y * w + x] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    Tensor::new(image.shape(), out)
}

/// `contrast · (x − mean) + mean + brightness`, per channel.
pub fn jitter(image: &Tensor<f32>, brightness: f64, contrast: f64) -> Result<Tensor<f32>> {
    let (_, h, w) = planes(image)?;
    if brightness == 0.0 && contrast == 1.0 {
        return Ok(image.clone());
    }
    let mut out = image.clone();
    for plane in out.data_mut().chunks_mut(h * w) {
        let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64;
        for v in plane.iter_mut() {
            *v = (contrast * (*v as f64 - mean) + mean + brightness) as f32;
        }
    }
    Ok(out)
}

/// Random flip, rotation and intensity jitter. The same four draws are
/// consumed whatever the outcome, so the stream stays aligned across
/// samples; a disabled policy consumes nothing and returns the input.
pub fn augment<R: Rng>(image: &Tensor<f32>, policy: &AugmentationPolicy, rng: &mut R) -> Result<Tensor<f32>> {
    planes(image)?;
    if !policy.enabled {
        return Ok(image.clone());
    }
    let flip = rng.random::<f64>() < policy.flip_prob;
    let angle = (rng.random::<f64>() * 2.0 - 1.0) * policy.rotation_deg;
    let shift = (rng.random::<f64>() * 2.0 - 1.0) * policy.brightness;
    let scale = 1.0 + (rng.random::<f64>() * 2.0 - 1.0) * policy.contrast;
    let mut out = if flip { flip_horizontal(image)? } else { image.clone() };
    out = rotate(&out, angle)?;
    jitter(&out, shift, scale)
}
