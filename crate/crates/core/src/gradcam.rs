//! Gradient-weighted class activation maps and heatmap overlays.

use std::path::Path;

use image::{GrayImage, Rgb, RgbImage};

use crate::backbone::{network_forward, ForwardOptions, ModelParams, NetworkConfig, NUM_GRADES};
use crate::error::{Error, Result};
use crate::kernels::bilinear_forward;
use crate::params::Forward;
use crate::tensor::{Real, Tensor};

pub use crate::backbone::{LAYER_ATTENDED, LAYER_MERGED};

/// Non-negative class-evidence map over one feature map's spatial grid,
/// normalized so its maximum is 1 (or all zeros).
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub layer: String,
    pub class: usize,
}

impl Heatmap {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Bilinear resample to `h`×`w`.
    pub fn resized(&self, h: usize, w: usize) -> Vec<f64> {
        bilinear_forward(&self.values, 1, (self.height, self.width), (h, w))
    }
}

/// Channel weights are the spatial means of `grad`; the map is the ReLU of
/// the weighted channel sum, divided by its maximum. Operates on the first
/// sample of 1×C×H×W (or N×C×H×W) tensors.
pub fn heatmap_from<T: Real>(activation: &Tensor<T>, grad: Option<&Tensor<T>>, layer: &str, class: usize) -> Result<Heatmap> {
    let [_, c, h, w] = activation.dims4()?;
    let plane = h * w;
    let mut values = vec![0.0f64; plane];
    if let Some(grad) = grad {
        if grad.shape() != activation.shape() {
            return Err(Error::dim(format!(
                "gradient shape {:?} does not match activation {:?}",
                grad.shape(),
                activation.shape()
            )));
        }
        let (a, g) = (activation.data(), grad.data());
        for ch in 0..c {
            let gs = &g[ch * plane..(ch + 1) * plane];
            let alpha = gs.iter().map(|v| v.to_f64().unwrap_or(0.0)).sum::<f64>() / plane as f64;
            if alpha == 0.0 {
                continue;
            }
            for (out, av) in values.iter_mut().zip(&a[ch * plane..(ch + 1) * plane]) {
                *out += alpha * av.to_f64().unwrap_or(0.0);
            }
        }
    }
    for v in &mut values {
        *v = v.max(0.0);
    }
    let peak = values.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        for v in &mut values {
            *v /= peak;
        }
    }
    Ok(Heatmap {
        height: h,
        width: w,
        values,
        layer: layer.to_owned(),
        class,
    })
}

/// Grad-CAM of `class` at feature map `layer` for a single 1×C×S×S image.
/// Batch norm runs in eval mode and parameters are left untouched.
pub fn gradcam<T: Real>(
    config: &NetworkConfig,
    params: &ModelParams<T>,
    image: &Tensor<T>,
    class: usize,
    layer: &str,
) -> Result<Heatmap> {
    if class >= NUM_GRADES {
        return Err(Error::input(format!("class {class} out of range 0..{}", NUM_GRADES - 1)));
    }
    if image.shape().first() != Some(&1) {
        return Err(Error::dim(format!("gradcam takes one image, got shape {:?}", image.shape())));
    }
    let mut fw = Forward::new(params, false).frozen();
    // The image is the only gradient source, so every feature map on the
    // path to the logits carries a gradient.
    let x = fw.graph.leaf(image.clone(), true);
    let logits = network_forward(&mut fw, config, x, ForwardOptions::eval())?;
    let feature = fw
        .tapped(layer)
        .ok_or_else(|| Error::UnknownLayer(layer.to_owned()))?;
    let mask = fw
        .graph
        .constant(Tensor::from_fn(&[1, NUM_GRADES], |i| if i == class { T::one() } else { T::zero() }));
    let picked = fw.graph.mul(logits, mask)?;
    let target = fw.graph.sum(picked)?;
    fw.graph.backward(target)?;
    heatmap_from(fw.graph.value(feature), fw.graph.grad(feature), layer, class)
}

/// Names of every feature map a forward pass records, in pass order.
pub fn layer_names(config: &NetworkConfig) -> Vec<String> {
    let mut names = vec!["stem".to_string()];
    for stage in 1..=crate::backbone::NUM_STAGES {
        names.extend((1..=stage).map(|j| format!("stage{stage}.branch{j}")));
    }
    names.push(LAYER_MERGED.into());
    if config.attention {
        names.extend(["cbam.channel_map".into(), "cbam.spatial_map".into()]);
    }
    names.push(LAYER_ATTENDED.into());
    names
}

const fn build_colormap() -> [[u8; 3]; 256] {
    // Piecewise-linear blue → cyan → green → yellow → red.
    const STOPS: [[i32; 3]; 5] = [[0, 0, 255], [0, 255, 255], [0, 255, 0], [255, 255, 0], [255, 0, 0]];
    let mut lut = [[0u8; 3]; 256];
    let mut i = 0;
    while i < 256 {
        let seg = if i >= 255 { 3 } else { (i * 4) / 255 };
        let lo = (seg * 255usize).div_ceil(4);
        let hi = ((seg + 1) * 255usize).div_ceil(4);
        let t_num = (i - lo) as i32;
        let t_den = (hi - lo) as i32;
        let mut ch = 0;
        while ch < 3 {
            let a = STOPS[seg][ch];
            let b = STOPS[seg + 1][ch];
            lut[i][ch] = ((a * (t_den - t_num) + b * t_num + t_den / 2) / t_den) as u8;
            ch += 1;
        }
        i += 1;
    }
    lut
}

/// Fixed 256-entry blue-to-red colormap.
pub static COLORMAP: [[u8; 3]; 256] = build_colormap();

pub fn colormap(v: f64) -> [u8; 3] {
    let idx = (v.clamp(0.0, 1.0) * 255.0).round() as usize;
    COLORMAP[idx]
}

/// Resamples `heatmap` to the image size, colors it and alpha-blends it
/// over the grayscale image.
pub fn render_overlay(heatmap: &Heatmap, image: &GrayImage, alpha: f64) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::input(format!("blend weight {alpha} outside [0, 1]")));
    }
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::input("cannot overlay on an empty image"));
    }
    let heat = heatmap.resized(h as usize, w as usize);
    Ok(RgbImage::from_fn(w, h, |x, y| {
        let gray = image.get_pixel(x, y).0[0] as f64;
        let color = colormap(heat[y as usize * w as usize + x as usize]);
        Rgb(color.map(|c| ((1.0 - alpha) * gray + alpha * c as f64).round() as u8))
    }))
}

/// Maps a normalized image tensor (any channel of 1×C×H×W or C×H×W) back to
/// 8-bit grayscale by min/max stretching.
pub fn tensor_to_gray<T: Real>(image: &Tensor<T>) -> Result<GrayImage> {
    let (h, w) = match image.shape() {
        [_, _, h, w] | [_, h, w] => (*h, *w),
        s => return Err(Error::dim(format!("expected an image tensor, got shape {s:?}"))),
    };
    let plane: Vec<f64> = image.data()[..h * w].iter().map(|v| v.to_f64().unwrap_or(0.0)).collect();
    let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([((plane[y as usize * w + x as usize] - lo) / span * 255.0).round() as u8])
    }))
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}
