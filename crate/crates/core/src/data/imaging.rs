use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::kernels::bilinear_forward;
use crate::tensor::Tensor;

/// Variance floor applied before dividing by the standard deviation.
pub const VARIANCE_FLOOR: f64 = 1e-6;

pub type Gray16Image = ImageBuffer<Luma<u16>, Vec<u16>>;

/// Decodes any 8- or 16-bit image file into intensities in [0, 1].
pub fn decode_gray(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(gray_plane(&img))
}

/// Row-major luminance of `img` scaled to [0, 1]; `(height, width, data)`.
pub fn gray_plane(img: &DynamicImage) -> (usize, usize, Vec<f64>) {
    let luma = img.to_luma16();
    let (w, h) = luma.dimensions();
    let data = luma.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
    (h as usize, w as usize, data)
}

/// Bilinear resize to `size`×`size`, then per-image zero mean and unit
/// variance. Returns a 1×S×S tensor.
pub fn prepare_plane(h: usize, w: usize, data: &[f64], size: usize) -> Result<Tensor<f32>> {
    if h == 0 || w == 0 || size == 0 {
        return Err(Error::input("image has a zero-length side"));
    }
    let resized = if (h, w) == (size, size) {
        data.to_vec()
    } else {
        bilinear_forward(data, 1, (h, w), (size, size))
    };
    if resized.iter().all(|&v| v == resized[0]) {
        // Skip the mean's rounding residue so flat images map to exact zeros.
        return Ok(Tensor::zeros(&[1, size, size]));
    }
    let n = resized.len() as f64;
    let mean = resized.iter().sum::<f64>() / n;
    let var = resized.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.max(VARIANCE_FLOOR).sqrt();
    let out = resized.iter().map(|v| ((v - mean) / std) as f32).collect();
    Tensor::new(&[1, size, size], out)
}

pub fn load_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let (h, w, data) = decode_gray(path)?;
    prepare_plane(h, w, &data, size).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn prepare_image(img: &DynamicImage, size: usize) -> Result<Tensor<f32>> {
    let (h, w, data) = gray_plane(img);
    prepare_plane(h, w, &data, size)
}

/// Repeats a 1×S×S plane into `channels`×S×S.
pub fn replicate_channels(plane: &Tensor<f32>, channels: usize) -> Result<Tensor<f32>> {
    let &[1, h, w] = plane.shape() else {
        return Err(Error::dim(format!("expected a 1×H×W plane, got {:?}", plane.shape())));
    };
    let data = plane.data().repeat(channels);
    Tensor::new(&[channels, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::GrayImage;

    #[test]
    fn constant_image_is_zero() {
        let t = prepare_plane(4, 4, &[0.3; 16], 8).unwrap();
        assert_eq!(t.shape(), &[1, 8, 8]);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_moments() {
        let data: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        let t = prepare_plane(8, 8, &data, 8).unwrap();
        let n = 64.0;
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn bit_depths_agree() {
        let g8 = GrayImage::from_fn(20, 20, |x, y| Luma([((x * 11 + y * 5) % 256) as u8]));
        let g16 = Gray16Image::from_fn(20, 20, |x, y| Luma([g8.get_pixel(x, y).0[0] as u16 * 257]));
        let a = prepare_image(&DynamicImage::ImageLuma8(g8), 16).unwrap();
        let b = prepare_image(&DynamicImage::ImageLuma16(g16), 16).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-2));
        assert_eq!(replicate_channels(&a, 3).unwrap().shape(), &[3, 16, 16]);
    }
}
