//! Knee-like grayscale phantoms with grade-controlled joint-space width and
//! osteophyte brightness, plus a planted-square set for localization checks.

use std::path::Path;

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::manifest::{DatasetManifest, GradeRecord};
use crate::backbone::NUM_GRADES;
use crate::error::{Error, Result};

/// Joint-space width as a fraction of the image side, by grade.
pub fn nominal_gap(grade: usize) -> f64 {
    0.20 - 0.035 * grade as f64
}

/// Added osteophyte intensity, by grade.
pub fn nominal_blob(grade: usize) -> f64 {
    0.12 * grade as f64
}

const GAP_JITTER: f64 = 0.01;
const BLOB_JITTER: f64 = 0.03;
const NOISE_SD: f64 = 0.03;

/// Generative parameters actually used for one phantom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomParams {
    pub grade: usize,
    pub gap: f64,
    pub blob: f64,
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub image: GrayImage,
    pub params: PhantomParams,
}

fn sample_rng(seed: u64, grade: usize, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((grade as u64) << 32) | k as u64);
    rng
}

fn to_gray(size: usize, f: impl Fn(usize, usize) -> f64) -> GrayImage {
    GrayImage::from_fn(size as u32, size as u32, |x, y| {
        Luma([(f(x as usize, y as usize).clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// One phantom: femur above and tibia below a dark joint space whose width
/// shrinks with grade, with bright marginal blobs that grow with grade.
pub fn synth_phantom<R: Rng>(grade: usize, size: usize, rng: &mut R) -> Result<SynthSample> {
    if grade >= NUM_GRADES {
        return Err(Error::input(format!("grade {grade} out of range")));
    }
    if size < 16 {
        return Err(Error::input(format!("phantom size {size} below 16")));
    }
    let s = size as f64;
    let gap = nominal_gap(grade) + rng.random_range(-GAP_JITTER..=GAP_JITTER);
    let blob = (nominal_blob(grade) + rng.random_range(-BLOB_JITTER..=BLOB_JITTER)).max(0.0);
    let centre_y = s * (0.5 + rng.random_range(-0.03..=0.03));
    let centre_x = s * (0.5 + rng.random_range(-0.03..=0.03));
    let bone = rng.random_range(0.62..=0.72);
    let curve = rng.random_range(0.04..=0.08);
    let blob_r = 0.06 * s;
    let noise = Normal::new(0.0, NOISE_SD).map_err(|e| Error::input(e.to_string()))?;
    let noise: Vec<f64> = (0..size * size).map(|_| noise.sample(rng)).collect();

    let half_gap = gap * s / 2.0;
    let image = to_gray(size, |x, y| {
        let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
        let u = (xf - centre_x) / s;
        // Condyles bow toward the joint line.
        let bow = curve * s * (1.0 - 4.0 * u * u).max(0.0);
        let femur_edge = centre_y - half_gap - bow * 0.3;
        let tibia_edge = centre_y + half_gap + bow * 0.2;
        let mut v = if yf < femur_edge || yf > tibia_edge {
            bone - 0.15 * (yf / s - 0.5).abs()
        } else {
            0.15
        };
        for side in [-1.0, 1.0] {
            let bx = centre_x + side * 0.32 * s;
            let d2 = (xf - bx).powi(2) + (yf - centre_y).powi(2);
            v += blob * (-d2 / (2.0 * blob_r * blob_r)).exp();
        }
        v + 0.1 + noise[y * size + x]
    });
    Ok(SynthSample {
        image,
        params: PhantomParams { grade, gap, blob },
    })
}

/// `n_per_grade` phantoms of every grade, grade-major. Each sample draws
/// from its own stream, so growing `n_per_grade` keeps earlier samples.
pub fn synth_samples(n_per_grade: usize, size: usize, seed: u64) -> Result<Vec<SynthSample>> {
    if n_per_grade == 0 {
        return Err(Error::input("need at least one phantom per grade"));
    }
    let mut out = Vec::with_capacity(n_per_grade * NUM_GRADES);
    for grade in 0..NUM_GRADES {
        for k in 0..n_per_grade {
            out.push(synth_phantom(grade, size, &mut sample_rng(seed, grade, k))?);
        }
    }
    Ok(out)
}

/// Writes `grade_<g>/img_<k>.png` under `dir` plus `manifest.csv` (without
/// a split column) and returns the manifest.
pub fn synth_dataset(dir: &Path, n_per_grade: usize, size: usize, seed: u64) -> Result<DatasetManifest> {
    let samples = synth_samples(n_per_grade, size, seed)?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("grade_{}/img_{:05}.png", s.params.grade, i % n_per_grade);
        let path = dir.join(&rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        s.image.save_with_format(&path, image::ImageFormat::Png).map_err(|e| Error::Image {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        records.push(GradeRecord::new(rel, s.params.grade));
    }
    let manifest = DatasetManifest::new(records)?.with_root(dir);
    manifest.save(&dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Grade carried by images with the planted square.
pub const PLANTED_GRADE: usize = 4;

/// Image, grade, and the planted square's `(x0, y0, side)` if any.
pub type PlantedSample = (GrayImage, usize, Option<(usize, usize, usize)>);

/// Textured noise images; grade-4 images carry a bright square somewhere
/// inside the top-left quadrant, grade-0 images carry none. Returns
/// `(image, grade, square origin and side)` triples, alternating classes.
pub fn planted_samples(n_per_class: usize, size: usize, seed: u64) -> Result<Vec<PlantedSample>> {
    if size < 16 || !size.is_multiple_of(2) {
        return Err(Error::input(format!("planted image size {size} must be even and ≥ 16")));
    }
    let side = size / 6;
    let half = size / 2;
    let noise = Normal::new(0.0, 0.06).map_err(|e| Error::input(e.to_string()))?;
    let mut out = Vec::with_capacity(2 * n_per_class);
    for k in 0..n_per_class {
        for grade in [0, PLANTED_GRADE] {
            let mut rng = sample_rng(seed ^ 0x9e37_79b9, grade, k);
            let base = rng.random_range(0.25..=0.4);
            let square = (grade == PLANTED_GRADE).then(|| {
                let x0 = rng.random_range(1..half - side);
                let y0 = rng.random_range(1..half - side);
                (x0, y0, side)
            });
            let noise: Vec<f64> = (0..size * size).map(|_| noise.sample(&mut rng)).collect();
            let img = to_gray(size, |x, y| {
                let inside = square.is_some_and(|(x0, y0, s)| (x0..x0 + s).contains(&x) && (y0..y0 + s).contains(&y));
                let texture = 0.05 * ((x as f64 * 0.7).sin() * (y as f64 * 0.45).cos());
                base + texture + noise[y * size + x] + if inside { 0.5 } else { 0.0 }
            });
            out.push((img, grade, square));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_and_blob_are_monotone() {
        for g in 1..NUM_GRADES {
            assert!(nominal_gap(g) + GAP_JITTER < nominal_gap(g - 1) - GAP_JITTER);
            assert!(nominal_blob(g) > nominal_blob(g - 1));
        }
        let s = synth_samples(4, 32, 1).unwrap();
        let max_gap = s.iter().max_by(|a, b| a.params.gap.total_cmp(&b.params.gap)).unwrap();
        let min_gap = s.iter().min_by(|a, b| a.params.gap.total_cmp(&b.params.gap)).unwrap();
        assert_eq!((max_gap.params.grade, min_gap.params.grade), (0, 4));
    }

    #[test]
    fn seeds_differ_labels_match() {
        let a = synth_samples(3, 32, 1).unwrap();
        let b = synth_samples(3, 32, 2).unwrap();
        let labels = |v: &[SynthSample]| v.iter().map(|s| s.params.grade).collect::<Vec<_>>();
        assert_eq!(labels(&a), labels(&b));
        assert!(a.iter().zip(&b).all(|(x, y)| x.image != y.image));
        let again = synth_samples(5, 32, 1).unwrap();
        assert_eq!(again[0].image, a[0].image);
    }

    #[test]
    fn planted_squares_in_quadrant() {
        let v = planted_samples(5, 48, 3).unwrap();
        assert_eq!(v.len(), 10);
        for (_, g, sq) in &v {
            match sq {
                Some((x0, y0, s)) => {
                    assert_eq!(*g, PLANTED_GRADE);
                    assert!(x0 + s <= 24 && y0 + s <= 24);
                }
                None => assert_eq!(*g, 0),
            }
        }
    }
}
