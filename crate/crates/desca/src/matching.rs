//! Dense matching on descriptor fields: cost volumes, winner-takes-all
//! disparities, scanline cost profiles, and bad-pixel evaluation.
//!
//! Matching cost is the L2 distance between the per-pixel descriptors
//! (monotone with cosine distance on unit vectors). Disparities are integer
//! and positive: left pixel `(x, y)` corresponds to right pixel `(x-d, y)`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptors::DescriptorField;
use crate::error::{DescaError, Result};
use crate::filter::box_mean;
use crate::image::Image;
use crate::io::{load_pfm_raw, save_pfm};

/// Matching cost per pixel and disparity candidate; out-of-bounds
/// correspondences carry an infinite sentinel.
pub struct CostVolume {
    width: usize,
    height: usize,
    d_max: usize,
    costs: Vec<f32>,
}

impl CostVolume {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn d_max(&self) -> usize {
        self.d_max
    }

    #[inline]
    pub fn cost(&self, x: usize, y: usize, d: usize) -> f32 {
        self.costs[(y * self.width + x) * (self.d_max + 1) + d]
    }
}

/// Integer disparities with a validity mask.
#[derive(Debug, Clone)]
pub struct DisparityMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
    pub validity: Vec<bool>,
}

impl DisparityMap {
    pub fn constant(width: usize, height: usize, value: f32) -> Self {
        DisparityMap {
            width,
            height,
            data: vec![value; width * height],
            validity: vec![true; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f32> {
        let i = y * self.width + x;
        self.validity[i].then(|| self.data[i])
    }

    pub fn save_pfm(&self, path: &Path) -> Result<()> {
        save_pfm(
            self.width,
            self.height,
            &self.data,
            Some(&self.validity),
            path,
        )
    }

    pub fn load_pfm(path: &Path) -> Result<Self> {
        let raw = load_pfm_raw(path)?;
        Ok(DisparityMap {
            width: raw.width,
            height: raw.height,
            data: raw.data,
            validity: raw.validity,
        })
    }
}

/// Bad-pixel evaluation summary, serialized as JSON by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub bad_pixel_rate: f64,
    pub threshold: f64,
    pub evaluated_count: usize,
}

fn check_comparable(left: &DescriptorField, right: &DescriptorField) -> Result<()> {
    if left.width() != right.width() || left.height() != right.height() {
        return Err(DescaError::Contract(format!(
            "field size mismatch: {}x{} vs {}x{}",
            left.width(),
            left.height(),
            right.width(),
            right.height()
        )));
    }
    if left.kind() != right.kind() || left.len() != right.len() {
        return Err(DescaError::Contract(
            "descriptor kinds differ between fields".into(),
        ));
    }
    if left.pattern_digest() != right.pattern_digest() {
        return Err(DescaError::Contract(
            "pattern digests differ: descriptors are not comparable".into(),
        ));
    }
    Ok(())
}

#[inline]
fn l2_distance(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    acc.sqrt() as f32
}

/// Builds the left-to-right cost volume:
/// `cost(x, y, d) = || D_left(x, y) - D_right(x-d, y) ||_2`,
/// with an infinite sentinel where `x - d < 0`.
pub fn build_cost_volume(
    left: &DescriptorField,
    right: &DescriptorField,
    d_max: usize,
) -> Result<CostVolume> {
    check_comparable(left, right)?;
    let (w, h) = (left.width(), left.height());
    let stride = d_max + 1;
    let mut costs = vec![f32::INFINITY; w * h * stride];
    costs
        .par_chunks_mut(w * stride)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..w {
                let dl = left.get(x, y);
                for d in 0..=d_max.min(x) {
                    row[x * stride + d] = l2_distance(dl, right.get(x - d, y));
                }
            }
        });
    Ok(CostVolume {
        width: w,
        height: h,
        d_max,
        costs,
    })
}

/// Per-pixel argmin over the cost volume. Ties break toward the smaller
/// disparity; pixels whose candidates are all infinite become invalid.
pub fn wta_disparity(volume: &CostVolume) -> DisparityMap {
    let (w, h) = (volume.width, volume.height);
    let mut map = DisparityMap::constant(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let mut best = f32::INFINITY;
            let mut best_d = None;
            for d in 0..=volume.d_max {
                let c = volume.cost(x, y, d);
                if c < best {
                    best = c;
                    best_d = Some(d);
                }
            }
            let i = y * w + x;
            match best_d {
                Some(d) => map.data[i] = d as f32,
                None => {
                    map.data[i] = 0.0;
                    map.validity[i] = false;
                }
            }
        }
    }
    map
}

/// Matching cost between `D_left(pixel)` and every right descriptor on
/// `row`, in x order. This is the scanline profile used to visualize how
/// discriminative a descriptor is.
pub fn cost_profile(
    left: &DescriptorField,
    right: &DescriptorField,
    pixel: (usize, usize),
    row: usize,
) -> Result<Vec<(usize, f64)>> {
    check_comparable(left, right)?;
    if pixel.0 >= left.width() || pixel.1 >= left.height() || row >= left.height() {
        return Err(DescaError::Contract(format!(
            "pixel ({}, {}) or row {} outside {}x{}",
            pixel.0,
            pixel.1,
            row,
            left.width(),
            left.height()
        )));
    }
    let reference = left.get(pixel.0, pixel.1);
    Ok((0..right.width())
        .map(|x| (x, l2_distance(reference, right.get(x, row)) as f64))
        .collect())
}

/// Fraction of evaluated pixels whose disparity error exceeds `threshold`.
/// A pixel is evaluated when the mask admits it and the ground truth is
/// valid; an invalid prediction at an evaluated pixel counts as bad.
pub fn bad_pixel_rate(
    pred: &DisparityMap,
    gt: &DisparityMap,
    mask: Option<&[bool]>,
    threshold: f64,
) -> Result<EvalReport> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(DescaError::Contract(format!(
            "disparity size mismatch: {}x{} vs {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    if let Some(m) = mask {
        if m.len() != gt.data.len() {
            return Err(DescaError::Contract("mask length mismatch".into()));
        }
    }
    let mut evaluated = 0usize;
    let mut bad = 0usize;
    for i in 0..gt.data.len() {
        if !gt.validity[i] {
            continue;
        }
        if let Some(m) = mask {
            if !m[i] {
                continue;
            }
        }
        evaluated += 1;
        let is_bad = match pred.validity[i] {
            true => (pred.data[i] as f64 - gt.data[i] as f64).abs() > threshold,
            false => true,
        };
        if is_bad {
            bad += 1;
        }
    }
    if evaluated == 0 {
        return Err(DescaError::EmptyEvaluation);
    }
    Ok(EvalReport {
        bad_pixel_rate: bad as f64 / evaluated as f64,
        threshold,
        evaluated_count: evaluated,
    })
}

/// Raw-intensity baseline: windowed SSD cost volume straight on pixel
/// values, no descriptors. Used to quantify how much the self-similarity
/// descriptors buy under cross-modal distortions.
pub fn ssd_cost_volume(
    left: &Image,
    right: &Image,
    window_radius: usize,
    d_max: usize,
) -> Result<CostVolume> {
    if left.width() != right.width() || left.height() != right.height() {
        return Err(DescaError::Contract("image size mismatch".into()));
    }
    let (w, h) = (left.width(), left.height());
    let stride = d_max + 1;
    let n = ((2 * window_radius + 1) * (2 * window_radius + 1)) as f32;
    let mut costs = vec![f32::INFINITY; w * h * stride];
    for d in 0..=d_max {
        // Mean of (left(x) - right(x-d))^2 over the window, box-filtered.
        let diff_sq = Image::from_fn(w, h, |x, y| {
            if x < d {
                0.0
            } else {
                let v = left.get(x, y) - right.get(x - d, y);
                v * v
            }
        });
        let averaged = box_mean(&diff_sq, window_radius);
        for y in 0..h {
            for x in d..w {
                costs[(y * w + x) * stride + d] = averaged.get(x, y) * n;
            }
        }
    }
    Ok(CostVolume {
        width: w,
        height: h,
        d_max,
        costs,
    })
}
