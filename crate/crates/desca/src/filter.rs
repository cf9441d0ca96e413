//! Edge-aware weighted-mean primitives.
//!
//! Every descriptor in this crate reduces patch statistics to windowed
//! weighted means. Two weighting schemes are supported:
//!
//! * `Uniform` — plain box means, computed with an integral image in O(1)
//!   per pixel independent of the radius.
//! * `Guided` — the guided filter in its closed a/b form, self-guided by the
//!   reference image. Its implied kernel rows are normalized (they sum to 1)
//!   and edge-aware; smoothness is controlled by `epsilon`.
//!
//! Internals accumulate in `f64`; public images stay `f32`.

use serde::{Deserialize, Serialize};

use crate::error::{DescaError, Result};
use crate::image::Image;

/// Weighting scheme for patch means and self-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FilterWeights {
    Uniform { radius: usize },
    Guided { radius: usize, epsilon: f64 },
}

impl FilterWeights {
    pub fn uniform(radius: usize) -> Self {
        FilterWeights::Uniform { radius }
    }

    pub fn guided(radius: usize, epsilon: f64) -> Self {
        FilterWeights::Guided { radius, epsilon }
    }

    pub fn radius(&self) -> usize {
        match *self {
            FilterWeights::Uniform { radius } => radius,
            FilterWeights::Guided { radius, .. } => radius,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.radius() < 1 {
            return Err(DescaError::Contract("filter radius must be >= 1".into()));
        }
        if let FilterWeights::Guided { epsilon, .. } = *self {
            if !(epsilon > 0.0) {
                return Err(DescaError::Contract(
                    "guided epsilon must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Dense f64 grid used for all filter internals.
#[derive(Debug, Clone)]
pub(crate) struct Plane {
    pub w: usize,
    pub h: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(w: usize, h: usize) -> Self {
        Plane {
            w,
            h,
            data: vec![0.0; w * h],
        }
    }

    pub fn from_image(img: &Image) -> Self {
        Plane {
            w: img.width(),
            h: img.height(),
            data: img.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn to_image(&self) -> Image {
        Image::from_fn(self.w, self.h, |x, y| self.data[y * self.w + x] as f32)
    }

    pub fn zip(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        debug_assert_eq!((self.w, self.h), (other.w, other.h));
        Plane {
            w: self.w,
            h: self.h,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }
}

/// Box mean with replicate padding, O(1) per pixel via an integral image.
pub(crate) fn box_mean_plane(src: &Plane, radius: usize) -> Plane {
    let (w, h, r) = (src.w, src.h, radius);
    let (pw, ph) = (w + 2 * r, h + 2 * r);

    // Integral of the replicate-padded plane, built without materializing it.
    let mut integral = vec![0.0f64; (pw + 1) * (ph + 1)];
    for py in 0..ph {
        let sy = (py as isize - r as isize).clamp(0, h as isize - 1) as usize;
        let mut row_sum = 0.0;
        for px in 0..pw {
            let sx = (px as isize - r as isize).clamp(0, w as isize - 1) as usize;
            row_sum += src.data[sy * w + sx];
            integral[(py + 1) * (pw + 1) + (px + 1)] =
                integral[py * (pw + 1) + (px + 1)] + row_sum;
        }
    }

    let side = 2 * r + 1;
    let norm = 1.0 / (side * side) as f64;
    let mut out = Plane::new(w, h);
    for y in 0..h {
        let (y0, y1) = (y, y + side);
        for x in 0..w {
            let (x0, x1) = (x, x + side);
            let sum = integral[y1 * (pw + 1) + x1] - integral[y0 * (pw + 1) + x1]
                - integral[y1 * (pw + 1) + x0]
                + integral[y0 * (pw + 1) + x0];
            out.data[y * w + x] = sum * norm;
        }
    }
    out
}

/// Guided filter with a fixed guide, reusable across many input planes.
#[derive(Debug, Clone)]
pub(crate) struct GuidedFilter {
    radius: usize,
    epsilon: f64,
    guide: Plane,
    mean_guide: Plane,
    var_guide: Plane,
}

impl GuidedFilter {
    pub fn new(guide: Plane, radius: usize, epsilon: f64) -> Self {
        let mean_guide = box_mean_plane(&guide, radius);
        let mean_sq = box_mean_plane(&guide.zip(&guide, |a, b| a * b), radius);
        let var_guide = mean_sq.zip(&mean_guide, |sq, m| sq - m * m);
        GuidedFilter {
            radius,
            epsilon,
            guide,
            mean_guide,
            var_guide,
        }
    }

    pub fn apply(&self, input: &Plane) -> Plane {
        let mean_p = box_mean_plane(input, self.radius);
        let mean_ip = box_mean_plane(&self.guide.zip(input, |i, p| i * p), self.radius);
        let mut a = Plane::new(input.w, input.h);
        let mut b = Plane::new(input.w, input.h);
        for i in 0..input.data.len() {
            let cov = mean_ip.data[i] - self.mean_guide.data[i] * mean_p.data[i];
            let av = cov / (self.var_guide.data[i] + self.epsilon);
            a.data[i] = av;
            b.data[i] = mean_p.data[i] - av * self.mean_guide.data[i];
        }
        let mean_a = box_mean_plane(&a, self.radius);
        let mean_b = box_mean_plane(&b, self.radius);
        let mut out = Plane::new(input.w, input.h);
        for i in 0..out.data.len() {
            out.data[i] = mean_a.data[i] * self.guide.data[i] + mean_b.data[i];
        }
        out
    }
}

/// A prepared weighted-mean operator: one construction per (guide, weights),
/// then arbitrarily many plane applications.
pub(crate) enum MeanEngine {
    Box { radius: usize },
    Guided(Box<GuidedFilter>),
}

impl MeanEngine {
    pub fn new(guide: &Plane, weights: &FilterWeights) -> MeanEngine {
        match *weights {
            FilterWeights::Uniform { radius } => MeanEngine::Box { radius },
            FilterWeights::Guided { radius, epsilon } => {
                MeanEngine::Guided(Box::new(GuidedFilter::new(guide.clone(), radius, epsilon)))
            }
        }
    }

    pub fn apply(&self, plane: &Plane) -> Plane {
        match self {
            MeanEngine::Box { radius } => box_mean_plane(plane, *radius),
            MeanEngine::Guided(gf) => gf.apply(plane),
        }
    }
}

/// Windowed mean over the `(2*radius+1)^2` neighborhood with replicate
/// padding, O(1) per pixel independent of the radius.
pub fn box_mean(img: &Image, radius: usize) -> Image {
    box_mean_plane(&Plane::from_image(img), radius).to_image()
}

/// Single-channel guided filter of `img` steered by `guide`.
pub fn guided_mean(img: &Image, guide: &Image, radius: usize, epsilon: f64) -> Result<Image> {
    if img.width() != guide.width() || img.height() != guide.height() {
        return Err(DescaError::Contract(format!(
            "guided_mean dimension mismatch: {}x{} vs {}x{}",
            img.width(),
            img.height(),
            guide.width(),
            guide.height()
        )));
    }
    let gf = GuidedFilter::new(Plane::from_image(guide), radius, epsilon);
    Ok(gf.apply(&Plane::from_image(img)).to_image())
}
