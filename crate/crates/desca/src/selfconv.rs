//! Self-convolutional correlation surfaces.
//!
//! The similarity between two patches is a weighted, mean-subtracted,
//! normalized cross-correlation whose weights come from [`FilterWeights`]
//! and are centered on the first (anchor) patch. Two routes compute it:
//!
//! * **Direct** — per patch pair. Uniform weights use textbook patch sums;
//!   guided weights materialize the explicit guided-filter kernel row for
//!   the anchor and apply it term by term. This route is the correctness
//!   reference and is deliberately simple.
//! * **Fast** — dense. For every required displacement `delta`, five
//!   weighted-mean planes (`f`, `f^2`, shifted `f`, shifted `f^2`, product)
//!   are computed once over the whole image with O(1)-per-pixel filtering,
//!   assembled into a correlation plane, and shared by every patch pair that
//!   maps to the same displacement. Per-pixel correlation volumes then
//!   reduce to index remapping: the surface entry for kernel `r_k` and
//!   window offset `j` is the plane for `j - r_k` read at `pixel + r_k`.
//!
//! Displacements span at most the doubled support window. Patches whose
//! weighted variance is below [`DEGENERATE_VARIANCE`] correlate as 0.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DescaError, Result};
use crate::filter::{FilterWeights, MeanEngine, Plane};
use crate::geometry::{Offset, SamplingPattern};
use crate::image::Image;

/// Patches with weighted variance below this are treated as constant and
/// correlate as the 0 sentinel ("no evidence").
pub const DEGENERATE_VARIANCE: f64 = 1e-10;

/// Selects between the dense plane-based path and the per-pair direct path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComputePath {
    Fast,
    Direct,
}

impl std::str::FromStr for ComputePath {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "fast" => Ok(ComputePath::Fast),
            "direct" => Ok(ComputePath::Direct),
            other => Err(format!("unknown path '{other}' (expected fast|direct)")),
        }
    }
}

/// Dense correlation planes, one per displacement.
///
/// Planes are stored with an interior working margin (`pad`) so that volume
/// remapping may read anchors up to one support radius outside the image;
/// the nominal plane is the `width x height` crop.
pub struct OffsetCorrelationMaps {
    width: usize,
    height: usize,
    pad: usize,
    plane_w: usize,
    offsets: Vec<Offset>,
    index: HashMap<Offset, usize>,
    planes: Vec<Vec<f32>>,
}

impl OffsetCorrelationMaps {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// How far outside the image plane values may be read.
    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn offsets(&self) -> &[Offset] {
        &self.offsets
    }

    pub fn delta_index(&self, delta: Offset) -> Option<usize> {
        self.index.get(&delta).copied()
    }

    /// Correlation `C(F_p, F_(p+delta))` for `p = (x, y)` in image
    /// coordinates; `p` may lie up to `pad` pixels outside the image.
    #[inline]
    pub fn value_at(&self, plane: usize, x: isize, y: isize) -> f32 {
        let px = (x + self.pad as isize) as usize;
        let py = (y + self.pad as isize) as usize;
        debug_assert!(px < self.plane_w && py < self.planes[plane].len() / self.plane_w);
        self.planes[plane][py * self.plane_w + px]
    }

    /// The nominal `width x height` plane for one displacement.
    pub fn plane_crop(&self, plane: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(self.value_at(plane, x as isize, y as isize));
            }
        }
        out
    }
}

/// The deduplicated displacement set `{j - r_k}` needed to remap every
/// kernel surface, ordered deterministically.
pub fn required_deltas(pattern: &SamplingPattern) -> Vec<Offset> {
    let support = pattern.support_offsets();
    let mut set = HashSet::new();
    for rk in &pattern.kernels {
        for j in &support {
            set.insert(Offset::new(j.dx - rk.dx, j.dy - rk.dy));
        }
    }
    let mut deltas: Vec<Offset> = set.into_iter().collect();
    deltas.sort_by_key(|d| (d.dy, d.dx));
    deltas
}

/// Builds the correlation planes required by `pattern`.
pub fn build_offset_maps(
    img: &Image,
    pattern: &SamplingPattern,
    weights: &FilterWeights,
) -> Result<OffsetCorrelationMaps> {
    build_offset_maps_for(
        img,
        weights,
        required_deltas(pattern),
        pattern.params.support_radius(),
    )
}

/// Same as [`build_offset_maps`] with an explicit displacement list; used
/// when only a sparse set of pairs is needed (DASC).
pub fn build_offset_maps_for(
    img: &Image,
    weights: &FilterWeights,
    deltas: Vec<Offset>,
    anchor_margin: usize,
) -> Result<OffsetCorrelationMaps> {
    weights.validate()?;
    let r_f = weights.radius();
    // Margin so every read below — anchors one support radius out, shifted
    // patches, and two chained box passes of the guided filter — sees real
    // clamped-image statistics rather than plane-edge artifacts.
    let pad = anchor_margin + 4 * r_f;
    let (w, h) = (img.width(), img.height());
    let (pw, ph) = (w + 2 * pad, h + 2 * pad);

    let ext = clamped_plane(img, pad, Offset::new(0, 0));
    let engine = MeanEngine::new(&ext, weights);
    let mean_f = engine.apply(&ext);
    let mean_ff = engine.apply(&ext.zip(&ext, |a, b| a * b));

    let planes: Vec<Vec<f32>> = deltas
        .par_iter()
        .map(|&delta| {
            let shifted = clamped_plane(img, pad, delta);
            let mean_s = engine.apply(&shifted);
            let mean_ss = engine.apply(&shifted.zip(&shifted, |a, b| a * b));
            let mean_fs = engine.apply(&ext.zip(&shifted, |a, b| a * b));
            let mut plane = vec![0.0f32; pw * ph];
            for i in 0..plane.len() {
                let var_a = mean_ff.data[i] - mean_f.data[i] * mean_f.data[i];
                let var_b = mean_ss.data[i] - mean_s.data[i] * mean_s.data[i];
                if var_a >= DEGENERATE_VARIANCE && var_b >= DEGENERATE_VARIANCE {
                    let num = mean_fs.data[i] - mean_f.data[i] * mean_s.data[i];
                    plane[i] = (num / (var_a.sqrt() * var_b.sqrt())).clamp(-1.0, 1.0) as f32;
                }
            }
            plane
        })
        .collect();

    let index = deltas
        .iter()
        .enumerate()
        .map(|(i, &d)| (d, i))
        .collect();
    Ok(OffsetCorrelationMaps {
        width: w,
        height: h,
        pad,
        plane_w: pw,
        offsets: deltas,
        index,
        planes,
    })
}

/// Extended grid whose entry at plane coordinate `p` is the clamped image
/// sample at `p - pad + delta` — every boundary effect reduces to a single
/// clamp against the original image.
pub(crate) fn clamped_plane(img: &Image, pad: usize, delta: Offset) -> Plane {
    let (w, h) = (img.width(), img.height());
    let (pw, ph) = (w + 2 * pad, h + 2 * pad);
    let mut plane = Plane::new(pw, ph);
    let p = pad as isize;
    for py in 0..ph as isize {
        for px in 0..pw as isize {
            plane.data[(py * pw as isize + px) as usize] =
                img.sample(px - p + delta.dx as isize, py - p + delta.dy as isize) as f64;
        }
    }
    plane
}

/// A per-pixel stack of correlation surfaces: entry `(k, j)` holds
/// `C(F_(r_k), F_j)` for kernel `k` and support-window offset `j` (in
/// [`SamplingPattern::support_offsets`] order).
#[derive(Debug, Clone)]
pub struct VolumeSlice {
    pub n_kernels: usize,
    pub n_offsets: usize,
    values: Vec<f32>,
}

impl VolumeSlice {
    pub fn new(n_kernels: usize, n_offsets: usize) -> Self {
        VolumeSlice {
            n_kernels,
            n_offsets,
            values: vec![0.0; n_kernels * n_offsets],
        }
    }

    #[inline]
    pub fn get(&self, kernel: usize, offset: usize) -> f32 {
        self.values[kernel * self.n_offsets + offset]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn kernel_surface(&self, kernel: usize) -> &[f32] {
        &self.values[kernel * self.n_offsets..(kernel + 1) * self.n_offsets]
    }
}

/// Precomputed remap indices: for each `(k, j)` the plane holding
/// displacement `j - r_k`, read at `pixel + r_k`.
pub struct RemapTable {
    pub n_kernels: usize,
    pub n_offsets: usize,
    anchors: Vec<Offset>,
    plane_idx: Vec<u32>,
}

impl RemapTable {
    pub fn new(maps: &OffsetCorrelationMaps, pattern: &SamplingPattern) -> Result<Self> {
        let support = pattern.support_offsets();
        let mut plane_idx = Vec::with_capacity(pattern.kernels.len() * support.len());
        for rk in &pattern.kernels {
            for j in &support {
                let delta = Offset::new(j.dx - rk.dx, j.dy - rk.dy);
                let idx = maps.delta_index(delta).ok_or_else(|| {
                    DescaError::Contract(format!(
                        "maps are missing displacement {delta:?}; were they built for this pattern?"
                    ))
                })?;
                plane_idx.push(idx as u32);
            }
        }
        Ok(RemapTable {
            n_kernels: pattern.kernels.len(),
            n_offsets: support.len(),
            anchors: pattern.kernels.clone(),
            plane_idx,
        })
    }

    /// Fills `out` (length `n_kernels * n_offsets`) with the volume at `(x, y)`.
    pub fn fill(&self, maps: &OffsetCorrelationMaps, x: isize, y: isize, out: &mut [f32]) {
        debug_assert_eq!(out.len(), self.plane_idx.len());
        for (k, rk) in self.anchors.iter().enumerate() {
            let (ax, ay) = (x + rk.dx as isize, y + rk.dy as isize);
            let row = &mut out[k * self.n_offsets..(k + 1) * self.n_offsets];
            let idx = &self.plane_idx[k * self.n_offsets..(k + 1) * self.n_offsets];
            for (slot, &plane) in row.iter_mut().zip(idx) {
                *slot = maps.value_at(plane as usize, ax, ay);
            }
        }
    }
}

/// Reconstructs the full correlation volume at one pixel from the planes.
pub fn remap_to_volume(
    maps: &OffsetCorrelationMaps,
    pattern: &SamplingPattern,
    pixel: (usize, usize),
) -> Result<VolumeSlice> {
    let table = RemapTable::new(maps, pattern)?;
    let mut slice = VolumeSlice::new(table.n_kernels, table.n_offsets);
    table.fill(maps, pixel.0 as isize, pixel.1 as isize, slice.values_mut());
    Ok(slice)
}

/// Weighted zero-mean normalized cross-correlation between the patch at
/// `center_a` and the patch at `center_b`, weights centered on `center_a`.
/// Centers may lie outside the image (patch samples clamp to the border).
/// Returns a value in `[-1, 1]`, or 0 when either patch is degenerate.
pub fn correlate_patches_direct(
    img: &Image,
    center_a: (isize, isize),
    center_b: (isize, isize),
    weights: &FilterWeights,
) -> f64 {
    let delta = Offset::new(
        (center_b.0 - center_a.0) as i32,
        (center_b.1 - center_a.1) as i32,
    );
    match *weights {
        FilterWeights::Uniform { radius } => correlate_uniform(img, center_a, delta, radius),
        FilterWeights::Guided { radius, epsilon } => {
            let row = guided_kernel_row(img, center_a, radius, epsilon);
            correlate_with_row(img, center_a, delta, &row, radius)
        }
    }
}

fn correlate_uniform(img: &Image, anchor: (isize, isize), delta: Offset, radius: usize) -> f64 {
    let r = radius as isize;
    let n = ((2 * r + 1) * (2 * r + 1)) as f64;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
    for dy in -r..=r {
        for dx in -r..=r {
            let a = img.sample(anchor.0 + dx, anchor.1 + dy) as f64;
            let b = img.sample(
                anchor.0 + dx + delta.dx as isize,
                anchor.1 + dy + delta.dy as isize,
            ) as f64;
            sa += a;
            sb += b;
            saa += a * a;
            sbb += b * b;
            sab += a * b;
        }
    }
    let (ma, mb) = (sa / n, sb / n);
    let var_a = saa / n - ma * ma;
    let var_b = sbb / n - mb * mb;
    if var_a < DEGENERATE_VARIANCE || var_b < DEGENERATE_VARIANCE {
        return 0.0;
    }
    ((sab / n - ma * mb) / (var_a.sqrt() * var_b.sqrt())).clamp(-1.0, 1.0)
}

/// One explicit row of the guided-filter kernel, centered at `p`:
///
/// `w(p, q) = 1/n^2 * sum over shared windows q' of
///            1 + (I_p - mu(q'))(I_q - mu(q')) / (var(q') + eps)`
///
/// laid out row-major over `|q - p|_inf <= 2*radius`. The row sums to 1.
pub(crate) fn guided_kernel_row(
    img: &Image,
    p: (isize, isize),
    radius: usize,
    epsilon: f64,
) -> Vec<f64> {
    let r = radius as isize;
    let n = ((2 * r + 1) * (2 * r + 1)) as f64;
    let side = (4 * radius + 1) as isize;

    // Window statistics for every window center that contains p.
    let mut stats = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
    for wy in -r..=r {
        for wx in -r..=r {
            let (mut s, mut ss) = (0.0f64, 0.0f64);
            for dy in -r..=r {
                for dx in -r..=r {
                    let v = img.sample(p.0 + wx + dx, p.1 + wy + dy) as f64;
                    s += v;
                    ss += v * v;
                }
            }
            let mean = s / n;
            stats.push((mean, ss / n - mean * mean));
        }
    }

    let ip = img.sample(p.0, p.1) as f64;
    let mut row = vec![0.0f64; (side * side) as usize];
    for qy in -2 * r..=2 * r {
        for qx in -2 * r..=2 * r {
            let iq = img.sample(p.0 + qx, p.1 + qy) as f64;
            let mut acc = 0.0f64;
            for wy in -r..=r {
                for wx in -r..=r {
                    // The window at q' must contain both p and q.
                    if (qx - wx).abs() <= r && (qy - wy).abs() <= r {
                        let (mean, var) = stats[((wy + r) * (2 * r + 1) + (wx + r)) as usize];
                        acc += 1.0 + (ip - mean) * (iq - mean) / (var + epsilon);
                    }
                }
            }
            row[((qy + 2 * r) * side + (qx + 2 * r)) as usize] = acc / (n * n);
        }
    }
    row
}

fn correlate_with_row(
    img: &Image,
    anchor: (isize, isize),
    delta: Offset,
    row: &[f64],
    radius: usize,
) -> f64 {
    let r2 = 2 * radius as isize;
    let side = (4 * radius + 1) as isize;
    let (mut ga, mut gb, mut gaa, mut gbb, mut gab) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
    for qy in -r2..=r2 {
        for qx in -r2..=r2 {
            let w = row[((qy + r2) * side + (qx + r2)) as usize];
            let a = img.sample(anchor.0 + qx, anchor.1 + qy) as f64;
            let b = img.sample(
                anchor.0 + qx + delta.dx as isize,
                anchor.1 + qy + delta.dy as isize,
            ) as f64;
            ga += w * a;
            gb += w * b;
            gaa += w * a * a;
            gbb += w * b * b;
            gab += w * a * b;
        }
    }
    let var_a = gaa - ga * ga;
    let var_b = gbb - gb * gb;
    if var_a < DEGENERATE_VARIANCE || var_b < DEGENERATE_VARIANCE {
        return 0.0;
    }
    ((gab - ga * gb) / (var_a.sqrt() * var_b.sqrt())).clamp(-1.0, 1.0)
}

/// Per-pair correlation engine for the direct path, with anchor-row caching
/// so dense direct runs stay tractable on small crops.
pub struct DirectCorrelator<'a> {
    img: &'a Image,
    weights: FilterWeights,
    row_cache: HashMap<(isize, isize), Vec<f64>>,
}

impl<'a> DirectCorrelator<'a> {
    pub fn new(img: &'a Image, weights: FilterWeights) -> Self {
        DirectCorrelator {
            img,
            weights,
            row_cache: HashMap::new(),
        }
    }

    pub fn correlate(&mut self, anchor: (isize, isize), delta: Offset) -> f64 {
        match self.weights {
            FilterWeights::Uniform { radius } => {
                correlate_uniform(self.img, anchor, delta, radius)
            }
            FilterWeights::Guided { radius, epsilon } => {
                let img = self.img;
                let row = self
                    .row_cache
                    .entry(anchor)
                    .or_insert_with(|| guided_kernel_row(img, anchor, radius, epsilon));
                correlate_with_row(img, anchor, delta, row, radius)
            }
        }
    }

    /// Full correlation volume at one pixel, straight from patch pairs.
    pub fn volume_at(&mut self, pattern: &SamplingPattern, x: isize, y: isize) -> VolumeSlice {
        let support = pattern.support_offsets();
        let mut slice = VolumeSlice::new(pattern.kernels.len(), support.len());
        for (k, rk) in pattern.kernels.iter().enumerate() {
            let anchor = (x + rk.dx as isize, y + rk.dy as isize);
            for (ji, j) in support.iter().enumerate() {
                let delta = Offset::new(j.dx - rk.dx, j.dy - rk.dy);
                slice.values_mut()[k * support.len() + ji] =
                    self.correlate(anchor, delta) as f32;
            }
        }
        slice
    }
}

#[derive(Serialize)]
struct MapsIndexEntry {
    dx: i32,
    dy: i32,
    file: String,
}

#[derive(Serialize)]
struct MapsIndex {
    width: usize,
    height: usize,
    planes: Vec<MapsIndexEntry>,
}

/// Debug dump: one PFM per displacement plane plus a JSON index.
pub fn dump_offset_maps(maps: &OffsetCorrelationMaps, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DescaError::io(dir, e))?;
    let mut entries = Vec::new();
    for (i, off) in maps.offsets().iter().enumerate() {
        let file = format!("delta_{}_{}.pfm", off.dx, off.dy);
        let crop = maps.plane_crop(i);
        crate::io::save_pfm(maps.width(), maps.height(), &crop, None, &dir.join(&file))?;
        entries.push(MapsIndexEntry {
            dx: off.dx,
            dy: off.dy,
            file,
        });
    }
    let index = MapsIndex {
        width: maps.width(),
        height: maps.height(),
        planes: entries,
    };
    let json = serde_json::to_string_pretty(&index).expect("index serialization cannot fail");
    std::fs::write(dir.join("index.json"), json).map_err(|e| DescaError::io(dir, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DescriptorParams;

    fn rng_image(w: usize, h: usize, seed: u64) -> Image {
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
        Image::from_fn(w, h, |_, _| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f32 / (1u64 << 53) as f32
        })
    }

    fn small_pattern(seed: u64) -> SamplingPattern {
        SamplingPattern::build(DescriptorParams {
            num_kernels: 8,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn self_correlation_is_one() {
        let img = rng_image(16, 16, 1);
        for weights in [FilterWeights::uniform(2), FilterWeights::guided(2, 0.0009)] {
            let c = correlate_patches_direct(&img, (8, 8), (8, 8), &weights);
            assert!((c - 1.0).abs() < 1e-9, "{weights:?}: {c}");
        }
    }

    #[test]
    fn intensity_shift_cancels_under_uniform_weights() {
        // Patch at (15, 6) equals the patch at (6, 6) plus a constant.
        let base = rng_image(11, 13, 3);
        let img = Image::from_fn(20, 13, |x, y| {
            if x < 10 {
                base.get(x, y) * 0.7
            } else {
                base.get(x - 9, y) * 0.7 + 0.2
            }
        });
        let c = correlate_patches_direct(&img, (6, 6), (15, 6), &FilterWeights::uniform(2));
        assert!((c - 1.0).abs() < 1e-9, "{c}");
    }

    #[test]
    fn uniform_direct_matches_two_pass_textbook_ncc() {
        let img = rng_image(9, 9, 5);
        let weights = FilterWeights::uniform(2);
        let r = 2isize;
        let n = 25.0f64;
        for &(a, b) in &[((3, 3), (5, 4)), ((2, 6), (6, 2)), ((0, 0), (8, 8))] {
            let got = correlate_patches_direct(&img, a, b, &weights);

            // Two-pass oracle: means first, then explicit centered products.
            let mean_of = |c: (isize, isize)| -> f64 {
                let mut s = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        s += img.sample(c.0 + dx, c.1 + dy) as f64;
                    }
                }
                s / n
            };
            let (ma, mb) = (mean_of(a), mean_of(b));
            let (mut num, mut va, mut vb) = (0.0f64, 0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let av = img.sample(a.0 + dx, a.1 + dy) as f64 - ma;
                    let bv = img.sample(b.0 + dx, b.1 + dy) as f64 - mb;
                    num += av * bv;
                    va += av * av;
                    vb += bv * bv;
                }
            }
            let want = num / (va.sqrt() * vb.sqrt());
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn uniform_correlation_is_symmetric() {
        let img = rng_image(20, 20, 9);
        let weights = FilterWeights::uniform(2);
        for &(p, d) in &[((5, 7), (3, -2)), ((10, 10), (-4, 4)), ((2, 15), (1, 0))] {
            let q = (p.0 + d.0, p.1 + d.1);
            let forward = correlate_patches_direct(&img, p, q, &weights);
            let backward = correlate_patches_direct(&img, q, p, &weights);
            assert!((forward - backward).abs() < 1e-6);
        }
    }

    #[test]
    fn guided_kernel_row_sums_to_one() {
        let img = rng_image(20, 20, 11);
        let row = guided_kernel_row(&img, (9, 9), 2, 0.0009);
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12, "{sum}");
    }

    #[test]
    fn constant_image_maps_are_all_sentinel() {
        let img = Image::constant(20, 20, 0.3);
        let pattern = small_pattern(1);
        for weights in [FilterWeights::uniform(2), FilterWeights::guided(2, 0.0009)] {
            let maps = build_offset_maps(&img, &pattern, &weights).unwrap();
            for plane in 0..maps.offsets().len() {
                assert!(maps.plane_crop(plane).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn zero_delta_plane_is_one() {
        let img = rng_image(24, 24, 2);
        let pattern = small_pattern(2);
        let maps = build_offset_maps(&img, &pattern, &FilterWeights::uniform(2)).unwrap();
        let plane = maps.delta_index(Offset::new(0, 0)).unwrap();
        for v in maps.plane_crop(plane) {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn kernel_diagonal_entries_are_one() {
        let img = rng_image(24, 24, 4);
        let pattern = small_pattern(4);
        let maps = build_offset_maps(&img, &pattern, &FilterWeights::uniform(2)).unwrap();
        let support = pattern.support_offsets();
        let volume = remap_to_volume(&maps, &pattern, (12, 12)).unwrap();
        for (k, rk) in pattern.kernels.iter().enumerate() {
            let ji = support.iter().position(|j| j == rk).unwrap();
            assert!((volume.get(k, ji) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn fast_path_matches_direct_on_interior_and_border() {
        let img = rng_image(16, 16, 13);
        let pattern = small_pattern(13);
        let support = pattern.support_offsets();

        for (weights, tol) in [
            (FilterWeights::uniform(2), 1e-5),
            (FilterWeights::guided(2, 0.0009), 1e-3),
        ] {
            let maps = build_offset_maps(&img, &pattern, &weights).unwrap();
            let mut direct = DirectCorrelator::new(&img, weights);
            let mut worst = 0.0f64;
            for &(x, y) in &[(0usize, 0usize), (8, 8), (15, 3), (4, 15)] {
                let fast = remap_to_volume(&maps, &pattern, (x, y)).unwrap();
                let slow = direct.volume_at(&pattern, x as isize, y as isize);
                for k in 0..fast.n_kernels {
                    for ji in 0..support.len() {
                        let d = (fast.get(k, ji) as f64 - slow.get(k, ji) as f64).abs();
                        worst = worst.max(d);
                    }
                }
            }
            assert!(worst < tol, "{weights:?}: worst deviation {worst}");
        }
    }

    #[test]
    fn affine_intensity_change_preserves_uniform_correlations() {
        let img = rng_image(20, 20, 17);
        let scaled = img.map(|v| 0.6 * v + 0.2);
        let pattern = small_pattern(17);
        let weights = FilterWeights::uniform(2);
        let maps_a = build_offset_maps(&img, &pattern, &weights).unwrap();
        let maps_b = build_offset_maps(&scaled, &pattern, &weights).unwrap();
        for plane in 0..maps_a.offsets().len() {
            for (a, b) in maps_a
                .plane_crop(plane)
                .iter()
                .zip(maps_b.plane_crop(plane))
            {
                assert!((*a as f64 - b as f64).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn maps_identical_across_thread_counts() {
        let img = rng_image(24, 24, 23);
        let pattern = small_pattern(23);
        let weights = FilterWeights::guided(2, 0.0009);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| build_offset_maps(&img, &pattern, &weights).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.offsets(), b.offsets());
        for plane in 0..a.offsets().len() {
            assert_eq!(a.plane_crop(plane), b.plane_crop(plane));
        }
    }

    #[test]
    fn dump_writes_planes_and_index() {
        let img = rng_image(12, 12, 29);
        let pattern = SamplingPattern::build(DescriptorParams {
            num_kernels: 2,
            seed: 29,
            ..Default::default()
        })
        .unwrap();
        let maps = build_offset_maps(&img, &pattern, &FilterWeights::uniform(2)).unwrap();
        let dir = std::env::temp_dir().join("desca-maps-dump");
        let _ = std::fs::remove_dir_all(&dir);
        dump_offset_maps(&maps, &dir).unwrap();
        assert!(dir.join("index.json").exists());
        let first = maps.offsets()[0];
        assert!(dir
            .join(format!("delta_{}_{}.pfm", first.dx, first.dy))
            .exists());
    }
}
