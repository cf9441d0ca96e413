//! Sampling geometry shared by every descriptor: log-polar point sets,
//! log-polar cells, circular spatial-pyramid bins, circular pyramidal point
//! sets, and the seeded random draws of kernel offsets and pattern pairs.
//!
//! All geometry is translation-invariant (expressed as offsets from the
//! center pixel) and fully determined by `DescriptorParams`, so two processes
//! given equal parameters produce byte-identical patterns. The PRNG is
//! ChaCha8 keyed by the 64-bit seed; index selection is an explicit partial
//! Fisher-Yates so draws do not depend on library version details.

use std::collections::HashSet;
use std::f64::consts::TAU;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DescaError, Result};

/// Descriptor configuration. Defaults give the standard parameter bundle
/// used across all datasets: sigma_c 0.5, 5x5 patches, 9x9 support, 32
/// kernels, 3 pyramid levels, 4 radii, 16 angles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DescriptorParams {
    /// Gating bandwidth of the exponential nonlinearity.
    pub sigma_c: f64,
    /// Patch side M_F (odd).
    pub patch_size: usize,
    /// Support window side M_R (odd).
    pub support_size: usize,
    /// Number of randomly drawn kernel points N_K.
    pub num_kernels: usize,
    /// Circular pyramid depth N_S.
    pub pyramid_levels: usize,
    /// Number of log-polar rings.
    pub num_radii: usize,
    /// Number of log-polar angles.
    pub num_angles: usize,
    /// Seed for every random draw in the pattern.
    pub seed: u64,
}

impl Default for DescriptorParams {
    fn default() -> Self {
        DescriptorParams {
            sigma_c: 0.5,
            patch_size: 5,
            support_size: 9,
            num_kernels: 32,
            pyramid_levels: 3,
            num_radii: 4,
            num_angles: 16,
            seed: 7,
        }
    }
}

impl DescriptorParams {
    pub fn validate(&self) -> Result<()> {
        let odd_ge3 = |v: usize| v >= 3 && v % 2 == 1;
        if !odd_ge3(self.patch_size) {
            return Err(DescaError::Contract(format!(
                "patch_size must be odd and >= 3, got {}",
                self.patch_size
            )));
        }
        if !odd_ge3(self.support_size) {
            return Err(DescaError::Contract(format!(
                "support_size must be odd and >= 3, got {}",
                self.support_size
            )));
        }
        if !(self.sigma_c > 0.0) {
            return Err(DescaError::Contract("sigma_c must be positive".into()));
        }
        if self.num_kernels == 0 || self.pyramid_levels == 0 {
            return Err(DescaError::Contract(
                "num_kernels and pyramid_levels must be >= 1".into(),
            ));
        }
        if self.num_radii == 0 || self.num_angles == 0 {
            return Err(DescaError::Contract(
                "num_radii and num_angles must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Half side of the support window.
    pub fn support_radius(&self) -> usize {
        self.support_size / 2
    }

    /// Half side of a patch.
    pub fn patch_radius(&self) -> usize {
        self.patch_size / 2
    }

    /// Total circular-pyramid bin count: 1 + sum of 2^s for s in 2..=levels.
    pub fn num_pyramid_bins(&self) -> usize {
        1 + (2..=self.pyramid_levels).map(|s| 1usize << s).sum::<usize>()
    }
}

/// Signed pixel displacement relative to a center pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Offset {
    pub dx: i32,
    pub dy: i32,
}

impl Offset {
    pub fn new(dx: i32, dy: i32) -> Self {
        Offset { dx, dy }
    }

    pub fn radius(&self) -> f64 {
        (self.dx as f64).hypot(self.dy as f64)
    }

    /// Angle in `(0, tau]`; the zero angle (and the zero offset) map to tau
    /// so half-open angular bins need no special cases.
    pub fn angle(&self) -> f64 {
        let a = (self.dy as f64).atan2(self.dx as f64);
        if a <= 0.0 {
            a + TAU
        } else {
            a
        }
    }
}

/// Row-major enumeration of the support window offsets (dy outer, dx inner).
/// Correlation surfaces are laid out in this order everywhere.
pub fn support_offsets(support_size: usize) -> Vec<Offset> {
    let r = (support_size / 2) as i32;
    let mut out = Vec::with_capacity(support_size * support_size);
    for dy in -r..=r {
        for dx in -r..=r {
            out.push(Offset::new(dx, dy));
        }
    }
    out
}

/// Log-polar circular point set: points on geometrically spaced rings
/// `rho_r = R_max^(r/N_rho)` at angles `theta_a = tau * a / N_theta`,
/// rounded to the pixel grid, deduplicated, plus the center sample.
pub fn build_log_polar_points(params: &DescriptorParams) -> Vec<Offset> {
    let r_max = params.support_radius() as f64;
    let mut seen = HashSet::new();
    let mut points = Vec::new();
    for radius in ring_radii(params) {
        for angle in ring_angles(params) {
            let off = Offset::new(
                (radius * angle.cos()).round() as i32,
                (radius * angle.sin()).round() as i32,
            );
            debug_assert!(off.dx.unsigned_abs() as f64 <= r_max);
            debug_assert!(off.dy.unsigned_abs() as f64 <= r_max);
            if seen.insert(off) {
                points.push(off);
            }
        }
    }
    let center = Offset::new(0, 0);
    if seen.insert(center) {
        points.push(center);
    }
    points
}

/// Ring radii `rho_r` for r in 1..=N_rho (rho_0 = 0 is implicit).
pub fn ring_radii(params: &DescriptorParams) -> Vec<f64> {
    let r_max = params.support_radius() as f64;
    (1..=params.num_radii)
        .map(|r| r_max.powf(r as f64 / params.num_radii as f64))
        .collect()
}

/// Angle boundaries `theta_a` for a in 1..=N_theta (theta_0 = 0 is implicit).
pub fn ring_angles(params: &DescriptorParams) -> Vec<f64> {
    (1..=params.num_angles)
        .map(|a| TAU * a as f64 / params.num_angles as f64)
        .collect()
}

/// Log-polar cells over the support window, indexed `l = r * N_theta + a`
/// (ring-major). Cell (r, a) holds offsets with
/// `rho_(r-1) < |j| <= rho_r` and `theta_(a-1) < angle(j) <= theta_a`.
/// Cells may be empty on coarse grids; the center offset belongs to none.
pub fn log_polar_cells(params: &DescriptorParams) -> Vec<Vec<Offset>> {
    let radii = ring_radii(params);
    let angles = ring_angles(params);
    let mut cells = vec![Vec::new(); params.num_radii * params.num_angles];
    for off in support_offsets(params.support_size) {
        let rho = off.radius();
        if rho <= 0.0 || rho > radii[params.num_radii - 1] {
            continue;
        }
        let ring = radii.iter().position(|&r| rho <= r).unwrap();
        let phi = off.angle();
        let sector = angles.iter().position(|&a| phi <= a).unwrap();
        cells[ring * params.num_angles + sector].push(off);
    }
    cells
}

/// Draws `count` distinct offsets from `points` without replacement.
/// Identical for equal `(points, count, seed)` on every platform.
pub fn draw_kernels(points: &[Offset], count: usize, seed: u64) -> Result<Vec<Offset>> {
    if count > points.len() {
        return Err(DescaError::Contract(format!(
            "cannot draw {count} kernels from {} points",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..points.len()).collect();
    for i in 0..count {
        let remaining = (points.len() - i) as u64;
        let j = i + (rng.next_u64() % remaining) as usize;
        indices.swap(i, j);
    }
    Ok(indices[..count].iter().map(|&i| points[i]).collect())
}

/// Draws `count` ordered pairs of distinct offsets from `points`. Pairs are
/// drawn independently of each other (the two members of one pair never
/// coincide). Uses ChaCha8 stream 1 so the pair draw does not alias the
/// kernel draw for the same seed.
pub fn draw_pairs(points: &[Offset], count: usize, seed: u64) -> Result<Vec<(Offset, Offset)>> {
    if points.len() < 2 {
        return Err(DescaError::Contract(
            "need at least two points to draw pairs".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let n = points.len() as u64;
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let a = (rng.next_u64() % n) as usize;
        let mut b = (rng.next_u64() % (n - 1)) as usize;
        if b >= a {
            b += 1;
        }
        pairs.push((points[a], points[b]));
    }
    Ok(pairs)
}

/// One circular spatial-pyramid bin: an offset set plus the span metadata it
/// was built from. Radial bounds are `(lo, hi]`; `None` lower bound admits
/// the center, `None` upper bound admits the window corners, so each level
/// partitions the full support window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidBin {
    pub level: usize,
    pub parent: Option<usize>,
    /// Angular span `(lo, hi]` in radians; `None` = full circle.
    pub angle_span: Option<(f64, f64)>,
    pub radius_lo: Option<f64>,
    pub radius_hi: Option<f64>,
    /// Exponent span of the radial interval (radius = R_max^t).
    t_span: (f64, f64),
    pub offsets: Vec<Offset>,
}

impl PyramidBin {
    pub fn contains(&self, off: Offset) -> bool {
        if let Some((lo, hi)) = self.angle_span {
            let phi = off.angle();
            if !(phi > lo && phi <= hi) {
                return false;
            }
        }
        let rho = off.radius();
        if let Some(lo) = self.radius_lo {
            if !(rho > lo) {
                return false;
            }
        }
        if let Some(hi) = self.radius_hi {
            if !(rho <= hi) {
                return false;
            }
        }
        true
    }
}

/// Circular spatial-pyramid bins over the support window.
///
/// Level 1 is the whole window. Level 2 splits it into four angular
/// quadrants (boundaries at 0, tau/4, tau/2, 3tau/4). Each deeper level
/// subdivides every bin of the level above: odd levels split the radial span
/// at its geometric mid-radius, even levels halve the angular span. Offsets
/// exactly on a shared boundary fall into the lower-index bin because spans
/// are half-open `(lo, hi]`.
pub fn build_pyramid_bins(params: &DescriptorParams) -> Vec<PyramidBin> {
    let r_max = params.support_radius() as f64;
    let all = support_offsets(params.support_size);

    let mut bins: Vec<PyramidBin> = Vec::with_capacity(params.num_pyramid_bins());
    bins.push(PyramidBin {
        level: 1,
        parent: None,
        angle_span: None,
        radius_lo: None,
        radius_hi: None,
        t_span: (0.0, 1.0),
        offsets: all.clone(),
    });

    let mut level_start = 0usize;
    for level in 2..=params.pyramid_levels {
        let level_end = bins.len();
        let mut next = Vec::new();
        if level == 2 {
            for q in 0..4u32 {
                let lo = TAU * q as f64 / 4.0;
                let hi = TAU * (q + 1) as f64 / 4.0;
                next.push(PyramidBin {
                    level,
                    parent: Some(0),
                    angle_span: Some((lo, hi)),
                    radius_lo: None,
                    radius_hi: None,
                    t_span: (0.0, 1.0),
                    offsets: Vec::new(),
                });
            }
        } else {
            for parent_idx in level_start..level_end {
                let parent = bins[parent_idx].clone();
                if level % 2 == 1 {
                    // Radial split at the geometric mid-radius R_max^t_mid.
                    let t_mid = 0.5 * (parent.t_span.0 + parent.t_span.1);
                    let r_mid = r_max.powf(t_mid);
                    next.push(PyramidBin {
                        level,
                        parent: Some(parent_idx),
                        angle_span: parent.angle_span,
                        radius_lo: parent.radius_lo,
                        radius_hi: Some(r_mid),
                        t_span: (parent.t_span.0, t_mid),
                        offsets: Vec::new(),
                    });
                    next.push(PyramidBin {
                        level,
                        parent: Some(parent_idx),
                        angle_span: parent.angle_span,
                        radius_lo: Some(r_mid),
                        radius_hi: parent.radius_hi,
                        t_span: (t_mid, parent.t_span.1),
                        offsets: Vec::new(),
                    });
                } else {
                    let (lo, hi) = parent.angle_span.expect("level >= 2 bins have angle spans");
                    let mid = 0.5 * (lo + hi);
                    next.push(PyramidBin {
                        level,
                        parent: Some(parent_idx),
                        angle_span: Some((lo, mid)),
                        radius_lo: parent.radius_lo,
                        radius_hi: parent.radius_hi,
                        t_span: parent.t_span,
                        offsets: Vec::new(),
                    });
                    next.push(PyramidBin {
                        level,
                        parent: Some(parent_idx),
                        angle_span: Some((mid, hi)),
                        radius_lo: parent.radius_lo,
                        radius_hi: parent.radius_hi,
                        t_span: parent.t_span,
                        offsets: Vec::new(),
                    });
                }
            }
        }
        level_start = bins.len();
        bins.extend(next);
    }

    for bin in bins.iter_mut().skip(1) {
        bin.offsets = all.iter().copied().filter(|&o| bin.contains(o)).collect();
    }
    bins
}

/// Circular pyramidal point sets: `SP(v) = points` intersected with bin `v`.
/// Empty intersections are kept (as empty sets) so indices stay aligned.
pub fn build_point_sets(points: &[Offset], bins: &[PyramidBin]) -> Vec<Vec<Offset>> {
    bins.iter()
        .map(|bin| {
            points
                .iter()
                .copied()
                .filter(|&p| bin.contains(p))
                .collect()
        })
        .collect()
}

/// The complete, immutable sampling geometry for one descriptor run.
/// Serializes to JSON (params plus explicit offset lists) so two processes
/// can verify they used identical geometry; `digest()` is a SHA-256 over
/// that canonical serialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPattern {
    pub params: DescriptorParams,
    pub points: Vec<Offset>,
    pub kernels: Vec<Offset>,
    pub bins: Vec<PyramidBin>,
    pub point_sets: Vec<Vec<Offset>>,
    pub ring_radii: Vec<f64>,
    pub angles: Vec<f64>,
}

impl SamplingPattern {
    pub fn build(params: DescriptorParams) -> Result<Self> {
        params.validate()?;
        let points = build_log_polar_points(&params);
        if params.num_kernels > points.len() {
            return Err(DescaError::Contract(format!(
                "num_kernels {} exceeds point set size {}",
                params.num_kernels,
                points.len()
            )));
        }
        let kernels = draw_kernels(&points, params.num_kernels, params.seed)?;
        let bins = build_pyramid_bins(&params);
        let point_sets = build_point_sets(&points, &bins);
        Ok(SamplingPattern {
            params,
            points,
            kernels,
            bins,
            point_sets,
            ring_radii: ring_radii(&params),
            angles: ring_angles(&params),
        })
    }

    pub fn support_offsets(&self) -> Vec<Offset> {
        support_offsets(self.params.support_size)
    }

    /// Pattern pairs used by the DASC descriptor, derived from the same seed.
    pub fn dasc_pairs(&self) -> Result<Vec<(Offset, Offset)>> {
        draw_pairs(&self.points, self.params.num_kernels, self.params.seed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("pattern serialization cannot fail")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json)
            .map_err(|e| DescaError::Contract(format!("bad pattern json: {e}")))
    }

    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_json().as_bytes());
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}
