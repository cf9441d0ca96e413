//! Descriptor assembly: LSS, DASC, SiSCA and DeSCA fields.
//!
//! All four kinds share the pipeline shape: build per-pixel response
//! surfaces, pool them, pass the pooled responses through an exponential
//! gate, and L2-normalize the resulting vector.
//!
//! * **LSS** — per log-polar cell, the maximum of `exp(-SSD/sigma_c)` over
//!   the cell's patch offsets.
//! * **DASC** — gated absolute self-correlation of seeded pattern pairs.
//! * **SiSCA** — every kernel's correlation surface is max-pooled over the
//!   circular spatial pyramid (C-SPP), then gated.
//! * **DeSCA** — SiSCA plus hierarchical surfaces: kernel surfaces are
//!   average-pooled over circular pyramidal point sets before a second
//!   C-SPP pass; both blocks are concatenated, gated and normalized.
//!
//! The dense fast path assembles everything from shared correlation planes;
//! the direct path recomputes each patch pair and serves as the in-product
//! correctness reference.

use std::collections::HashSet;
use std::io::Read;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DescaError, Result};
use crate::filter::{box_mean_plane, FilterWeights, Plane};
use crate::geometry::{log_polar_cells, DescriptorParams, Offset, SamplingPattern};
use crate::image::Image;
use crate::selfconv::{
    build_offset_maps, build_offset_maps_for, clamped_plane, ComputePath, DirectCorrelator,
    RemapTable, VolumeSlice,
};

/// Descriptor family member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorKind {
    Lss,
    Dasc,
    Sisca,
    Desca,
}

impl DescriptorKind {
    pub const ALL: [DescriptorKind; 4] = [
        DescriptorKind::Lss,
        DescriptorKind::Dasc,
        DescriptorKind::Sisca,
        DescriptorKind::Desca,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            DescriptorKind::Lss => "lss",
            DescriptorKind::Dasc => "dasc",
            DescriptorKind::Sisca => "sisca",
            DescriptorKind::Desca => "desca",
        }
    }

    pub fn as_u8(&self) -> u8 {
        match self {
            DescriptorKind::Lss => 0,
            DescriptorKind::Dasc => 1,
            DescriptorKind::Sisca => 2,
            DescriptorKind::Desca => 3,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(DescriptorKind::Lss),
            1 => Some(DescriptorKind::Dasc),
            2 => Some(DescriptorKind::Sisca),
            3 => Some(DescriptorKind::Desca),
            _ => None,
        }
    }

    /// Per-pixel descriptor length under `params`.
    pub fn descriptor_len(&self, params: &DescriptorParams) -> usize {
        let n_sb = params.num_pyramid_bins();
        match self {
            DescriptorKind::Lss => params.num_radii * params.num_angles,
            DescriptorKind::Dasc => params.num_kernels,
            DescriptorKind::Sisca => params.num_kernels * n_sb,
            DescriptorKind::Desca => (params.num_kernels + n_sb) * n_sb,
        }
    }
}

impl std::str::FromStr for DescriptorKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "lss" => Ok(DescriptorKind::Lss),
            "dasc" => Ok(DescriptorKind::Dasc),
            "sisca" => Ok(DescriptorKind::Sisca),
            "desca" => Ok(DescriptorKind::Desca),
            other => Err(format!(
                "unknown descriptor '{other}' (expected lss|dasc|sisca|desca)"
            )),
        }
    }
}

/// Wall-clock seconds of the pipeline stages.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct StageTimings {
    /// Correlation-plane (or SSD-plane) construction.
    pub offset_maps_s: f64,
    /// Volume remapping plus spatial pooling.
    pub pooling_s: f64,
    /// Gating and L2 normalization.
    pub gating_s: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.offset_maps_s + self.pooling_s + self.gating_s
    }
}

/// A dense field of L2-normalized descriptors, one per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorField {
    width: usize,
    height: usize,
    len: usize,
    kind: DescriptorKind,
    params: DescriptorParams,
    pattern_digest: String,
    data: Vec<f32>,
}

impl DescriptorField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Per-pixel dimension L.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn kind(&self) -> DescriptorKind {
        self.kind
    }

    pub fn params(&self) -> &DescriptorParams {
        &self.params
    }

    pub fn pattern_digest(&self) -> &str {
        &self.pattern_digest
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &[f32] {
        let base = (y * self.width + x) * self.len;
        &self.data[base..base + self.len]
    }

    /// Binary layout: magic `DSCA`, version u16, kind u8, height u32,
    /// width u32, length u32, seed u64 (all little-endian), then
    /// `H*W*L` little-endian f32 values, row-major, pixel-major.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(27 + self.data.len() * 4);
        out.extend_from_slice(b"DSCA");
        out.extend_from_slice(&1u16.to_le_bytes());
        out.push(self.kind.as_u8());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.len as u32).to_le_bytes());
        out.extend_from_slice(&self.params.seed.to_le_bytes());
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, out).map_err(|e| DescaError::io(path, e))
    }

    /// Reads a field saved by [`DescriptorField::save`]. The JSON sidecar is
    /// required to recover the parameter set and pattern digest.
    pub fn load(path: &Path, sidecar: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path).map_err(|e| DescaError::io(path, e))?;
        let mut header = [0u8; 27];
        file.read_exact(&mut header)
            .map_err(|e| DescaError::io(path, e))?;
        if &header[..4] != b"DSCA" {
            return Err(DescaError::format(path, "bad magic"));
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != 1 {
            return Err(DescaError::format(
                path,
                format!("unknown version {version}"),
            ));
        }
        let kind = DescriptorKind::from_u8(header[6])
            .ok_or_else(|| DescaError::format(path, "unknown descriptor kind"))?;
        let h = u32::from_le_bytes(header[7..11].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(header[11..15].try_into().unwrap()) as usize;
        let l = u32::from_le_bytes(header[15..19].try_into().unwrap()) as usize;
        let seed = u64::from_le_bytes(header[19..27].try_into().unwrap());

        let mut payload = Vec::new();
        file.read_to_end(&mut payload)
            .map_err(|e| DescaError::io(path, e))?;
        if payload.len() != w * h * l * 4 {
            return Err(DescaError::format(path, "payload size mismatch"));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let meta: FieldSidecar = serde_json::from_str(
            &std::fs::read_to_string(sidecar).map_err(|e| DescaError::io(sidecar, e))?,
        )
        .map_err(|e| DescaError::format(sidecar, format!("bad sidecar: {e}")))?;
        if meta.params.seed != seed || meta.kind != kind {
            return Err(DescaError::Contract(
                "sidecar does not match binary header".into(),
            ));
        }
        Ok(DescriptorField {
            width: w,
            height: h,
            len: l,
            kind,
            params: meta.params,
            pattern_digest: meta.pattern_digest,
            data,
        })
    }

    pub fn sidecar(&self, weights: &FilterWeights) -> FieldSidecar {
        FieldSidecar {
            kind: self.kind,
            width: self.width,
            height: self.height,
            length: self.len,
            params: self.params,
            weights: *weights,
            pattern_digest: self.pattern_digest.clone(),
        }
    }
}

/// JSON sidecar written next to every binary field.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldSidecar {
    pub kind: DescriptorKind,
    pub width: usize,
    pub height: usize,
    pub length: usize,
    pub params: DescriptorParams,
    pub weights: FilterWeights,
    pub pattern_digest: String,
}

/// Precomputed pooling accelerators for one pattern: per-bin indices into
/// the support-offset enumeration and per-point-set kernel indices.
pub struct PoolingIndex {
    pub n_offsets: usize,
    pub n_bins: usize,
    bin_members: Vec<Vec<u16>>,
    set_kernels: Vec<Vec<u16>>,
}

impl PoolingIndex {
    pub fn new(pattern: &SamplingPattern) -> Self {
        let support = pattern.support_offsets();
        let position: std::collections::HashMap<Offset, u16> = support
            .iter()
            .enumerate()
            .map(|(i, &o)| (o, i as u16))
            .collect();
        let bin_members = pattern
            .bins
            .iter()
            .map(|bin| bin.offsets.iter().map(|o| position[o]).collect())
            .collect();
        let set_kernels = pattern
            .point_sets
            .iter()
            .map(|sp| {
                let members: HashSet<Offset> = sp.iter().copied().collect();
                pattern
                    .kernels
                    .iter()
                    .enumerate()
                    .filter(|(_, k)| members.contains(k))
                    .map(|(i, _)| i as u16)
                    .collect()
            })
            .collect();
        PoolingIndex {
            n_offsets: support.len(),
            n_bins: pattern.bins.len(),
            bin_members,
            set_kernels,
        }
    }

    /// Max-pools `surface` into `out` (one value per bin); empty bins yield
    /// -1, the identity of max over [-1, 1].
    pub fn max_pool_into(&self, surface: &[f32], out: &mut [f32]) {
        debug_assert_eq!(surface.len(), self.n_offsets);
        debug_assert_eq!(out.len(), self.n_bins);
        for (slot, members) in out.iter_mut().zip(&self.bin_members) {
            let mut best = -1.0f32;
            for &m in members {
                let v = surface[m as usize];
                if v > best {
                    best = v;
                }
            }
            *slot = best;
        }
    }

    /// Kernel indices whose offsets fall in point set `v`.
    pub fn set_kernels(&self, v: usize) -> &[u16] {
        &self.set_kernels[v]
    }
}

/// Max-pool a correlation surface over the circular spatial-pyramid bins.
/// `surface` is laid out in [`SamplingPattern::support_offsets`] order.
pub fn cspp_max_pool(surface: &[f32], pattern: &SamplingPattern) -> Result<Vec<f32>> {
    let index = PoolingIndex::new(pattern);
    if surface.len() != index.n_offsets {
        return Err(DescaError::Contract(format!(
            "surface length {} does not match support window {}",
            surface.len(),
            index.n_offsets
        )));
    }
    let mut out = vec![0.0f32; index.n_bins];
    index.max_pool_into(surface, &mut out);
    Ok(out)
}

/// Hierarchically aggregated surfaces: one averaged correlation surface per
/// circular pyramidal point set, with the number of contributing kernels.
#[derive(Debug, Clone)]
pub struct HierarchicalSurfaces {
    pub n_offsets: usize,
    /// Point-set-major, `n_offsets` values each; zero surface when empty.
    pub surfaces: Vec<f32>,
    pub counts: Vec<usize>,
}

impl HierarchicalSurfaces {
    pub fn surface(&self, v: usize) -> &[f32] {
        &self.surfaces[v * self.n_offsets..(v + 1) * self.n_offsets]
    }
}

/// Average-pools the drawn kernel surfaces over each circular pyramidal
/// point set. Only drawn kernels contribute; a point set containing none of
/// them yields a zero surface flagged by `counts[v] == 0`.
pub fn aggregate_hierarchy(
    volume: &VolumeSlice,
    pattern: &SamplingPattern,
) -> Result<HierarchicalSurfaces> {
    let index = PoolingIndex::new(pattern);
    if volume.n_offsets != index.n_offsets || volume.n_kernels != pattern.kernels.len() {
        return Err(DescaError::Contract(
            "volume shape does not match pattern".into(),
        ));
    }
    let mut out = HierarchicalSurfaces {
        n_offsets: index.n_offsets,
        surfaces: vec![0.0; index.n_bins * index.n_offsets],
        counts: vec![0; index.n_bins],
    };
    for v in 0..index.n_bins {
        let members = index.set_kernels(v);
        out.counts[v] = members.len();
        average_rows(
            volume.values(),
            index.n_offsets,
            members,
            &mut out.surfaces[v * index.n_offsets..(v + 1) * index.n_offsets],
        );
    }
    Ok(out)
}

fn average_rows(volume: &[f32], n_offsets: usize, kernels: &[u16], out: &mut [f32]) {
    out.fill(0.0);
    if kernels.is_empty() {
        return;
    }
    for &k in kernels {
        let row = &volume[k as usize * n_offsets..(k as usize + 1) * n_offsets];
        for (acc, &v) in out.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let inv = 1.0 / kernels.len() as f32;
    for acc in out.iter_mut() {
        *acc *= inv;
    }
}

/// Exponential gate: strictly increasing in |h|, mapping [-1, 1] into (0, 1].
#[inline]
pub fn gate(h: f64, sigma_c: f64) -> f64 {
    (-(1.0 - h.abs()) / sigma_c).exp()
}

fn normalize_l2(v: &mut [f32]) {
    let norm: f64 = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if norm > 0.0 {
        let inv = (1.0 / norm) as f32;
        for x in v.iter_mut() {
            *x *= inv;
        }
    }
}

pub fn lss_descriptor(img: &Image, params: &DescriptorParams) -> Result<DescriptorField> {
    compute_descriptor_field(
        img,
        DescriptorKind::Lss,
        params,
        &FilterWeights::uniform(params.patch_radius().max(1)),
        ComputePath::Fast,
    )
    .map(|(f, _)| f)
}

pub fn dasc_descriptor(
    img: &Image,
    params: &DescriptorParams,
    weights: &FilterWeights,
) -> Result<DescriptorField> {
    compute_descriptor_field(img, DescriptorKind::Dasc, params, weights, ComputePath::Fast)
        .map(|(f, _)| f)
}

pub fn sisca_descriptor(
    img: &Image,
    params: &DescriptorParams,
    weights: &FilterWeights,
) -> Result<DescriptorField> {
    compute_descriptor_field(img, DescriptorKind::Sisca, params, weights, ComputePath::Fast)
        .map(|(f, _)| f)
}

pub fn desca_descriptor(
    img: &Image,
    params: &DescriptorParams,
    weights: &FilterWeights,
) -> Result<DescriptorField> {
    compute_descriptor_field(img, DescriptorKind::Desca, params, weights, ComputePath::Fast)
        .map(|(f, _)| f)
}

/// Computes a dense descriptor field. `weights` is ignored by LSS, whose
/// patch distance is an unweighted SSD.
pub fn compute_descriptor_field(
    img: &Image,
    kind: DescriptorKind,
    params: &DescriptorParams,
    weights: &FilterWeights,
    path: ComputePath,
) -> Result<(DescriptorField, StageTimings)> {
    params.validate()?;
    weights.validate()?;
    let pattern = SamplingPattern::build(*params)?;
    let len = kind.descriptor_len(params);
    let (w, h) = (img.width(), img.height());
    let mut data = vec![0.0f32; w * h * len];
    let mut timings = StageTimings::default();

    match kind {
        DescriptorKind::Lss => lss_pooled(img, &pattern, path, &mut data, &mut timings)?,
        DescriptorKind::Dasc => dasc_pooled(img, &pattern, weights, path, &mut data, &mut timings)?,
        DescriptorKind::Sisca | DescriptorKind::Desca => conv_pooled(
            img,
            &pattern,
            weights,
            path,
            kind == DescriptorKind::Desca,
            &mut data,
            &mut timings,
        )?,
    }

    // Gate (all but LSS, whose pooled values are already exponentials) and
    // normalize in place.
    let t0 = Instant::now();
    let sigma = params.sigma_c;
    let apply_gate = kind != DescriptorKind::Lss;
    data.par_chunks_mut(len).for_each(|pixel| {
        if apply_gate {
            for v in pixel.iter_mut() {
                *v = gate(*v as f64, sigma) as f32;
            }
        }
        normalize_l2(pixel);
    });
    timings.gating_s = t0.elapsed().as_secs_f64();

    let field = DescriptorField {
        width: w,
        height: h,
        len,
        kind,
        params: *params,
        pattern_digest: pattern.digest(),
        data,
    };
    Ok((field, timings))
}

/// LSS pooled responses: per log-polar cell, the max of `exp(-SSD/sigma_c)`.
/// Cells that contain no grid offset receive `exp(-M_F^2/sigma_c)`, the
/// most pessimistic achievable response, keeping L fixed across images.
fn lss_pooled(
    img: &Image,
    pattern: &SamplingPattern,
    path: ComputePath,
    data: &mut [f32],
    timings: &mut StageTimings,
) -> Result<()> {
    let params = &pattern.params;
    let support = pattern.support_offsets();
    let cells = log_polar_cells(params);
    let len = cells.len();
    let sigma = params.sigma_c;
    let r_f = params.patch_radius();
    let patch_area = (params.patch_size * params.patch_size) as f64;
    let empty_cell_value = (-patch_area / sigma).exp() as f32;
    let (w, h) = (img.width(), img.height());

    let position: std::collections::HashMap<Offset, usize> = support
        .iter()
        .enumerate()
        .map(|(i, &o)| (o, i))
        .collect();
    let cell_members: Vec<Vec<usize>> = cells
        .iter()
        .map(|cell| cell.iter().map(|o| position[o]).collect())
        .collect();

    match path {
        ComputePath::Fast => {
            // Dense SSD planes per support offset:
            // SSD_delta = n * (mean(f^2) + mean(s^2) - 2 mean(f s)).
            let t0 = Instant::now();
            let pad = r_f;
            let n = patch_area;
            let ext = clamped_plane(img, pad, Offset::new(0, 0));
            let mean_ff = box_mean_plane(&ext.zip(&ext, |a, b| a * b), r_f);
            let planes: Vec<Plane> = support
                .par_iter()
                .map(|&delta| {
                    let s = clamped_plane(img, pad, delta);
                    let mean_ss = box_mean_plane(&s.zip(&s, |a, b| a * b), r_f);
                    let mean_fs = box_mean_plane(&ext.zip(&s, |a, b| a * b), r_f);
                    mean_ff
                        .zip(&mean_ss, |a, b| a + b)
                        .zip(&mean_fs, |ab, c| (n * (ab - 2.0 * c)).max(0.0))
                })
                .collect();
            timings.offset_maps_s = t0.elapsed().as_secs_f64();

            let t1 = Instant::now();
            let plane_w = w + 2 * pad;
            data.par_chunks_mut(w * len)
                .enumerate()
                .for_each(|(y, row)| {
                    for x in 0..w {
                        let at = (y + pad) * plane_w + (x + pad);
                        let out = &mut row[x * len..(x + 1) * len];
                        for (slot, members) in out.iter_mut().zip(&cell_members) {
                            let mut best = f32::NEG_INFINITY;
                            for &m in members {
                                let v = (-planes[m].data[at] / sigma).exp() as f32;
                                if v > best {
                                    best = v;
                                }
                            }
                            *slot = if members.is_empty() {
                                empty_cell_value
                            } else {
                                best
                            };
                        }
                    }
                });
            timings.pooling_s = t1.elapsed().as_secs_f64();
        }
        ComputePath::Direct => {
            let t0 = Instant::now();
            let rf = r_f as isize;
            for y in 0..h {
                for x in 0..w {
                    let out = &mut data[(y * w + x) * len..(y * w + x + 1) * len];
                    for (slot, members) in out.iter_mut().zip(&cell_members) {
                        let mut best = f32::NEG_INFINITY;
                        for &m in members {
                            let j = support[m];
                            let mut ssd = 0.0f64;
                            for dy in -rf..=rf {
                                for dx in -rf..=rf {
                                    let a = img.sample(x as isize + dx, y as isize + dy) as f64;
                                    let b = img.sample(
                                        x as isize + j.dx as isize + dx,
                                        y as isize + j.dy as isize + dy,
                                    ) as f64;
                                    ssd += (a - b) * (a - b);
                                }
                            }
                            let v = (-ssd / sigma).exp() as f32;
                            if v > best {
                                best = v;
                            }
                        }
                        *slot = if members.is_empty() {
                            empty_cell_value
                        } else {
                            best
                        };
                    }
                }
            }
            timings.pooling_s = t0.elapsed().as_secs_f64();
        }
    }
    Ok(())
}

/// DASC pooled responses: raw pair correlations, one per pattern pair
/// (the gate is applied by the caller).
fn dasc_pooled(
    img: &Image,
    pattern: &SamplingPattern,
    weights: &FilterWeights,
    path: ComputePath,
    data: &mut [f32],
    timings: &mut StageTimings,
) -> Result<()> {
    let pairs = pattern.dasc_pairs()?;
    let len = pairs.len();
    let (w, h) = (img.width(), img.height());

    match path {
        ComputePath::Fast => {
            let t0 = Instant::now();
            let mut deltas: Vec<Offset> = pairs
                .iter()
                .map(|(s, t)| Offset::new(t.dx - s.dx, t.dy - s.dy))
                .collect::<HashSet<_>>()
                .into_iter()
                .collect();
            deltas.sort_by_key(|d| (d.dy, d.dx));
            let maps =
                build_offset_maps_for(img, weights, deltas, pattern.params.support_radius())?;
            let pair_plane: Vec<usize> = pairs
                .iter()
                .map(|(s, t)| {
                    maps.delta_index(Offset::new(t.dx - s.dx, t.dy - s.dy))
                        .expect("pair delta was just built")
                })
                .collect();
            timings.offset_maps_s = t0.elapsed().as_secs_f64();

            let t1 = Instant::now();
            data.par_chunks_mut(w * len)
                .enumerate()
                .for_each(|(y, row)| {
                    for x in 0..w {
                        let out = &mut row[x * len..(x + 1) * len];
                        for (l, (s, _)) in pairs.iter().enumerate() {
                            out[l] = maps.value_at(
                                pair_plane[l],
                                x as isize + s.dx as isize,
                                y as isize + s.dy as isize,
                            );
                        }
                    }
                });
            timings.pooling_s = t1.elapsed().as_secs_f64();
        }
        ComputePath::Direct => {
            let t0 = Instant::now();
            let mut correlator = DirectCorrelator::new(img, *weights);
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let base = (y as usize * w + x as usize) * len;
                    for (l, (s, t)) in pairs.iter().enumerate() {
                        let anchor = (x + s.dx as isize, y + s.dy as isize);
                        let delta = Offset::new(t.dx - s.dx, t.dy - s.dy);
                        data[base + l] = correlator.correlate(anchor, delta) as f32;
                    }
                }
            }
            timings.pooling_s = t0.elapsed().as_secs_f64();
        }
    }
    Ok(())
}

/// SiSCA/DeSCA pooled responses: C-SPP of every kernel surface, plus (for
/// DeSCA) C-SPP of the hierarchically averaged surfaces.
fn conv_pooled(
    img: &Image,
    pattern: &SamplingPattern,
    weights: &FilterWeights,
    path: ComputePath,
    hierarchical: bool,
    data: &mut [f32],
    timings: &mut StageTimings,
) -> Result<()> {
    let w = img.width();
    let index = PoolingIndex::new(pattern);
    let n_k = pattern.kernels.len();
    let n_off = index.n_offsets;
    let n_sb = index.n_bins;
    let len = if hierarchical {
        (n_k + n_sb) * n_sb
    } else {
        n_k * n_sb
    };

    let pool_pixel = |vol: &[f32], hier: &mut [f32], out: &mut [f32]| {
        for k in 0..n_k {
            index.max_pool_into(
                &vol[k * n_off..(k + 1) * n_off],
                &mut out[k * n_sb..(k + 1) * n_sb],
            );
        }
        if hierarchical {
            for v in 0..n_sb {
                average_rows(
                    vol,
                    n_off,
                    index.set_kernels(v),
                    &mut hier[v * n_off..(v + 1) * n_off],
                );
                index.max_pool_into(
                    &hier[v * n_off..(v + 1) * n_off],
                    &mut out[(n_k + v) * n_sb..(n_k + v + 1) * n_sb],
                );
            }
        }
    };

    match path {
        ComputePath::Fast => {
            let t0 = Instant::now();
            let maps = build_offset_maps(img, pattern, weights)?;
            let table = RemapTable::new(&maps, pattern)?;
            timings.offset_maps_s = t0.elapsed().as_secs_f64();

            let t1 = Instant::now();
            data.par_chunks_mut(w * len)
                .enumerate()
                .for_each(|(y, row)| {
                    let mut vol = vec![0.0f32; n_k * n_off];
                    let mut hier = vec![0.0f32; if hierarchical { n_sb * n_off } else { 0 }];
                    for x in 0..w {
                        table.fill(&maps, x as isize, y as isize, &mut vol);
                        pool_pixel(&vol, &mut hier, &mut row[x * len..(x + 1) * len]);
                    }
                });
            timings.pooling_s = t1.elapsed().as_secs_f64();
        }
        ComputePath::Direct => {
            let t0 = Instant::now();
            let mut correlator = DirectCorrelator::new(img, *weights);
            let mut hier = vec![0.0f32; if hierarchical { n_sb * n_off } else { 0 }];
            for y in 0..img.height() {
                for x in 0..w {
                    let vol = correlator.volume_at(pattern, x as isize, y as isize);
                    pool_pixel(
                        vol.values(),
                        &mut hier,
                        &mut data[(y * w + x) * len..(y * w + x + 1) * len],
                    );
                }
            }
            timings.pooling_s = t0.elapsed().as_secs_f64();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rng_image(w: usize, h: usize, seed: u64) -> Image {
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
        Image::from_fn(w, h, |_, _| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f32 / (1u64 << 53) as f32
        })
    }

    fn quick_params(seed: u64) -> DescriptorParams {
        DescriptorParams {
            num_kernels: 8,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn descriptor_lengths_match_contracts() {
        let params = DescriptorParams::default();
        assert_eq!(DescriptorKind::Lss.descriptor_len(&params), 64);
        assert_eq!(DescriptorKind::Dasc.descriptor_len(&params), 32);
        assert_eq!(DescriptorKind::Sisca.descriptor_len(&params), 416);
        assert_eq!(DescriptorKind::Desca.descriptor_len(&params), 585);
    }

    #[test]
    fn lss_constant_image_is_uniform() {
        // Parameters chosen so every log-polar cell holds at least one grid
        // offset: SSD is 0 everywhere, so all entries equal 1/sqrt(L).
        let params = DescriptorParams {
            num_radii: 2,
            num_angles: 4,
            patch_size: 3,
            num_kernels: 8,
            ..Default::default()
        };
        assert!(log_polar_cells(&params).iter().all(|c| !c.is_empty()));
        let img = Image::constant(16, 16, 0.6);
        let field = lss_descriptor(&img, &params).unwrap();
        let want = (1.0 / (field.len() as f64).sqrt()) as f32;
        for &v in field.data() {
            assert!((v - want).abs() < 1e-6);
        }
    }

    #[test]
    fn lss_matches_nested_loop_oracle() {
        let params = quick_params(3);
        let img = rng_image(24, 24, 3);
        let field = lss_descriptor(&img, &params).unwrap();
        let cells = log_polar_cells(&params);
        let rf = params.patch_radius() as isize;
        let patch_area = (params.patch_size * params.patch_size) as f64;
        let empty = (-patch_area / params.sigma_c).exp();

        for &(x, y) in &[(0usize, 0usize), (12, 12), (23, 5), (3, 20)] {
            let mut want: Vec<f64> = Vec::new();
            for cell in &cells {
                let mut best = f64::NEG_INFINITY;
                for j in cell {
                    let mut ssd = 0.0f64;
                    for dy in -rf..=rf {
                        for dx in -rf..=rf {
                            let a = img.sample(x as isize + dx, y as isize + dy) as f64;
                            let b = img.sample(
                                x as isize + j.dx as isize + dx,
                                y as isize + j.dy as isize + dy,
                            ) as f64;
                            ssd += (a - b) * (a - b);
                        }
                    }
                    best = best.max((-ssd / params.sigma_c).exp());
                }
                want.push(if cell.is_empty() { empty } else { best });
            }
            let norm: f64 = want.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (got, want) in field.get(x, y).iter().zip(&want) {
                assert!(
                    (*got as f64 - want / norm).abs() < 1e-6,
                    "pixel ({x},{y}): {got} vs {}",
                    want / norm
                );
            }
        }
    }

    #[test]
    fn dasc_constant_image_is_uniform() {
        let params = quick_params(1);
        let img = Image::constant(20, 20, 0.4);
        let field = dasc_descriptor(
            &img,
            &params,
            &FilterWeights::uniform(params.patch_radius()),
        )
        .unwrap();
        let want = (1.0 / (field.len() as f64).sqrt()) as f32;
        for &v in field.data() {
            assert!((v - want).abs() < 1e-6);
        }
    }

    #[test]
    fn dasc_matches_direct_pair_evaluation() {
        let params = quick_params(5);
        let img = rng_image(24, 24, 5);
        let weights = FilterWeights::uniform(params.patch_radius());
        let field = dasc_descriptor(&img, &params, &weights).unwrap();
        let pattern = SamplingPattern::build(params).unwrap();
        let pairs = pattern.dasc_pairs().unwrap();

        for &(x, y) in &[(0usize, 0usize), (12, 9), (23, 23)] {
            let mut want: Vec<f64> = pairs
                .iter()
                .map(|(s, t)| {
                    let c = crate::selfconv::correlate_patches_direct(
                        &img,
                        (x as isize + s.dx as isize, y as isize + s.dy as isize),
                        (x as isize + t.dx as isize, y as isize + t.dy as isize),
                        &weights,
                    );
                    gate(c, params.sigma_c)
                })
                .collect();
            let norm: f64 = want.iter().map(|v| v * v).sum::<f64>().sqrt();
            for w in want.iter_mut() {
                *w /= norm;
            }
            for (got, want) in field.get(x, y).iter().zip(&want) {
                assert!(
                    (*got as f64 - want).abs() < 1e-5,
                    "({x},{y}): {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn cspp_constant_surface() {
        let pattern = SamplingPattern::build(quick_params(2)).unwrap();
        let n = pattern.support_offsets().len();
        let pooled = cspp_max_pool(&vec![0.25f32; n], &pattern).unwrap();
        assert_eq!(pooled.len(), 13);
        assert!(pooled.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn cspp_root_is_max_of_level2() {
        let pattern = SamplingPattern::build(quick_params(7)).unwrap();
        let n = pattern.support_offsets().len();
        let surface: Vec<f32> = (0..n)
            .map(|i| ((i * 37 % 101) as f32 / 101.0) - 0.4)
            .collect();
        let pooled = cspp_max_pool(&surface, &pattern).unwrap();
        let level2_max = pooled[1..5]
            .iter()
            .cloned()
            .fold(f32::NEG_INFINITY, f32::max);
        assert_eq!(pooled[0], level2_max);
    }

    #[test]
    fn cspp_matches_nested_loops() {
        let pattern = SamplingPattern::build(quick_params(11)).unwrap();
        let support = pattern.support_offsets();
        let surface: Vec<f32> = (0..support.len())
            .map(|i| ((i * 53 % 97) as f32 / 97.0) * 2.0 - 1.0)
            .collect();
        let pooled = cspp_max_pool(&surface, &pattern).unwrap();
        for (u, bin) in pattern.bins.iter().enumerate() {
            let mut want = -1.0f32;
            for (ji, j) in support.iter().enumerate() {
                if bin.offsets.contains(j) {
                    want = want.max(surface[ji]);
                }
            }
            assert_eq!(pooled[u], want, "bin {u}");
        }
    }

    #[test]
    fn hierarchy_matches_nested_loop_averaging() {
        let pattern = SamplingPattern::build(quick_params(13)).unwrap();
        let n_off = pattern.support_offsets().len();
        let n_k = pattern.kernels.len();
        let mut volume = VolumeSlice::new(n_k, n_off);
        for (i, v) in volume.values_mut().iter_mut().enumerate() {
            *v = ((i * 29 % 83) as f32 / 83.0) * 2.0 - 1.0;
        }
        let hier = aggregate_hierarchy(&volume, &pattern).unwrap();

        // The root point set averages all kernels.
        assert_eq!(hier.counts[0], n_k);
        for ji in 0..n_off {
            let want: f32 = (0..n_k).map(|k| volume.get(k, ji)).sum::<f32>() / n_k as f32;
            assert!((hier.surface(0)[ji] - want).abs() < 1e-6);
        }
        // Per-entry equality against plain nested-loop averaging everywhere.
        for v in 0..pattern.point_sets.len() {
            let members: Vec<usize> = pattern
                .kernels
                .iter()
                .enumerate()
                .filter(|(_, k)| pattern.point_sets[v].contains(k))
                .map(|(i, _)| i)
                .collect();
            assert_eq!(hier.counts[v], members.len());
            for ji in 0..n_off {
                let want = if members.is_empty() {
                    0.0
                } else {
                    members
                        .iter()
                        .map(|&k| volume.get(k, ji) as f64)
                        .sum::<f64>()
                        / members.len() as f64
                };
                assert!((hier.surface(v)[ji] as f64 - want).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn single_member_point_set_copies_surface() {
        let pattern = SamplingPattern::build(quick_params(31)).unwrap();
        let n_off = pattern.support_offsets().len();
        let mut volume = VolumeSlice::new(pattern.kernels.len(), n_off);
        for (i, v) in volume.values_mut().iter_mut().enumerate() {
            *v = (i as f32).sin() * 0.5;
        }
        let hier = aggregate_hierarchy(&volume, &pattern).unwrap();
        for (v, count) in hier.counts.iter().enumerate() {
            if *count == 1 {
                let index = PoolingIndex::new(&pattern);
                let k = index.set_kernels(v)[0] as usize;
                assert_eq!(hier.surface(v), volume.kernel_surface(k));
            }
        }
    }

    #[test]
    fn gate_reference_values() {
        assert!((gate(1.0, 0.5) - 1.0).abs() < 1e-12);
        assert!((gate(-1.0, 0.5) - 1.0).abs() < 1e-12);
        assert!((gate(0.0, 0.5) - (-2.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn gate_is_monotone_in_magnitude() {
        let magnitudes: Vec<f64> = (0..200).map(|i| i as f64 / 199.0).collect();
        let gated: Vec<f64> = magnitudes.iter().map(|&m| gate(m, 0.5)).collect();
        for pair in gated.windows(2) {
            assert!(pair[1] > pair[0]);
        }
    }

    #[test]
    fn sisca_and_desca_constant_image_uniform() {
        let params = quick_params(17);
        let img = Image::constant(18, 18, 0.3);
        let weights = FilterWeights::guided(params.patch_radius(), 0.0009);
        for kind in [DescriptorKind::Sisca, DescriptorKind::Desca] {
            let (field, _) =
                compute_descriptor_field(&img, kind, &params, &weights, ComputePath::Fast).unwrap();
            let want = (1.0 / (field.len() as f64).sqrt()) as f32;
            for &v in field.data() {
                assert!((v - want).abs() < 1e-6, "{kind:?}");
            }
        }
    }

    #[test]
    fn sisca_is_prefix_of_desca_up_to_norm() {
        let params = quick_params(19);
        let img = rng_image(20, 20, 19);
        let weights = FilterWeights::uniform(params.patch_radius());
        let sisca = sisca_descriptor(&img, &params, &weights).unwrap();
        let desca = desca_descriptor(&img, &params, &weights).unwrap();
        let prefix = sisca.len();
        for &(x, y) in &[(3usize, 3usize), (10, 14), (19, 0)] {
            let s = sisca.get(x, y);
            let d = desca.get(x, y);
            let ratio = d[0] as f64 / s[0] as f64;
            for l in 0..prefix {
                assert!(
                    (d[l] as f64 - ratio * s[l] as f64).abs() < 1e-6,
                    "entry {l} at ({x},{y})"
                );
            }
        }
    }

    #[test]
    fn fast_and_direct_fields_agree() {
        let params = quick_params(23);
        let img = rng_image(14, 14, 23);
        for weights in [
            FilterWeights::uniform(params.patch_radius()),
            FilterWeights::guided(params.patch_radius(), 0.0009),
        ] {
            for kind in DescriptorKind::ALL {
                let (fast, _) =
                    compute_descriptor_field(&img, kind, &params, &weights, ComputePath::Fast)
                        .unwrap();
                let (direct, _) =
                    compute_descriptor_field(&img, kind, &params, &weights, ComputePath::Direct)
                        .unwrap();
                let tol = match weights {
                    FilterWeights::Uniform { .. } => 1e-5,
                    FilterWeights::Guided { .. } => 1e-3,
                };
                for (a, b) in fast.data().iter().zip(direct.data()) {
                    assert!(
                        (*a as f64 - *b as f64).abs() < tol,
                        "{kind:?} {weights:?}: {a} vs {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn field_save_load_roundtrip() {
        let params = quick_params(29);
        let img = rng_image(12, 10, 29);
        let weights = FilterWeights::uniform(params.patch_radius());
        let field = desca_descriptor(&img, &params, &weights).unwrap();
        let dir = std::env::temp_dir().join("desca-field-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let bin = dir.join("f.dsca");
        let side = dir.join("f.json");
        field.save(&bin).unwrap();
        let sidecar = field.sidecar(&weights);
        std::fs::write(&side, serde_json::to_string_pretty(&sidecar).unwrap()).unwrap();
        let loaded = DescriptorField::load(&bin, &side).unwrap();
        assert_eq!(loaded, field);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]

        #[test]
        fn descriptors_are_unit_norm_and_positive(seed in 0u64..500) {
            let params = DescriptorParams { num_kernels: 6, seed, ..Default::default() };
            let img = rng_image(13, 11, seed.wrapping_add(1));
            let weights = FilterWeights::uniform(params.patch_radius());
            for kind in DescriptorKind::ALL {
                let (field, _) = compute_descriptor_field(
                    &img, kind, &params, &weights, ComputePath::Fast,
                ).unwrap();
                for y in 0..field.height() {
                    for x in 0..field.width() {
                        let norm: f64 = field
                            .get(x, y)
                            .iter()
                            .map(|&v| v as f64 * v as f64)
                            .sum::<f64>()
                            .sqrt();
                        prop_assert!((norm - 1.0).abs() < 1e-6);
                        for &v in field.get(x, y) {
                            prop_assert!(v > 0.0);
                        }
                    }
                }
            }
        }
    }
}
