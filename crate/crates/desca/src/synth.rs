//! Deterministic synthetic textures for tests and benchmarks.
//!
//! Multi-octave bilinear value noise: smooth enough to resemble natural
//! texture, detailed enough that dense matching is non-trivial, and fully
//! reproducible from the seed on every platform.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::Image;

fn lattice(width: usize, height: usize, cell: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let gw = width / cell + 2;
    let gh = height / cell + 2;
    let grid: Vec<f32> = (0..gw * gh)
        .map(|_| (rng.next_u32() >> 8) as f32 / (1u32 << 24) as f32)
        .collect();
    let mut out = vec![0.0f32; width * height];
    for y in 0..height {
        let gy = y / cell;
        let ty = (y % cell) as f32 / cell as f32;
        for x in 0..width {
            let gx = x / cell;
            let tx = (x % cell) as f32 / cell as f32;
            let v00 = grid[gy * gw + gx];
            let v10 = grid[gy * gw + gx + 1];
            let v01 = grid[(gy + 1) * gw + gx];
            let v11 = grid[(gy + 1) * gw + gx + 1];
            let top = v00 + (v10 - v00) * tx;
            let bot = v01 + (v11 - v01) * tx;
            out[y * width + x] = top + (bot - top) * ty;
        }
    }
    out
}

/// Multi-octave value noise with intensities rescaled into `[0.05, 0.95]`.
pub fn value_noise(width: usize, height: usize, seed: u64) -> Image {
    let octaves: [(usize, f32); 4] = [(24, 0.45), (12, 0.3), (6, 0.15), (3, 0.1)];
    let mut acc = vec![0.0f32; width * height];
    for (i, (cell, weight)) in octaves.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let layer = lattice(width, height, *cell, &mut rng);
        for (a, l) in acc.iter_mut().zip(layer) {
            *a += weight * l;
        }
    }
    let lo = acc.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = acc.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(1e-6);
    Image::from_fn(width, height, |x, y| {
        0.05 + 0.9 * (acc[y * width + x] - lo) / span
    })
}

/// A synthetic stereo pair with a constant integer disparity: left pixel
/// `(x, y)` corresponds to right pixel `(x - shift, y)` wherever both exist.
pub fn shifted_pair(width: usize, height: usize, shift: usize, seed: u64) -> (Image, Image) {
    let base = value_noise(width + shift, height, seed);
    let left = Image::from_fn(width, height, |x, y| base.get(x, y));
    let right = Image::from_fn(width, height, |x, y| base.get(x + shift, y));
    (left, right)
}
