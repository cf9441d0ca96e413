//! PGM (binary P5/P6) and PFM readers and writers.
//!
//! Both formats are lossless and standard for stereo ground truth. Color
//! input (P6 or PF) is converted to luminance `0.299 R + 0.587 G + 0.114 B`
//! and flagged in the result. PFM scanlines are stored bottom-to-top and are
//! little-endian when the header scale is negative, per the de facto
//! standard; non-finite PFM samples become 0 with a cleared validity bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{DescaError, Result};
use crate::image::Image;

/// Detected on-disk format of a loaded file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm,
    Pfm,
}

/// An image plus load-time diagnostics.
#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub image: Image,
    pub format: ImageFormat,
    /// Set when a color file was collapsed to luminance.
    pub converted_from_color: bool,
    /// Per-pixel validity (PFM only): false where the file held NaN or ±inf.
    pub validity: Option<Vec<bool>>,
}

/// Raw float payload of a file, before any normalization. Used for disparity
/// maps, where values are pixels rather than intensities.
#[derive(Debug, Clone)]
pub struct RawFloatMap {
    pub width: usize,
    pub height: usize,
    /// Row-major, top row first. Invalid samples are 0.
    pub data: Vec<f32>,
    pub validity: Vec<bool>,
}

/// Loads a PGM/PPM/PFM file and normalizes intensities to `[0, 1]`.
///
/// PGM values are divided by the header maxval. PFM values are multiplied by
/// `scale` (pass 1.0 for none) and clamped to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<LoadedImage> {
    load_image_with_scale(path, 1.0)
}

pub fn load_image_with_scale(path: &Path, scale: f32) -> Result<LoadedImage> {
    let bytes = fs::read(path).map_err(|e| DescaError::io(path, e))?;
    match bytes.get(..2) {
        Some(b"P5") | Some(b"P6") => load_pgm_bytes(path, &bytes),
        Some(b"Pf") | Some(b"PF") => {
            let (raw, channels) = parse_pfm(path, &bytes)?;
            let (gray, converted) = collapse_channels(raw.data, channels);
            let data: Vec<f32> = gray
                .iter()
                .map(|&v| (v * scale).clamp(0.0, 1.0))
                .collect();
            Ok(LoadedImage {
                image: Image::new(raw.width, raw.height, data)?,
                format: ImageFormat::Pfm,
                converted_from_color: converted,
                validity: Some(raw.validity),
            })
        }
        _ => Err(DescaError::format(
            path,
            "unsupported magic (expected P5, P6, Pf or PF)",
        )),
    }
}

/// Reads a single-channel PFM without normalization (disparity maps).
pub fn load_pfm_raw(path: &Path) -> Result<RawFloatMap> {
    let bytes = fs::read(path).map_err(|e| DescaError::io(path, e))?;
    if bytes.get(..2) != Some(b"Pf".as_slice()) {
        return Err(DescaError::format(path, "expected single-channel PFM (Pf)"));
    }
    let (raw, _) = parse_pfm(path, &bytes)?;
    Ok(raw)
}

/// Writes a binary P5 PGM. `maxval` must be 255 or 65535; 16-bit samples are
/// big-endian per the PGM standard. Intensities are scaled by `maxval` and
/// rounded.
pub fn save_pgm(image: &Image, path: &Path, maxval: u32) -> Result<()> {
    if maxval != 255 && maxval != 65535 {
        return Err(DescaError::Contract(format!(
            "pgm maxval must be 255 or 65535, got {maxval}"
        )));
    }
    let mut out = Vec::with_capacity(32 + image.data().len() * 2);
    write!(out, "P5\n{} {}\n{}\n", image.width(), image.height(), maxval).unwrap();
    for &v in image.data() {
        let q = (v as f64 * maxval as f64).round().clamp(0.0, maxval as f64) as u32;
        if maxval == 255 {
            out.push(q as u8);
        } else {
            out.extend_from_slice(&(q as u16).to_be_bytes());
        }
    }
    fs::write(path, out).map_err(|e| DescaError::io(path, e))
}

/// Writes a single-channel little-endian PFM (header scale -1.0).
/// Invalid samples are written as +inf.
pub fn save_pfm(
    width: usize,
    height: usize,
    data: &[f32],
    validity: Option<&[bool]>,
    path: &Path,
) -> Result<()> {
    if data.len() != width * height {
        return Err(DescaError::Contract(format!(
            "pfm data length {} does not match {}x{}",
            data.len(),
            width,
            height
        )));
    }
    if let Some(mask) = validity {
        if mask.len() != data.len() {
            return Err(DescaError::Contract("validity mask length mismatch".into()));
        }
    }
    let mut out = Vec::with_capacity(32 + data.len() * 4);
    write!(out, "Pf\n{} {}\n-1.0\n", width, height).unwrap();
    // Bottom row first.
    for y in (0..height).rev() {
        for x in 0..width {
            let i = y * width + x;
            let v = match validity {
                Some(mask) if !mask[i] => f32::INFINITY,
                _ => data[i],
            };
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| DescaError::io(path, e))
}

pub fn save_pfm_image(image: &Image, path: &Path) -> Result<()> {
    save_pfm(image.width(), image.height(), image.data(), None, path)
}

fn load_pgm_bytes(path: &Path, bytes: &[u8]) -> Result<LoadedImage> {
    let channels = if &bytes[..2] == b"P6" { 3 } else { 1 };
    let mut cursor = 2;
    let width = read_header_int(path, bytes, &mut cursor)?;
    let height = read_header_int(path, bytes, &mut cursor)?;
    let maxval = read_header_int(path, bytes, &mut cursor)?;
    if width == 0 || height == 0 {
        return Err(DescaError::format(path, "zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(DescaError::format(path, format!("bad maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    cursor += 1;
    let bytes_per_sample = if maxval > 255 { 2 } else { 1 };
    let expected = width * height * channels * bytes_per_sample;
    let raster = bytes
        .get(cursor..cursor + expected)
        .ok_or_else(|| DescaError::format(path, "truncated raster"))?;

    let mut samples = Vec::with_capacity(width * height * channels);
    if bytes_per_sample == 1 {
        samples.extend(raster.iter().map(|&b| b as f32 / maxval as f32));
    } else {
        for pair in raster.chunks_exact(2) {
            let v = u16::from_be_bytes([pair[0], pair[1]]);
            samples.push(v as f32 / maxval as f32);
        }
    }
    let (gray, converted) = collapse_channels(samples, channels);
    Ok(LoadedImage {
        image: Image::new(width, height, gray)?,
        format: ImageFormat::Pgm,
        converted_from_color: converted,
        validity: None,
    })
}

fn parse_pfm(path: &Path, bytes: &[u8]) -> Result<(RawFloatMap, usize)> {
    let channels = if &bytes[..2] == b"PF" { 3 } else { 1 };
    let mut cursor = 2;
    let width = read_header_int(path, bytes, &mut cursor)?;
    let height = read_header_int(path, bytes, &mut cursor)?;
    let scale = read_header_float(path, bytes, &mut cursor)?;
    if width == 0 || height == 0 {
        return Err(DescaError::format(path, "zero image dimension"));
    }
    if scale == 0.0 {
        return Err(DescaError::format(path, "pfm scale must be nonzero"));
    }
    cursor += 1;
    let little_endian = scale < 0.0;
    let expected = width * height * channels * 4;
    let raster = bytes
        .get(cursor..cursor + expected)
        .ok_or_else(|| DescaError::format(path, "truncated raster"))?;

    // File rows run bottom-to-top; flip while decoding.
    let mut data = vec![0.0f32; width * height * channels];
    let mut validity = vec![true; width * height];
    let row_bytes = width * channels * 4;
    for file_row in 0..height {
        let y = height - 1 - file_row;
        let row = &raster[file_row * row_bytes..(file_row + 1) * row_bytes];
        for (i, quad) in row.chunks_exact(4).enumerate() {
            let b = [quad[0], quad[1], quad[2], quad[3]];
            let mut v = if little_endian {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
            if !v.is_finite() {
                v = 0.0;
                validity[y * width + i / channels] = false;
            }
            data[(y * width * channels) + i] = v;
        }
    }
    Ok((
        RawFloatMap {
            width,
            height,
            data,
            validity,
        },
        channels,
    ))
}

fn collapse_channels(samples: Vec<f32>, channels: usize) -> (Vec<f32>, bool) {
    if channels == 1 {
        return (samples, false);
    }
    let gray = samples
        .chunks_exact(channels)
        .map(|px| 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2])
        .collect();
    (gray, true)
}

fn skip_whitespace_and_comments(bytes: &[u8], cursor: &mut usize) {
    loop {
        while *cursor < bytes.len() && bytes[*cursor].is_ascii_whitespace() {
            *cursor += 1;
        }
        if *cursor < bytes.len() && bytes[*cursor] == b'#' {
            while *cursor < bytes.len() && bytes[*cursor] != b'\n' {
                *cursor += 1;
            }
        } else {
            return;
        }
    }
}

fn read_header_token<'a>(path: &Path, bytes: &'a [u8], cursor: &mut usize) -> Result<&'a str> {
    skip_whitespace_and_comments(bytes, cursor);
    let start = *cursor;
    while *cursor < bytes.len() && !bytes[*cursor].is_ascii_whitespace() {
        *cursor += 1;
    }
    if start == *cursor {
        return Err(DescaError::format(path, "truncated header"));
    }
    std::str::from_utf8(&bytes[start..*cursor])
        .map_err(|_| DescaError::format(path, "non-ascii header"))
}

fn read_header_int(path: &Path, bytes: &[u8], cursor: &mut usize) -> Result<usize> {
    let tok = read_header_token(path, bytes, cursor)?;
    tok.parse()
        .map_err(|_| DescaError::format(path, format!("bad integer '{tok}' in header")))
}

fn read_header_float(path: &Path, bytes: &[u8], cursor: &mut usize) -> Result<f32> {
    let tok = read_header_token(path, bytes, cursor)?;
    tok.parse()
        .map_err(|_| DescaError::format(path, format!("bad float '{tok}' in header")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("desca-io-tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn pgm_2x2_rescales() {
        let path = tmp("a.pgm");
        fs::write(&path, [b"P5\n2 2\n255\n".as_slice(), &[0, 255, 128, 64]].concat()).unwrap();
        let loaded = load_image(&path).unwrap();
        assert_eq!(loaded.format, ImageFormat::Pgm);
        assert!(!loaded.converted_from_color);
        let expect = [0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0];
        for (got, want) in loaded.image.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-7);
        }
    }

    #[test]
    fn pgm_with_comment_and_16bit() {
        let path = tmp("b.pgm");
        let mut bytes = b"P5\n# comment line\n2 1\n65535\n".to_vec();
        bytes.extend_from_slice(&0u16.to_be_bytes());
        bytes.extend_from_slice(&65535u16.to_be_bytes());
        fs::write(&path, bytes).unwrap();
        let loaded = load_image(&path).unwrap();
        assert_eq!(loaded.image.data(), &[0.0, 1.0]);
    }

    #[test]
    fn pgm_roundtrip_bytes_identical() {
        let path = tmp("c.pgm");
        let mut payload = b"P5\n16 16\n255\n".to_vec();
        let mut state = 0x12345678u32;
        for _ in 0..256 {
            state = state.wrapping_mul(1664525).wrapping_add(1013904223);
            payload.push((state >> 24) as u8);
        }
        fs::write(&path, &payload).unwrap();
        let loaded = load_image(&path).unwrap();
        let back = tmp("c2.pgm");
        save_pgm(&loaded.image, &back, 255).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&back).unwrap());
    }

    #[test]
    fn pfm_constant_half() {
        let path = tmp("d.pfm");
        let img = Image::constant(3, 2, 0.5);
        save_pfm_image(&img, &path).unwrap();
        let loaded = load_image(&path).unwrap();
        assert_eq!(loaded.format, ImageFormat::Pfm);
        assert!(loaded.image.data().iter().all(|&v| v == 0.5));
        assert!(loaded.validity.unwrap().iter().all(|&v| v));
    }

    #[test]
    fn pfm_preserves_row_order() {
        let path = tmp("e.pfm");
        let img = Image::from_fn(2, 3, |x, y| (x + 2 * y) as f32 / 8.0);
        save_pfm_image(&img, &path).unwrap();
        let raw = load_pfm_raw(&path).unwrap();
        assert_eq!(raw.data, img.data());
    }

    #[test]
    fn pfm_invalid_samples_masked() {
        let path = tmp("f.pfm");
        let mut out = b"Pf\n2 1\n-1.0\n".to_vec();
        out.extend_from_slice(&0.25f32.to_le_bytes());
        out.extend_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, out).unwrap();
        let raw = load_pfm_raw(&path).unwrap();
        assert_eq!(raw.validity, vec![true, false]);
        assert_eq!(raw.data, vec![0.25, 0.0]);
    }

    #[test]
    fn ppm_collapses_to_luminance_with_flag() {
        let path = tmp("g.ppm");
        let bytes = [b"P6\n1 1\n255\n".as_slice(), &[255, 0, 0]].concat();
        fs::write(&path, bytes).unwrap();
        let loaded = load_image(&path).unwrap();
        assert!(loaded.converted_from_color);
        assert!((loaded.image.get(0, 0) - 0.299).abs() < 1e-6);
    }

    #[test]
    fn malformed_header_is_format_error() {
        let path = tmp("h.pgm");
        fs::write(&path, b"P5\nnot numbers\n").unwrap();
        match load_image(&path) {
            Err(DescaError::Format { .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn disparity_roundtrip_with_invalids() {
        let path = tmp("i.pfm");
        let data = vec![1.0, 4.5, 0.0, 7.25];
        let mask = vec![true, true, false, true];
        save_pfm(2, 2, &data, Some(&mask), &path).unwrap();
        let raw = load_pfm_raw(&path).unwrap();
        assert_eq!(raw.validity, mask);
        assert_eq!(raw.data, vec![1.0, 4.5, 0.0, 7.25]);
    }
}
