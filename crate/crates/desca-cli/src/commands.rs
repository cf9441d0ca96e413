//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use desca::descriptors::{compute_descriptor_field, DescriptorField, DescriptorKind, StageTimings};
use desca::error::DescaError;
use desca::geometry::SamplingPattern;
use desca::image::Image;
use desca::io::{load_image, LoadedImage};
use desca::matching::{bad_pixel_rate, build_cost_volume, cost_profile, wta_disparity, DisparityMap};
use desca::selfconv::ComputePath;

use crate::cli::{BenchArgs, CommonArgs, ComputeArgs, ProfileArgs, StereoArgs};
use crate::config::RunConfig;

/// Errors split by exit code: 1 for usage/config, 2 for data.
pub enum AppError {
    Config(String),
    Data(String),
}

impl AppError {
    pub fn code(&self) -> i32 {
        match self {
            AppError::Config(_) => 1,
            AppError::Data(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            AppError::Config(m) => m,
            AppError::Data(m) => m,
        }
    }
}

impl From<DescaError> for AppError {
    fn from(e: DescaError) -> Self {
        AppError::Data(e.to_string())
    }
}

fn resolve_config(common: &CommonArgs) -> Result<RunConfig, AppError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(AppError::Config)?,
        None => RunConfig::default(),
    };
    if let Some(desc) = &common.desc {
        cfg.descriptor = desc.parse().map_err(AppError::Config)?;
    }
    if let Some(weights) = &common.weights {
        cfg.weights = weights.parse().map_err(AppError::Config)?;
    }
    if let Some(eps) = common.epsilon {
        if eps <= 0.0 {
            return Err(AppError::Config("epsilon must be positive".into()));
        }
        cfg.epsilon = eps;
    }
    if let Some(seed) = common.seed {
        cfg.params.seed = seed;
    }
    if let Some(threads) = common.threads {
        cfg.threads = Some(threads);
    }
    if let Some(path) = &common.path {
        cfg.path = path.parse().map_err(AppError::Config)?;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

/// Thread precedence: --threads, then DESCA_THREADS, then the config file,
/// then all cores.
fn thread_pool(cfg: &RunConfig) -> Result<rayon::ThreadPool, AppError> {
    let env_threads = std::env::var("DESCA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok());
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads.or(env_threads) {
        if n == 0 {
            return Err(AppError::Config("thread count must be >= 1".into()));
        }
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| AppError::Config(format!("cannot build thread pool: {e}")))
}

fn require(path: &Option<PathBuf>, what: &str) -> Result<PathBuf, AppError> {
    path.clone()
        .ok_or_else(|| AppError::Config(format!("missing required {what}")))
}

fn load_with_warning(path: &Path) -> Result<LoadedImage, AppError> {
    let loaded = load_image(path)?;
    if loaded.converted_from_color {
        eprintln!(
            "{}",
            serde_json::json!({
                "warning": format!("{} is multi-channel; converted to luminance", path.display())
            })
        );
    }
    Ok(loaded)
}

fn sidecar_path(out: &Path) -> PathBuf {
    PathBuf::from(format!("{}.json", out.display()))
}

fn compute_field(
    img: &Image,
    cfg: &RunConfig,
) -> Result<(DescriptorField, StageTimings), AppError> {
    Ok(compute_descriptor_field(
        img,
        cfg.descriptor,
        &cfg.params,
        &cfg.filter_weights(),
        cfg.path,
    )?)
}

#[derive(Serialize)]
struct StageReport {
    offset_maps_s: f64,
    pooling_s: f64,
    gating_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    matching_s: Option<f64>,
    total_s: f64,
}

impl StageReport {
    fn new(t: &StageTimings, matching_s: Option<f64>) -> Self {
        StageReport {
            offset_maps_s: t.offset_maps_s,
            pooling_s: t.pooling_s,
            gating_s: t.gating_s,
            matching_s,
            total_s: t.total() + matching_s.unwrap_or(0.0),
        }
    }
}

#[derive(Serialize)]
struct ImageSize {
    width: usize,
    height: usize,
}

#[derive(Serialize)]
struct TimingReport {
    descriptor: DescriptorKind,
    threads: usize,
    image: ImageSize,
    fast: StageReport,
    direct_crop: ImageSize,
    direct: StageReport,
    /// Direct-path cost per pixel divided by fast-path cost per pixel.
    per_pixel_ratio_direct_over_fast: f64,
}

pub fn compute(args: &ComputeArgs) -> Result<(), AppError> {
    let mut cfg = resolve_config(&args.common)?;
    if let Some(input) = &args.input {
        cfg.input = Some(input.clone());
    }
    let input = require(&cfg.input, "--input")?;
    let out = require(&cfg.out, "--out")?;

    let pool = thread_pool(&cfg)?;
    pool.install(|| -> Result<(), AppError> {
        let loaded = load_with_warning(&input)?;
        let (field, timings) = compute_field(&loaded.image, &cfg)?;
        field.save(&out)?;
        let sidecar = field.sidecar(&cfg.filter_weights());
        std::fs::write(
            sidecar_path(&out),
            serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
        )
        .map_err(|e| DescaError::io(sidecar_path(&out), e))?;
        println!(
            "wrote {} ({}x{}, L={}) in {:.2}s",
            out.display(),
            field.width(),
            field.height(),
            field.len(),
            timings.total()
        );
        Ok(())
    })
}

pub fn stereo(args: &StereoArgs) -> Result<(), AppError> {
    let mut cfg = resolve_config(&args.common)?;
    if let Some(p) = &args.left {
        cfg.left = Some(p.clone());
    }
    if let Some(p) = &args.right {
        cfg.right = Some(p.clone());
    }
    if let Some(p) = &args.gt {
        cfg.gt = Some(p.clone());
    }
    if let Some(p) = &args.mask {
        cfg.mask = Some(p.clone());
    }
    if let Some(d) = args.max_disp {
        cfg.max_disp = d;
    }
    if let Some(t) = args.threshold {
        cfg.threshold = t;
    }
    let left_path = require(&cfg.left, "--left")?;
    let right_path = require(&cfg.right, "--right")?;
    let out = require(&cfg.out, "--out")?;

    let pool = thread_pool(&cfg)?;
    pool.install(|| -> Result<(), AppError> {
        let left = load_with_warning(&left_path)?;
        let right = load_with_warning(&right_path)?;
        if left.image.width() != right.image.width()
            || left.image.height() != right.image.height()
        {
            return Err(AppError::Data(format!(
                "image size mismatch: {}x{} vs {}x{}",
                left.image.width(),
                left.image.height(),
                right.image.width(),
                right.image.height()
            )));
        }

        // One shared pattern per run; both fields derive from the same
        // params and seed, and the cost volume enforces digest equality.
        let pattern = SamplingPattern::build(cfg.params)?;
        std::fs::write(
            PathBuf::from(format!("{}.pattern.json", out.display())),
            pattern.to_json(),
        )
        .map_err(|e| DescaError::io(&out, e))?;

        let (field_l, timings_l) = compute_field(&left.image, &cfg)?;
        let (field_r, timings_r) = compute_field(&right.image, &cfg)?;

        let t0 = Instant::now();
        let volume = build_cost_volume(&field_l, &field_r, cfg.max_disp)?;
        let disparity = wta_disparity(&volume);
        let matching_s = t0.elapsed().as_secs_f64();
        disparity.save_pfm(&out)?;

        let timing = StageReport {
            offset_maps_s: timings_l.offset_maps_s + timings_r.offset_maps_s,
            pooling_s: timings_l.pooling_s + timings_r.pooling_s,
            gating_s: timings_l.gating_s + timings_r.gating_s,
            matching_s: Some(matching_s),
            total_s: timings_l.total() + timings_r.total() + matching_s,
        };
        std::fs::write(
            PathBuf::from(format!("{}.timing.json", out.display())),
            serde_json::to_string_pretty(&timing).expect("timmsing serializes"),
        )
        .map_err(|e| DescaError::io(&out, e))?;

        if let Some(gt_path) = &cfg.gt {
            let gt = DisparityMap::load_pfm(gt_path)?;
            let mask = match &cfg.mask {
                Some(mask_path) => {
                    let mask_img = load_image(mask_path)?;
                    Some(
                        mask_img
                            .image
                            .data()
                            .iter()
                            .map(|&v| v > 0.0)
                            .collect::<Vec<bool>>(),
                    )
                }
                None => None,
            };
            let report = bad_pixel_rate(&disparity, &gt, mask.as_deref(), cfg.threshold)?;
            let eval_path = PathBuf::from(format!("{}.eval.json", out.display()));
            std::fs::write(
                &eval_path,
                serde_json::to_string_pretty(&report).expect("report serializes"),
            )
            .map_err(|e| DescaError::io(&eval_path, e))?;
            println!(
                "bad-pixel rate {:.4} over {} pixels (threshold {})",
                report.bad_pixel_rate, report.evaluated_count, report.threshold
            );
        }
        println!("wrote {}", out.display());
        Ok(())
    })
}

pub fn profile(args: &ProfileArgs) -> Result<(), AppError> {
    let mut cfg = resolve_config(&args.common)?;
    if let Some(p) = &args.left {
        cfg.left = Some(p.clone());
    }
    if let Some(p) = &args.right {
        cfg.right = Some(p.clone());
    }
    let left_path = require(&cfg.left, "--left")?;
    let right_path = require(&cfg.right, "--right")?;
    let out = require(&cfg.out, "--out")?;

    let (px, py) = parse_pixel(&args.pixel)?;
    let row = args.row.unwrap_or(py);

    // `--desc` may carry a comma-separated list here.
    let kinds: Vec<DescriptorKind> = match &args.common.desc {
        Some(list) => list
            .split(',')
            .map(|s| s.trim().parse().map_err(AppError::Config))
            .collect::<Result<_, _>>()?,
        None => vec![cfg.descriptor],
    };

    let pool = thread_pool(&cfg)?;
    pool.install(|| -> Result<(), AppError> {
        let left = load_with_warning(&left_path)?;
        let right = load_with_warning(&right_path)?;
        for kind in &kinds {
            let mut kind_cfg = cfg.clone();
            kind_cfg.descriptor = *kind;
            let (field_l, _) = compute_field(&left.image, &kind_cfg)?;
            let (field_r, _) = compute_field(&right.image, &kind_cfg)?;
            let profile = cost_profile(&field_l, &field_r, (px, py), row)?;
            let path = if kinds.len() == 1 {
                out.clone()
            } else {
                with_kind_suffix(&out, kind.name())
            };
            let mut csv = String::new();
            for (x, cost) in &profile {
                csv.push_str(&format!("{x},{cost}\n"));
            }
            std::fs::write(&path, csv).map_err(|e| DescaError::io(&path, e))?;
            println!("wrote {}", path.display());
        }
        Ok(())
    })
}

pub fn bench(args: &BenchArgs) -> Result<(), AppError> {
    let mut cfg = resolve_config(&args.common)?;
    if let Some(input) = &args.input {
        cfg.input = Some(input.clone());
    }
    let input = require(&cfg.input, "--input")?;
    let crop_size = args.crop.unwrap_or(64);

    let pool = thread_pool(&cfg)?;
    let threads = pool.current_num_threads();
    pool.install(|| -> Result<(), AppError> {
        let loaded = load_with_warning(&input)?;
        let img = &loaded.image;

        let mut fast_cfg = cfg.clone();
        fast_cfg.path = ComputePath::Fast;
        let (_, fast_timings) = compute_field(img, &fast_cfg)?;

        // The direct path is quadratic in patch size and only feasible on a
        // small crop; center it to keep representative texture.
        let cw = crop_size.min(img.width());
        let ch = crop_size.min(img.height());
        let crop = img.crop((img.width() - cw) / 2, (img.height() - ch) / 2, cw, ch)?;
        let mut direct_cfg = cfg.clone();
        direct_cfg.path = ComputePath::Direct;
        let (_, direct_timings) = compute_field(&crop, &direct_cfg)?;

        let fast_per_px = fast_timings.total() / (img.width() * img.height()) as f64;
        let direct_per_px = direct_timings.total() / (cw * ch) as f64;
        let report = TimingReport {
            descriptor: cfg.descriptor,
            threads,
            image: ImageSize {
                width: img.width(),
                height: img.height(),
            },
            fast: StageReport::new(&fast_timings, None),
            direct_crop: ImageSize {
                width: cw,
                height: ch,
            },
            direct: StageReport::new(&direct_timings, None),
            per_pixel_ratio_direct_over_fast: direct_per_px / fast_per_px,
        };
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        match &cfg.out {
            Some(out) => {
                std::fs::write(out, &json).map_err(|e| DescaError::io(out, e))?;
                println!("wrote {}", out.display());
            }
            None => println!("{json}"),
        }
        Ok(())
    })
}

fn parse_pixel(s: &str) -> Result<(usize, usize), AppError> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(AppError::Config(format!(
            "bad --pixel '{s}' (expected X,Y)"
        )));
    }
    let x = parts[0]
        .trim()
        .parse()
        .map_err(|_| AppError::Config(format!("bad pixel x '{}'", parts[0])))?;
    let y = parts[1]
        .trim()
        .parse()
        .map_err(|_| AppError::Config(format!("bad pixel y '{}'", parts[1])))?;
    Ok((x, y))
}

fn with_kind_suffix(out: &Path, kind: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "profile".into());
    let ext = out
        .extension()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    out.with_file_name(format!("{stem}.{kind}.{ext}"))
}
