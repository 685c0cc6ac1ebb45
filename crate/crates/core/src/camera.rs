//! Synthetic front-camera rendering and the image preprocessing pipeline.
//!
//! The renderer is a pinhole camera over a flat road plane: gray asphalt
//! with texture noise, white lane markings (solid outer, dashed inner), a
//! darker verge beyond the shoulder and a vertical sky gradient. Every image
//! row below the horizon maps to a constant forward distance, so markings
//! are intersected once per row and painted with horizontal coverage
//! anti-aliasing.
//!
//! Preprocessing crops 35% of the top and 15% of the bottom, resamples
//! bilinearly to 68x183 and standardizes per image.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Centerline, GeometryError};
use crate::nn::Tensor;
use crate::vehicle::VehicleState;

/// Network input height after preprocessing.
pub const INPUT_HEIGHT: usize = 68;
/// Network input width after preprocessing.
pub const INPUT_WIDTH: usize = 183;
/// Floor applied to the per-image standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

const ROAD_GRAY: f64 = 90.0;
const VERGE_GRAY: f64 = 60.0;
const MARKING_GRAY: f64 = 230.0;
const SKY_TOP: f64 = 180.0;
const SKY_HORIZON: f64 = 120.0;
const MARKING_WIDTH: f64 = 0.15;
const SHOULDER: f64 = 0.5;
const DASH_ON: f64 = 3.0;
const DASH_PERIOD: f64 = 12.0;
const MAX_RANGE: f64 = 250.0;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("cannot render: {0}")]
    Localization(#[from] GeometryError),
    #[error("frame of height {0} is too small to crop (need at least 20 rows)")]
    TooSmallToCrop(usize),
    #[error("invalid output size {out_h}x{out_w} for a {in_h}x{in_w} frame")]
    InvalidResize { out_h: usize, out_w: usize, in_h: usize, in_w: usize },
    #[error("invalid camera configuration: {0}")]
    InvalidConfig(String),
    #[error("pixel buffer of {len} bytes does not match {width}x{height}")]
    BufferSize { len: usize, width: usize, height: usize },
    #[error("png {path}: {reason}")]
    Png { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub image_width: usize,
    pub image_height: usize,
    /// Meters above the road.
    pub height_above_road: f64,
    /// Radians; negative tilts the camera down.
    pub pitch: f64,
    pub horizontal_fov: f64,
    /// Meters ahead of the rear axle.
    pub mount_forward: f64,
    /// Standard deviation of the road texture noise, gray levels.
    pub noise_std: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            image_width: 640,
            image_height: 480,
            height_above_road: 1.4,
            pitch: -0.03,
            horizontal_fov: 1.05,
            mount_forward: 2.0,
            noise_std: 4.0,
        }
    }
}

impl CameraConfig {
    pub fn validate(&self) -> Result<(), CameraError> {
        let bad = |m: &str| Err(CameraError::InvalidConfig(m.to_string()));
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image dimensions must be positive");
        }
        if !(self.horizontal_fov > 0.0 && self.horizontal_fov < std::f64::consts::PI) {
            return bad("horizontal fov must lie in (0, pi)");
        }
        if !(self.height_above_road > 0.0) {
            return bad("camera height must be positive");
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise std must be non-negative");
        }
        Ok(())
    }

    fn focal(&self) -> f64 {
        0.5 * self.image_width as f64 / (0.5 * self.horizontal_fov).tan()
    }
}

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayFrame {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayFrame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, CameraError> {
        if pixels.len() != width * height {
            return Err(CameraError::BufferSize { len: pixels.len(), width, height });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self { width, height, pixels: vec![value; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, CameraError> {
        let mut buf = Vec::new();
        self.write_png(&mut buf, "<memory>")?;
        Ok(buf)
    }

    fn write_png<W: Write>(&self, w: W, path: &str) -> Result<(), CameraError> {
        let err = |e: png::EncodingError| CameraError::Png { path: path.to_string(), reason: e.to_string() };
        let mut enc = png::Encoder::new(w, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Fast);
        let mut writer = enc.write_header().map_err(err)?;
        writer.write_image_data(&self.pixels).map_err(err)?;
        writer.finish().map_err(err)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), CameraError> {
        let name = path.display().to_string();
        let file = File::create(path).map_err(|e| CameraError::Png { path: name.clone(), reason: e.to_string() })?;
        self.write_png(BufWriter::new(file), &name)
    }

    pub fn load_png(path: &Path) -> Result<Self, CameraError> {
        let name = path.display().to_string();
        let err = |reason: String| CameraError::Png { path: name.clone(), reason };
        let file = File::open(path).map_err(|e| err(e.to_string()))?;
        let decoder = png::Decoder::new(BufReader::new(file));
        let mut reader = decoder.read_info().map_err(|e| err(e.to_string()))?;
        let info = reader.info();
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
            return Err(err(format!(
                "expected 8-bit grayscale, found {:?} {:?}",
                info.color_type, info.bit_depth
            )));
        }
        let (width, height) = (info.width as usize, info.height as usize);
        let mut pixels = vec![0u8; reader.output_buffer_size().ok_or_else(|| err("image too large".into()))?];
        let out = reader.next_frame(&mut pixels).map_err(|e| err(e.to_string()))?;
        pixels.truncate(out.buffer_size());
        GrayFrame::new(width, height, pixels)
    }
}

/// A rendered frame plus the per-pixel lane-marking coverage in [0, 1].
#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub frame: GrayFrame,
    pub marking_coverage: Vec<f32>,
}

impl RenderedFrame {
    /// Marking coverage mapped through crop and downsample, as an 8-bit
    /// frame at network resolution (255 = fully covered).
    pub fn marking_mask_at_input(&self) -> Result<GrayFrame, CameraError> {
        let f = &self.frame;
        let px = self.marking_coverage.iter().map(|c| (c * 255.0).round() as u8).collect();
        let cov = GrayFrame::new(f.width, f.height, px)?;
        downsample_bilinear(&crop(&cov)?, INPUT_HEIGHT, INPUT_WIDTH)
    }
}

/// One lane marking sampled in the camera frame.
struct MarkingTrack {
    dashed: bool,
    /// (forward, left, centerline arc length), ordered along the road.
    samples: Vec<(f64, f64, f64)>,
}

impl MarkingTrack {
    /// Left offset and arc length where the marking first reaches `forward`.
    fn crossing(&self, forward: f64) -> Option<(f64, f64)> {
        self.samples.windows(2).find_map(|w| {
            let (a, b) = (w[0], w[1]);
            let lo = a.0.min(b.0);
            let hi = a.0.max(b.0);
            if forward < lo || forward > hi || hi == lo {
                return None;
            }
            let t = (forward - a.0) / (b.0 - a.0);
            Some((a.1 + t * (b.1 - a.1), a.2 + t * (b.2 - a.2)))
        })
    }
}

pub fn render(
    road: &Centerline,
    pose: &VehicleState,
    lane_index: usize,
    cfg: &CameraConfig,
    seed: u64,
) -> Result<GrayFrame, CameraError> {
    Ok(render_scene(road, pose, lane_index, cfg, seed)?.frame)
}

/// Renders the scene and reports which pixels show lane markings.
pub fn render_scene(
    road: &Centerline,
    pose: &VehicleState,
    lane_index: usize,
    cfg: &CameraConfig,
    seed: u64,
) -> Result<RenderedFrame, CameraError> {
    cfg.validate()?;
    let lane_pose = road.localize(pose.x, pose.y, pose.psi, lane_index)?;
    let (w, h) = (cfg.image_width, cfg.image_height);
    let focal = cfg.focal();
    let tilt = -cfg.pitch;
    let (sin_t, cos_t) = tilt.sin_cos();
    let (sin_p, cos_p) = pose.psi.sin_cos();
    let cam = (pose.x + cfg.mount_forward * cos_p, pose.y + cfg.mount_forward * sin_p);

    let lanes = road.lanes();
    let offsets = lanes.marking_offsets();
    let s_lo = (lane_pose.s - 20.0).max(0.0);
    let s_hi = (lane_pose.s + 1.3 * MAX_RANGE).min(road.length());
    let first = road.arc_length().partition_point(|&a| a < s_lo).saturating_sub(1);
    let last = road.arc_length().partition_point(|&a| a <= s_hi).min(road.points().len());
    let tracks: Vec<MarkingTrack> = offsets
        .iter()
        .enumerate()
        .map(|(k, &off)| {
            let samples = (first..last)
                .map(|i| {
                    let p = road.points()[i];
                    let hd = road.headings()[i];
                    let (mx, my) = (p.x - off * hd.sin() - cam.0, p.y + off * hd.cos() - cam.1);
                    (mx * cos_p + my * sin_p, -mx * sin_p + my * cos_p, road.arc_length()[i])
                })
                .collect();
            MarkingTrack { dashed: k != 0 && k != offsets.len() - 1, samples }
        })
        .collect();

    let mut pixels = vec![0u8; w * h];
    let mut coverage = vec![0f32; w * h];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("finite std");
    let use_noise = cfg.noise_std > 0.0;

    // Row where the viewing ray is parallel to the ground.
    let horizon_row = h as f64 / 2.0 - focal * tilt.tan() - 0.5;
    let mut crossings: Vec<Option<(f64, f64, bool)>> = Vec::with_capacity(tracks.len());

    for row in 0..h {
        let b = (row as f64 + 0.5 - h as f64 / 2.0) / focal;
        let denom = sin_t + b * cos_t;
        let line = &mut pixels[row * w..(row + 1) * w];
        if denom <= 0.0 {
            let frac = if horizon_row > 0.0 { (row as f64 / horizon_row).clamp(0.0, 1.0) } else { 1.0 };
            let v = (SKY_TOP + (SKY_HORIZON - SKY_TOP) * frac).round() as u8;
            line.fill(v);
            continue;
        }
        let lambda = cfg.height_above_road / denom;
        let forward = lambda * (cos_t - b * sin_t);
        let pixel_width = lambda / focal;
        crossings.clear();
        if forward <= MAX_RANGE {
            crossings.extend(tracks.iter().map(|t| t.crossing(forward).map(|(l, s)| (l, s, t.dashed))));
        }
        let right_edge = crossings.first().copied().flatten().map(|c| c.0 - SHOULDER);
        let left_edge = crossings.last().copied().flatten().map(|c| c.0 + SHOULDER);
        let cov_line = &mut coverage[row * w..(row + 1) * w];
        for col in 0..w {
            let a = (col as f64 + 0.5 - w as f64 / 2.0) / focal;
            let left = -lambda * a;
            let on_road = match (right_edge, left_edge) {
                (Some(r), Some(l)) => left >= r && left <= l,
                _ => false,
            };
            let mut value = if on_road { ROAD_GRAY } else { VERGE_GRAY };
            let mut cov = 0.0f64;
            for c in crossings.iter().flatten() {
                let (lat, s, dashed) = *c;
                if dashed && (s.rem_euclid(DASH_PERIOD)) >= DASH_ON {
                    continue;
                }
                let lo = (left - 0.5 * pixel_width).max(lat - 0.5 * MARKING_WIDTH);
                let hi = (left + 0.5 * pixel_width).min(lat + 0.5 * MARKING_WIDTH);
                if hi > lo {
                    cov += (hi - lo) / pixel_width;
                }
            }
            let cov = cov.min(1.0);
            value += cov * (MARKING_GRAY - value);
            if use_noise {
                value += noise.sample(&mut rng);
            }
            line[col] = value.round().clamp(0.0, 255.0) as u8;
            cov_line[col] = cov as f32;
        }
    }
    Ok(RenderedFrame { frame: GrayFrame { width: w, height: h, pixels }, marking_coverage: coverage })
}

/// Removes floor(35%) of the rows at the top and floor(15%) at the bottom.
pub fn crop(f: &GrayFrame) -> Result<GrayFrame, CameraError> {
    if f.height < 20 {
        return Err(CameraError::TooSmallToCrop(f.height));
    }
    let top = 35 * f.height / 100;
    let bottom = 15 * f.height / 100;
    let rows = f.height - top - bottom;
    let pixels = f.pixels[top * f.width..(top + rows) * f.width].to_vec();
    Ok(GrayFrame { width: f.width, height: rows, pixels })
}

fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling with pixel-center alignment.
pub fn downsample_bilinear(f: &GrayFrame, out_h: usize, out_w: usize) -> Result<GrayFrame, CameraError> {
    if out_h == 0 || out_w == 0 || out_h > f.height || out_w > f.width {
        return Err(CameraError::InvalidResize { out_h, out_w, in_h: f.height, in_w: f.width });
    }
    let rows = bilinear_taps(f.height, out_h);
    let cols = bilinear_taps(f.width, out_w);
    let mut pixels = Vec::with_capacity(out_h * out_w);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            let p = |r: usize, c: usize| f.pixels[r * f.width + c] as f64;
            let top = p(r0, c0) + fx * (p(r0, c1) - p(r0, c0));
            let bot = p(r1, c0) + fx * (p(r1, c1) - p(r1, c0));
            let v = top + fy * (bot - top);
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(GrayFrame { width: out_w, height: out_h, pixels })
}

/// Preprocessed network input with shape `[1, height, width]`.
pub type FeatureTensor = Tensor;

/// Per-image standardization with a population standard deviation.
pub fn standardize(f: &GrayFrame) -> FeatureTensor {
    let n = f.pixels.len() as f64;
    let mean = f.pixels.iter().map(|&p| p as f64).sum::<f64>() / n;
    let var = f.pixels.iter().map(|&p| (p as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    let values = f.pixels.iter().map(|&p| (p as f64 - mean) / std).collect();
    Tensor::from_vec(vec![1, f.height, f.width], values).expect("shape matches pixel count")
}

/// Crop and downsample to the fixed 68x183 network resolution.
pub fn reduce_to_input(f: &GrayFrame) -> Result<GrayFrame, CameraError> {
    downsample_bilinear(&crop(f)?, INPUT_HEIGHT, INPUT_WIDTH)
}

/// Full pipeline: crop, downsample to 68x183, standardize.
pub fn preprocess(f: &GrayFrame) -> Result<FeatureTensor, CameraError> {
    Ok(standardize(&reduce_to_input(f)?))
}
