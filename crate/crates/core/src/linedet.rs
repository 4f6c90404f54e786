//! Oriented line segment detection on a single channel.
//!
//! A lightweight gradient-driven extractor: Gaussian presmoothing, 2x2
//! finite-difference gradients on the dual grid, region growing over
//! pixels whose level-line orientation agrees with the region, a
//! principal-axis rectangle fit, and a point-density acceptance gate.
//!
//! Direction convention: traversing a segment from `a` to `b`, the
//! brighter side of the underlying edge lies to the left (in image
//! coordinates, x right / y down). Flipping image contrast therefore
//! reverses every segment. The convention is what makes mirrored edge
//! pairs come out anti-parallel for the symmetry stage.

use thiserror::Error;

use crate::geom::{normalize_angle, OrientedSegment, Point2};
use crate::par::par_map;
use crate::raster::GrayImage;

#[derive(Debug, Error)]
pub enum LineDetectError {
    #[error("image {width}x{height} is below the {min}x{min} minimum")]
    ImageTooSmall { width: usize, height: usize, min: usize },
    #[error("channel {index} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    ChannelSizeMismatch { index: usize, want_w: usize, want_h: usize, got_w: usize, got_h: usize },
}

/// Tunables for the segment extractor.
#[derive(Debug, Clone)]
pub struct DetectorParams {
    /// Orientation agreement required to join a region, radians.
    pub angle_tolerance: f64,
    /// Minimum gradient magnitude, intensity units per pixel.
    pub gradient_threshold: f64,
    /// Minimum accepted segment length, pixels.
    pub min_length: f64,
    /// Minimum region point density inside the fitted rectangle.
    pub density_threshold: f64,
    /// Presmoothing scale, pixels.
    pub smoothing_sigma: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            angle_tolerance: std::f64::consts::PI / 8.0,
            gradient_threshold: 2.0 / 255.0,
            min_length: 8.0,
            density_threshold: 0.7,
            smoothing_sigma: 0.6,
        }
    }
}

const MIN_IMAGE_SIDE: usize = 16;
const MIN_REGION_PIXELS: usize = 8;

/// Dual-grid gradient field: values sit at pixel corners (x+0.5, y+0.5).
struct GradientField {
    width: usize,
    height: usize,
    gx: Vec<f64>,
    gy: Vec<f64>,
    mag: Vec<f64>,
    /// Level-line angle: gradient rotated a quarter turn, so it runs along
    /// the edge with the brighter side to its left.
    angle: Vec<f64>,
}

fn smooth(img: &GrayImage, sigma: f64) -> GrayImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= sum;
    }
    let (w, h) = (img.width() as i64, img.height() as i64);
    let clamp_get = |x: i64, y: i64| {
        img.get(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize)
    };
    // horizontal then vertical pass
    let mut tmp = GrayImage::new(w as usize, h as usize);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                acc += k * clamp_get(x + ki as i64 - radius, y);
            }
            tmp.set(x as usize, y as usize, acc);
        }
    }
    let mut out = GrayImage::new(w as usize, h as usize);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let yy = (y + ki as i64 - radius).clamp(0, h - 1);
                acc += k * tmp.get(x as usize, yy as usize);
            }
            out.set(x as usize, y as usize, acc);
        }
    }
    out
}

fn gradients(img: &GrayImage) -> GradientField {
    let w = img.width() - 1;
    let h = img.height() - 1;
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    let mut mag = vec![0.0; w * h];
    let mut angle = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i00 = img.get(x, y);
            let i10 = img.get(x + 1, y);
            let i01 = img.get(x, y + 1);
            let i11 = img.get(x + 1, y + 1);
            let dx = (i10 - i00 + i11 - i01) / 2.0;
            let dy = (i01 - i00 + i11 - i10) / 2.0;
            let idx = y * w + x;
            gx[idx] = dx;
            gy[idx] = dy;
            mag[idx] = dx.hypot(dy);
            angle[idx] = dx.atan2(-dy);
        }
    }
    GradientField { width: w, height: h, gx, gy, mag, angle }
}

fn angle_diff(a: f64, b: f64) -> f64 {
    normalize_angle(a - b).abs()
}

/// Detect oriented segments in one channel.
///
/// Output segments are at least `min_length` long and deduplicated (no two
/// share both endpoints within 1 px and direction within 1 degree).
pub fn detect_segments(
    img: &GrayImage,
    params: &DetectorParams,
) -> Result<Vec<OrientedSegment>, LineDetectError> {
    if img.width() < MIN_IMAGE_SIDE || img.height() < MIN_IMAGE_SIDE {
        return Err(LineDetectError::ImageTooSmall {
            width: img.width(),
            height: img.height(),
            min: MIN_IMAGE_SIDE,
        });
    }
    let smoothed = smooth(img, params.smoothing_sigma);
    let field = gradients(&smoothed);
    let (w, h) = (field.width, field.height);

    let mut seeds: Vec<usize> = (0..w * h)
        .filter(|&i| field.mag[i] >= params.gradient_threshold)
        .collect();
    // strongest gradients seed first; index breaks ties for determinism
    seeds.sort_by(|&a, &b| {
        field.mag[b].partial_cmp(&field.mag[a]).unwrap().then(a.cmp(&b))
    });

    let mut used = vec![false; w * h];
    let mut segments = Vec::new();
    let mut region: Vec<usize> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();

    for &seed in &seeds {
        if used[seed] {
            continue;
        }
        region.clear();
        stack.clear();
        used[seed] = true;
        stack.push(seed);
        region.push(seed);
        let mut sum_cos = field.angle[seed].cos();
        let mut sum_sin = field.angle[seed].sin();
        let mut region_angle = field.angle[seed];
        while let Some(idx) = stack.pop() {
            let cx = (idx % w) as i64;
            let cy = (idx / w) as i64;
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let nx = cx + dx;
                    let ny = cy + dy;
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let nidx = ny as usize * w + nx as usize;
                    if used[nidx]
                        || field.mag[nidx] < params.gradient_threshold
                        || angle_diff(field.angle[nidx], region_angle) > params.angle_tolerance
                    {
                        continue;
                    }
                    used[nidx] = true;
                    stack.push(nidx);
                    region.push(nidx);
                    sum_cos += field.angle[nidx].cos();
                    sum_sin += field.angle[nidx].sin();
                    region_angle = sum_sin.atan2(sum_cos);
                }
            }
        }
        if region.len() < MIN_REGION_PIXELS {
            continue;
        }
        if let Some(seg) = fit_segment(&field, &region, params) {
            segments.push(seg);
        }
    }
    Ok(dedup_segments(segments))
}

/// Magnitude-weighted principal-axis fit of a grown region.
fn fit_segment(
    field: &GradientField,
    region: &[usize],
    params: &DetectorParams,
) -> Option<OrientedSegment> {
    let w = field.width;
    let mut total = 0.0;
    let mut cx = 0.0;
    let mut cy = 0.0;
    let mut mean_gx = 0.0;
    let mut mean_gy = 0.0;
    for &idx in region {
        let m = field.mag[idx];
        let px = (idx % w) as f64 + 0.5;
        let py = (idx / w) as f64 + 0.5;
        total += m;
        cx += m * px;
        cy += m * py;
        mean_gx += m * field.gx[idx];
        mean_gy += m * field.gy[idx];
    }
    cx /= total;
    cy /= total;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &idx in region {
        let m = field.mag[idx];
        let px = (idx % w) as f64 + 0.5 - cx;
        let py = (idx / w) as f64 + 0.5 - cy;
        sxx += m * px * px;
        sxy += m * px * py;
        syy += m * py * py;
    }
    sxx /= total;
    sxy /= total;
    syy /= total;
    let half_trace = (sxx + syy) / 2.0;
    let det_term = (((sxx - syy) / 2.0).powi(2) + sxy * sxy).sqrt();
    let lambda = half_trace + det_term;
    let mut dir = if sxy.abs() > 1e-12 {
        Point2::new(sxy, lambda - sxx).normalized()
    } else if sxx >= syy {
        Point2::new(1.0, 0.0)
    } else {
        Point2::new(0.0, 1.0)
    };
    // brighter side to the left: left of (dx,dy) in y-down coords is (dy,-dx)
    if dir.y * mean_gx - dir.x * mean_gy < 0.0 {
        dir = -dir;
    }
    let mut t_min = f64::INFINITY;
    let mut t_max = f64::NEG_INFINITY;
    let mut s_min = f64::INFINITY;
    let mut s_max = f64::NEG_INFINITY;
    let center = Point2::new(cx, cy);
    for &idx in region {
        let p = Point2::new((idx % w) as f64 + 0.5, (idx / w) as f64 + 0.5) - center;
        let t = p.dot(dir);
        let s = p.x * dir.y - p.y * dir.x;
        t_min = t_min.min(t);
        t_max = t_max.max(t);
        s_min = s_min.min(s);
        s_max = s_max.max(s);
    }
    let length = t_max - t_min;
    if length < params.min_length {
        return None;
    }
    let width = (s_max - s_min).max(1.0);
    let density = region.len() as f64 / (length * width);
    if density < params.density_threshold {
        return None;
    }
    Some(OrientedSegment::new(center + dir * t_min, center + dir * t_max, 0))
}

fn dedup_segments(segments: Vec<OrientedSegment>) -> Vec<OrientedSegment> {
    let one_degree = 1.0_f64.to_radians();
    let mut kept: Vec<OrientedSegment> = Vec::with_capacity(segments.len());
    for seg in segments {
        let dup = kept.iter().any(|k| {
            k.a.dist(seg.a) <= 1.0
                && k.b.dist(seg.b) <= 1.0
                && angle_diff(
                    (k.b - k.a).y.atan2((k.b - k.a).x),
                    (seg.b - seg.a).y.atan2((seg.b - seg.a).x),
                ) <= one_degree
        });
        if !dup {
            kept.push(seg);
        }
    }
    kept
}

/// Run the detector on every channel and concatenate the results, each
/// segment tagged with its source channel index. Channels are processed
/// independently (and in parallel when enabled).
pub fn detect_all_channels(
    planes: &[GrayImage],
    params: &DetectorParams,
) -> Result<Vec<OrientedSegment>, LineDetectError> {
    assert!(!planes.is_empty(), "at least one channel required");
    let (w, h) = (planes[0].width(), planes[0].height());
    for (i, p) in planes.iter().enumerate().skip(1) {
        if p.width() != w || p.height() != h {
            return Err(LineDetectError::ChannelSizeMismatch {
                index: i,
                want_w: w,
                want_h: h,
                got_w: p.width(),
                got_h: p.height(),
            });
        }
    }
    let per_channel = par_map(planes, |plane| detect_segments(plane, params));
    let mut out = Vec::new();
    for (ch, res) in per_channel.into_iter().enumerate() {
        let mut segs = res?;
        for s in &mut segs {
            s.channel = ch as u8;
        }
        out.extend(segs);
    }
    Ok(out)
}
