//! Synthetic scene rendering with exact ground truth.
//!
//! Scenes contain bilaterally symmetric airplane-like silhouettes
//! (fuselage, swept wings, tailplane) at known position, scale, and
//! orientation, plus asymmetric clutter (strokes and rectangles) and
//! additive Gaussian noise. Rendering is anti-aliased via supersampled
//! coverage so the gradient-based detector sees clean edges.
//!
//! Everything is deterministic per seed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geom::{normalize_angle, Aabb, OrientedSegment, Point2};
use crate::par::par_map;
use crate::raster::{GrayImage, PlanarImage};
use crate::slsgen::symmetry_score;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("could not place object {index} after {attempts} attempts")]
    PlacementFailure { index: usize, attempts: usize },
    #[error("i/o failed on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("image write failed: {0}")]
    Raster(#[from] crate::raster::RasterError),
}

/// Scene recipe. `clutter_density` is the expected clutter element count
/// per 256x256 tile of image area.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub plane_count: usize,
    pub length_range: (f64, f64),
    pub clutter_density: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 384,
            height: 384,
            plane_count: 3,
            length_range: (30.0, 126.0),
            clutter_density: 4.0,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

/// Ground truth for one rendered silhouette.
#[derive(Debug, Clone)]
pub struct PlaneTruth {
    /// Tight axis-aligned box around the silhouette.
    pub bbox: Aabb,
    /// Fuselage axis direction (tail to nose), radians.
    pub axis: f64,
    /// Fuselage length, pixels.
    pub length: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SceneTruth {
    pub planes: Vec<PlaneTruth>,
}

/// A filled polygon queued for rasterization, with per-channel fill.
struct Shape {
    polygon: Vec<Point2>,
    bbox: Aabb,
    fill: [f64; 3],
}

pub(crate) struct SceneLayout {
    width: usize,
    height: usize,
    background: [f64; 3],
    planes: Vec<Shape>,
    clutter: Vec<Shape>,
    /// Centerlines of clutter strokes, for the non-mirror audit.
    #[cfg_attr(not(test), allow(dead_code))]
    pub(crate) stroke_centerlines: Vec<(Point2, Point2)>,
    pub(crate) truth: SceneTruth,
    noise_sigma: f64,
    noise_seed: u64,
}

fn polygon_bbox(poly: &[Point2]) -> Aabb {
    let mut x_min = f64::INFINITY;
    let mut y_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for p in poly {
        x_min = x_min.min(p.x);
        y_min = y_min.min(p.y);
        x_max = x_max.max(p.x);
        y_max = y_max.max(p.y);
    }
    Aabb::new(x_min, y_min, x_max, y_max)
}

fn boxes_overlap(a: &Aabb, b: &Aabb, margin: f64) -> bool {
    a.x_min - margin < b.x_max
        && b.x_min - margin < a.x_max
        && a.y_min - margin < b.y_max
        && b.y_min - margin < a.y_max
}

/// Even-odd point-in-polygon (polygons here may be non-convex).
fn point_in_polygon(p: Point2, poly: &[Point2]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > p.y) != (b.y > p.y) {
            let x_cross = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
            if p.x < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Bilaterally symmetric silhouette in local coordinates: fuselage along
/// +x with the nose at +x, mirror symmetry in y. Proportions are relative
/// to the fuselage length.
struct PlaneShapeParams {
    length: f64,
    fuselage_width: f64,
    nose_length: f64,
    wing_span: f64,
    wing_root_chord: f64,
    wing_sweep: f64,
    wing_leading_x: f64,
    tail_span: f64,
}

impl PlaneShapeParams {
    fn sample(len: f64, rng: &mut ChaCha8Rng) -> Self {
        let fuselage_width = len * rng.random_range(0.11..0.15);
        let nose_length = len * rng.random_range(0.12..0.20);
        let sweep_ratio: f64 = rng.random_range(0.55..0.80);
        let mut wing_span = len * rng.random_range(0.75..0.95);
        // keep the wing leading edge long enough for the line detector
        let min_edge = 13.0;
        let edge_scale = (1.0 + sweep_ratio * sweep_ratio).sqrt();
        let needed_half = min_edge / edge_scale + fuselage_width / 2.0;
        wing_span = wing_span.max(2.0 * needed_half).min(len * 0.99);
        let wing_sweep = sweep_ratio * (wing_span - fuselage_width) / 2.0;
        Self {
            length: len,
            fuselage_width,
            nose_length,
            wing_span,
            wing_root_chord: len * rng.random_range(0.18..0.26),
            wing_sweep,
            wing_leading_x: len * rng.random_range(0.10..0.18),
            tail_span: len * rng.random_range(0.30..0.42),
        }
    }

    /// Closed outline, counter-clockwise, symmetric about y = 0.
    fn outline(&self) -> Vec<Point2> {
        let l = self.length;
        let half_fw = self.fuselage_width / 2.0;
        let half_ws = self.wing_span / 2.0;
        let half_ts = self.tail_span / 2.0;
        let wing_te_x = self.wing_leading_x - self.wing_root_chord;
        let tip_chord = 0.25 * self.wing_root_chord;
        let tail_root_x = -0.24 * l;
        let tail_sweep = 0.14 * l;
        let rear_half = 0.5 * half_fw;
        let upper = vec![
            Point2::new(l / 2.0, 0.0),
            Point2::new(l / 2.0 - self.nose_length, half_fw),
            Point2::new(self.wing_leading_x, half_fw),
            Point2::new(self.wing_leading_x - self.wing_sweep, half_ws),
            Point2::new(self.wing_leading_x - self.wing_sweep - tip_chord, half_ws),
            Point2::new(wing_te_x, half_fw),
            Point2::new(tail_root_x, half_fw),
            Point2::new(tail_root_x - tail_sweep, half_ts),
            Point2::new(-l / 2.0 + 0.02 * l, half_ts),
            Point2::new(-l / 2.0, rear_half),
        ];
        let mut outline = upper.clone();
        for p in upper.iter().rev() {
            if p.y != 0.0 {
                outline.push(Point2::new(p.x, -p.y));
            }
        }
        outline
    }
}

fn transform_outline(outline: &[Point2], center: Point2, angle: f64) -> Vec<Point2> {
    outline.iter().map(|p| center + p.rotated(angle)).collect()
}

/// Per-channel fill clearly separated from the background level.
fn sample_fill(background: &[f64; 3], min_contrast: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let brighter = rng.random_bool(0.5);
    let mut fill = [0.0; 3];
    for c in 0..3 {
        let delta = min_contrast + rng.random_range(0.0..0.25);
        fill[c] = if brighter {
            (background[c] + delta).min(0.98)
        } else {
            (background[c] - delta).max(0.02)
        };
    }
    fill
}

pub(crate) fn plan_scene(spec: &SceneSpec) -> Result<SceneLayout, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let base: f64 = rng.random_range(0.30..0.45);
    let background = [
        (base + rng.random_range(-0.02..0.02)).clamp(0.05, 0.95),
        (base + rng.random_range(-0.02..0.02)).clamp(0.05, 0.95),
        (base + rng.random_range(-0.02..0.02)).clamp(0.05, 0.95),
    ];
    let (w, h) = (spec.width as f64, spec.height as f64);
    let mut planes = Vec::new();
    let mut truth = SceneTruth::default();
    let mut occupied: Vec<Aabb> = Vec::new();

    for index in 0..spec.plane_count {
        let mut placed = false;
        for _attempt in 0..1000 {
            let len = rng.random_range(spec.length_range.0..=spec.length_range.1);
            let shape = PlaneShapeParams::sample(len, &mut rng);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let reach = (len / 2.0).max(shape.wing_span / 2.0) + 4.0;
            if 2.0 * reach + 8.0 > w.min(h) {
                continue;
            }
            let center = Point2::new(
                rng.random_range(reach + 4.0..w - reach - 4.0),
                rng.random_range(reach + 4.0..h - reach - 4.0),
            );
            let polygon = transform_outline(&shape.outline(), center, angle);
            let bbox = polygon_bbox(&polygon);
            if occupied.iter().any(|other| boxes_overlap(&bbox, other, 6.0)) {
                continue;
            }
            let fill = sample_fill(&background, 0.2, &mut rng);
            occupied.push(bbox);
            truth.planes.push(PlaneTruth { bbox, axis: normalize_angle(angle), length: len });
            planes.push(Shape { polygon, bbox, fill });
            placed = true;
            break;
        }
        if !placed {
            return Err(SynthError::PlacementFailure { index, attempts: 1000 });
        }
    }

    let clutter_target =
        (spec.clutter_density * (spec.width * spec.height) as f64 / 65536.0).round() as usize;
    let mut clutter = Vec::new();
    let mut stroke_centerlines: Vec<(Point2, Point2)> = Vec::new();
    for _ in 0..clutter_target {
        let make_stroke = rng.random_bool(0.7);
        for _attempt in 0..200 {
            if make_stroke {
                let len = rng.random_range(10.0..40.0);
                let half_width = rng.random_range(0.8..2.2);
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let reach = len / 2.0 + half_width + 2.0;
                if 2.0 * reach + 4.0 > w.min(h) {
                    continue;
                }
                let center = Point2::new(
                    rng.random_range(reach..w - reach),
                    rng.random_range(reach..h - reach),
                );
                let dir = Point2::new(angle.cos(), angle.sin());
                let a = center - dir * (len / 2.0);
                let b = center + dir * (len / 2.0);
                if stroke_mirrors_existing(a, b, &stroke_centerlines) {
                    continue;
                }
                let normal = Point2::new(-dir.y, dir.x);
                let polygon = vec![
                    a + normal * half_width,
                    a - normal * half_width,
                    b - normal * half_width,
                    b + normal * half_width,
                ];
                let bbox = polygon_bbox(&polygon);
                if occupied.iter().any(|other| boxes_overlap(&bbox, other, 4.0)) {
                    continue;
                }
                let fill = sample_fill(&background, 0.15, &mut rng);
                occupied.push(bbox);
                stroke_centerlines.push((a, b));
                clutter.push(Shape { polygon, bbox, fill });
            } else {
                let rect_w: f64 = rng.random_range(6.0..26.0);
                let rect_h: f64 = rng.random_range(6.0..26.0);
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let reach = rect_w.hypot(rect_h) / 2.0 + 2.0;
                if 2.0 * reach + 4.0 > w.min(h) {
                    continue;
                }
                let center = Point2::new(
                    rng.random_range(reach..w - reach),
                    rng.random_range(reach..h - reach),
                );
                let polygon: Vec<Point2> = [
                    Point2::new(-rect_w / 2.0, -rect_h / 2.0),
                    Point2::new(rect_w / 2.0, -rect_h / 2.0),
                    Point2::new(rect_w / 2.0, rect_h / 2.0),
                    Point2::new(-rect_w / 2.0, rect_h / 2.0),
                ]
                .iter()
                .map(|p| center + p.rotated(angle))
                .collect();
                let bbox = polygon_bbox(&polygon);
                if occupied.iter().any(|other| boxes_overlap(&bbox, other, 4.0)) {
                    continue;
                }
                let fill = sample_fill(&background, 0.15, &mut rng);
                occupied.push(bbox);
                clutter.push(Shape { polygon, bbox, fill });
            }
            break;
        }
    }

    Ok(SceneLayout {
        width: spec.width,
        height: spec.height,
        background,
        planes,
        clutter,
        stroke_centerlines,
        truth,
        noise_sigma: spec.noise_sigma,
        noise_seed: spec.seed ^ 0x6e6f_6973_655f_7365,
    })
}

/// True when the candidate stroke would form a near-mirror pair with any
/// already placed stroke under either traversal, which would let clutter
/// alone pass the symmetry gate.
fn stroke_mirrors_existing(a: Point2, b: Point2, existing: &[(Point2, Point2)]) -> bool {
    let cand = OrientedSegment::new(a, b, 0);
    let cand_rev = OrientedSegment::new(b, a, 0);
    for &(ea, eb) in existing {
        let other = OrientedSegment::new(ea, eb, 0);
        for s in [&cand, &cand_rev] {
            if let Ok(sym) = symmetry_score(s, &other) {
                if sym < 0.35 {
                    return true;
                }
            }
        }
    }
    false
}

fn render_layout(layout: &SceneLayout) -> PlanarImage {
    let (w, h) = (layout.width, layout.height);
    let mut planes: Vec<GrayImage> =
        (0..3).map(|c| GrayImage::filled(w, h, layout.background[c])).collect();
    for shape in layout.planes.iter().chain(layout.clutter.iter()) {
        let x0 = (shape.bbox.x_min.floor() as i64 - 1).max(0) as usize;
        let y0 = (shape.bbox.y_min.floor() as i64 - 1).max(0) as usize;
        let x1 = (shape.bbox.x_max.ceil() as usize + 1).min(w - 1);
        let y1 = (shape.bbox.y_max.ceil() as usize + 1).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let mut cov = 0.0;
                for sy in 0..4 {
                    for sx in 0..4 {
                        let p = Point2::new(
                            x as f64 + (sx as f64 + 0.5) / 4.0 - 0.5,
                            y as f64 + (sy as f64 + 0.5) / 4.0 - 0.5,
                        );
                        if point_in_polygon(p, &shape.polygon) {
                            cov += 1.0 / 16.0;
                        }
                    }
                }
                if cov > 0.0 {
                    for c in 0..3 {
                        let old = planes[c].get(x, y);
                        planes[c].set(x, y, old * (1.0 - cov) + shape.fill[c] * cov);
                    }
                }
            }
        }
    }
    if layout.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(layout.noise_seed);
        let normal = Normal::new(0.0, layout.noise_sigma).unwrap();
        for plane in planes.iter_mut() {
            for y in 0..h {
                for x in 0..w {
                    let v = plane.get(x, y) + normal.sample(&mut rng);
                    plane.set(x, y, v.clamp(0.0, 1.0));
                }
            }
        }
    }
    PlanarImage::new(planes).expect("planes share dimensions")
}

/// Render a scene and its exact ground truth. Deterministic per seed.
pub fn render_scene(spec: &SceneSpec) -> Result<(PlanarImage, SceneTruth), SynthError> {
    let layout = plan_scene(spec)?;
    let image = render_layout(&layout);
    Ok((image, layout.truth))
}

/// Parsed row of an axis-truth sidecar: `gt_index  axis_radians  length_px`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisTruth {
    pub gt_index: usize,
    pub axis: f64,
    pub length: f64,
}

/// Read an axis-truth sidecar written by [`emit_dataset`].
pub fn parse_axis_sidecar<R: std::io::BufRead>(input: R) -> std::io::Result<Vec<AxisTruth>> {
    let mut rows = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let bad = || std::io::Error::new(std::io::ErrorKind::InvalidData, "bad axis sidecar row");
        let gt_index = fields.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let axis = fields.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let length = fields.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        rows.push(AxisTruth { gt_index, axis, length });
    }
    Ok(rows)
}

/// One emitted image with its sidecar files.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub image_id: String,
    pub image_path: PathBuf,
    pub annotation_path: PathBuf,
    pub axis_path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

fn derive_seed(base: u64, index: u64) -> u64 {
    base ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Annotation line for one box: integer corners, class 1.
fn annotation_line(bbox: &Aabb) -> String {
    format!(
        "({},{}),({},{}),1",
        bbox.x_min.floor() as i64,
        bbox.y_min.floor() as i64,
        bbox.x_max.ceil() as i64,
        bbox.y_max.ceil() as i64,
    )
}

/// Render `n_images` scenes and write PNGs, box annotations, axis-truth
/// sidecars, and a manifest under `out_dir`. Per-image seeds derive from
/// `spec.seed`, so the whole dataset is reproducible byte for byte.
pub fn emit_dataset(n_images: usize, spec: &SceneSpec, out_dir: &Path) -> Result<Manifest, SynthError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|source| SynthError::Io { path: out_dir.to_path_buf(), source })?;
    let rendered = par_map(&(0..n_images).collect::<Vec<_>>(), |&i| {
        let per_image = SceneSpec { seed: derive_seed(spec.seed, i as u64), ..spec.clone() };
        render_scene(&per_image)
    });
    let mut entries = Vec::with_capacity(n_images);
    for (i, result) in rendered.into_iter().enumerate() {
        let (image, truth) = result?;
        let image_id = format!("img_{i:04}");
        let image_path = out_dir.join(format!("{image_id}.png"));
        let annotation_path = out_dir.join(format!("{image_id}.txt"));
        let axis_path = out_dir.join(format!("{image_id}.axis.tsv"));
        image.save_png(&image_path)?;
        let mut ann = String::new();
        let mut axis = String::new();
        for (gt_index, plane) in truth.planes.iter().enumerate() {
            let _ = writeln!(ann, "{}", annotation_line(&plane.bbox));
            let _ = writeln!(axis, "{gt_index}\t{}\t{}", plane.axis, plane.length);
        }
        std::fs::write(&annotation_path, ann)
            .map_err(|source| SynthError::Io { path: annotation_path.clone(), source })?;
        std::fs::write(&axis_path, axis)
            .map_err(|source| SynthError::Io { path: axis_path.clone(), source })?;
        entries.push(ManifestEntry { image_id, image_path, annotation_path, axis_path });
    }
    let mut manifest_text = format!("seed\t{}\n", spec.seed);
    for e in &entries {
        let _ = writeln!(
            manifest_text,
            "image\t{}\t{}\t{}\t{}",
            e.image_id,
            e.image_path.display(),
            e.annotation_path.display(),
            e.axis_path.display(),
        );
    }
    let manifest_path = out_dir.join("manifest.tsv");
    std::fs::write(&manifest_path, manifest_text)
        .map_err(|source| SynthError::Io { path: manifest_path, source })?;
    Ok(Manifest { seed: spec.seed, entries })
}
