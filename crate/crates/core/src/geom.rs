//! Planar geometry shared by every pipeline stage: points, directed
//! segments, oriented squares, axis-aligned boxes, and exact convex
//! polygon clipping backing the oriented IoU.
//!
//! All operations are pure functions on immutable values. Vertices are
//! kept counter-clockwise (positive shoelace sign) throughout.

use std::ops::{Add, Mul, Neg, Sub};

use thiserror::Error;

/// Tolerance for degeneracy checks and on-edge vertex classification.
pub const GEOM_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    /// The two points defining a reflection axis coincide.
    #[error("degenerate axis: defining points coincide within {GEOM_EPS}")]
    DegenerateAxis,
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("polygon vertices are not counter-clockwise convex")]
    NotConvex,
}

/// A point (or free vector) in the image plane, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        assert!(x.is_finite() && y.is_finite(), "non-finite point ({x}, {y})");
        Self { x, y }
    }

    pub fn dot(self, other: Self) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// Z-component of the cross product, positive when `other` lies
    /// counter-clockwise from `self`.
    pub fn cross(self, other: Self) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, other: Self) -> f64 {
        (self - other).norm()
    }

    pub fn normalized(self) -> Self {
        let n = self.norm();
        Self { x: self.x / n, y: self.y / n }
    }

    /// Rotate counter-clockwise by `angle` radians.
    pub fn rotated(self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self { x: c * self.x - s * self.y, y: s * self.x + c * self.y }
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2 { x: self.x + rhs.x, y: self.y + rhs.y }
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2 { x: self.x - rhs.x, y: self.y - rhs.y }
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, s: f64) -> Point2 {
        Point2 { x: self.x * s, y: self.y * s }
    }
}

impl Neg for Point2 {
    type Output = Point2;
    fn neg(self) -> Point2 {
        Point2 { x: -self.x, y: -self.y }
    }
}

/// Normalize an angle into `(-pi, pi]`.
pub fn normalize_angle(theta: f64) -> f64 {
    let mut a = theta % std::f64::consts::TAU;
    if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    } else if a <= -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    }
    a
}

/// A directed 2-D line segment. The direction a->b follows the detector's
/// contrast convention: walking from `a` to `b`, the brighter side of the
/// underlying edge lies to the left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedSegment {
    pub a: Point2,
    pub b: Point2,
    /// Source image channel the segment was detected in.
    pub channel: u8,
}

impl OrientedSegment {
    pub fn new(a: Point2, b: Point2, channel: u8) -> Self {
        assert!(a != b, "zero-length segment");
        Self { a, b, channel }
    }

    pub fn length(&self) -> f64 {
        self.a.dist(self.b)
    }

    /// Unit direction from `a` to `b`.
    pub fn direction(&self) -> Point2 {
        (self.b - self.a).normalized()
    }
}

/// A square of side `side` centered at `center`, with edges along
/// `theta` and `theta + pi/2`. `theta` doubles as the direction estimate
/// carried through to detections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedSquare {
    pub center: Point2,
    pub side: f64,
    pub theta: f64,
}

impl OrientedSquare {
    pub fn new(center: Point2, side: f64, theta: f64) -> Self {
        assert!(side > 0.0 && side.is_finite(), "invalid square side {side}");
        Self { center, side, theta: normalize_angle(theta) }
    }

    /// Corner vertices in counter-clockwise order.
    pub fn corners(&self) -> [Point2; 4] {
        let h = self.side / 2.0;
        let local = [
            Point2 { x: -h, y: -h },
            Point2 { x: h, y: -h },
            Point2 { x: h, y: h },
            Point2 { x: -h, y: h },
        ];
        local.map(|p| self.center + p.rotated(self.theta))
    }

    pub fn area(&self) -> f64 {
        self.side * self.side
    }
}

/// Axis-aligned box, `min` corner exclusive of `max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Aabb {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        assert!(x_min < x_max && y_min < y_max, "empty box [{x_min},{x_max}]x[{y_min},{y_max}]");
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point2 {
        Point2 { x: (self.x_min + self.x_max) / 2.0, y: (self.y_min + self.y_max) / 2.0 }
    }

    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }
}

/// Convex polygon with counter-clockwise vertices (positive shoelace sign).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon {
    verts: Vec<Point2>,
}

impl ConvexPolygon {
    /// Validate vertex count, orientation, and convexity (within `GEOM_EPS`,
    /// relative to edge lengths).
    pub fn new(verts: Vec<Point2>) -> Result<Self, GeomError> {
        if verts.len() < 3 {
            return Err(GeomError::TooFewVertices(verts.len()));
        }
        let n = verts.len();
        for i in 0..n {
            let e1 = verts[(i + 1) % n] - verts[i];
            let e2 = verts[(i + 2) % n] - verts[(i + 1) % n];
            if e1.cross(e2) < -GEOM_EPS * e1.norm() * e2.norm() {
                return Err(GeomError::NotConvex);
            }
        }
        let poly = Self { verts };
        if poly.area() <= GEOM_EPS {
            return Err(GeomError::NotConvex);
        }
        Ok(poly)
    }

    /// Caller guarantees CCW convexity.
    fn from_ccw_unchecked(verts: Vec<Point2>) -> Self {
        Self { verts }
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.verts
    }

    /// Shoelace area.
    pub fn area(&self) -> f64 {
        let n = self.verts.len();
        let mut twice = 0.0;
        for i in 0..n {
            twice += self.verts[i].cross(self.verts[(i + 1) % n]);
        }
        twice / 2.0
    }

    /// Point-in-polygon test, boundary counts as inside.
    pub fn contains(&self, p: Point2) -> bool {
        let n = self.verts.len();
        for i in 0..n {
            let a = self.verts[i];
            let b = self.verts[(i + 1) % n];
            if (b - a).cross(p - a) < -GEOM_EPS * (b - a).norm().max(1.0) {
                return false;
            }
        }
        true
    }
}

/// Shapes convertible to a convex polygon for clipping and IoU.
pub trait ToConvex {
    fn to_convex(&self) -> ConvexPolygon;
}

impl ToConvex for OrientedSquare {
    fn to_convex(&self) -> ConvexPolygon {
        ConvexPolygon::from_ccw_unchecked(self.corners().to_vec())
    }
}

impl ToConvex for Aabb {
    fn to_convex(&self) -> ConvexPolygon {
        ConvexPolygon::from_ccw_unchecked(vec![
            Point2 { x: self.x_min, y: self.y_min },
            Point2 { x: self.x_max, y: self.y_min },
            Point2 { x: self.x_max, y: self.y_max },
            Point2 { x: self.x_min, y: self.y_max },
        ])
    }
}

impl ToConvex for ConvexPolygon {
    fn to_convex(&self) -> ConvexPolygon {
        self.clone()
    }
}

/// Mirror `p` across the infinite line through `axis_a` and `axis_b`.
///
/// Reflecting twice returns the original point (within `GEOM_EPS`).
pub fn reflect_point(p: Point2, axis_a: Point2, axis_b: Point2) -> Result<Point2, GeomError> {
    let axis = axis_b - axis_a;
    if axis.norm() <= GEOM_EPS {
        return Err(GeomError::DegenerateAxis);
    }
    let u = axis.normalized();
    let v = p - axis_a;
    let proj = u * v.dot(u);
    Ok(axis_a + proj * 2.0 - v)
}

/// Intersection of two convex polygons (Sutherland-Hodgman clip of
/// `subject` against each edge of `clip`). `None` when the shapes are
/// disjoint or the intersection degenerates to a point or line.
pub fn clip_convex(subject: &ConvexPolygon, clip: &ConvexPolygon) -> Option<ConvexPolygon> {
    let mut output: Vec<Point2> = subject.verts.clone();
    let cn = clip.verts.len();
    for i in 0..cn {
        if output.is_empty() {
            return None;
        }
        let c1 = clip.verts[i];
        let c2 = clip.verts[(i + 1) % cn];
        let edge = c2 - c1;
        let scale = edge.norm().max(1.0);
        let input = std::mem::take(&mut output);
        let n = input.len();
        for j in 0..n {
            let cur = input[j];
            let prev = input[(j + n - 1) % n];
            // signed distance proxy: positive = inside (left of CCW edge)
            let d_cur = edge.cross(cur - c1);
            let d_prev = edge.cross(prev - c1);
            let cur_in = d_cur >= -GEOM_EPS * scale;
            let prev_in = d_prev >= -GEOM_EPS * scale;
            if cur_in {
                if !prev_in {
                    output.push(edge_intersection(prev, cur, d_prev, d_cur));
                }
                output.push(cur);
            } else if prev_in {
                output.push(edge_intersection(prev, cur, d_prev, d_cur));
            }
        }
    }
    let cleaned = merge_degenerate_vertices(output);
    if cleaned.len() < 3 {
        return None;
    }
    let poly = ConvexPolygon::from_ccw_unchecked(cleaned);
    if poly.area() <= GEOM_EPS {
        return None;
    }
    Some(poly)
}

/// Intersection of segment prev->cur with the clip line, parameterized by
/// the signed distances of its endpoints.
fn edge_intersection(prev: Point2, cur: Point2, d_prev: f64, d_cur: f64) -> Point2 {
    let t = d_prev / (d_prev - d_cur);
    prev + (cur - prev) * t
}

/// Drop repeated and collinear vertices left behind by clipping.
fn merge_degenerate_vertices(verts: Vec<Point2>) -> Vec<Point2> {
    let mut dedup: Vec<Point2> = Vec::with_capacity(verts.len());
    for v in verts {
        if dedup.last().is_none_or(|last| last.dist(v) > GEOM_EPS) {
            dedup.push(v);
        }
    }
    while dedup.len() > 1 && dedup[0].dist(dedup[dedup.len() - 1]) <= GEOM_EPS {
        dedup.pop();
    }
    if dedup.len() < 3 {
        return dedup;
    }
    let mut out: Vec<Point2> = Vec::with_capacity(dedup.len());
    let n = dedup.len();
    for i in 0..n {
        let prev = dedup[(i + n - 1) % n];
        let cur = dedup[i];
        let next = dedup[(i + 1) % n];
        let e1 = cur - prev;
        let e2 = next - cur;
        if e1.cross(e2).abs() > GEOM_EPS * e1.norm().max(1.0) * e2.norm().max(1.0) {
            out.push(cur);
        }
    }
    out
}

/// Nonnegative polygon area in pixels squared.
pub fn polygon_area(p: &ConvexPolygon) -> f64 {
    p.area()
}

/// Intersection over union of two convex shapes, exact via clipping.
///
/// Symmetric in its arguments; 0 for disjoint shapes, 1 for identical
/// ones. The operands are put in a canonical order before clipping so
/// the float result is bit-identical either way around.
pub fn iou<A: ToConvex, B: ToConvex>(a: &A, b: &B) -> f64 {
    let pa = a.to_convex();
    let pb = b.to_convex();
    let inter = if polygon_order(&pa, &pb) == std::cmp::Ordering::Greater {
        clip_convex(&pb, &pa)
    } else {
        clip_convex(&pa, &pb)
    };
    let inter = inter.map_or(0.0, |p| p.area());
    let union = pa.area() + pb.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

fn polygon_order(a: &ConvexPolygon, b: &ConvexPolygon) -> std::cmp::Ordering {
    a.verts.len().cmp(&b.verts.len()).then_with(|| {
        for (va, vb) in a.verts.iter().zip(&b.verts) {
            let ord = va.x.total_cmp(&vb.x).then(va.y.total_cmp(&vb.y));
            if ord != std::cmp::Ordering::Equal {
                return ord;
            }
        }
        std::cmp::Ordering::Equal
    })
}
