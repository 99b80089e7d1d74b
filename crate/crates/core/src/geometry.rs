//! Oriented boxes, BEV polygons, convex hulls and rotated IoU.
//!
//! Conventions: `l` is the extent along the heading (yaw = 0 puts `l` on +x),
//! `w` is lateral and `h` vertical. All arithmetic is `f64`.

use std::cmp::Ordering;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for on-edge classification during polygon clipping.
pub const CLIP_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("scale factor {0} would produce a non-positive extent (must be > -1)")]
    InvalidScale(f64),
    #[error("non-finite point")]
    NonFinitePoint,
    #[error("degenerate hull: fewer than 3 distinct non-collinear points")]
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }

    pub fn cross(self, o: Point2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn dot(self, o: Point2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn bev(self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Wraps an angle into (-pi, pi].
pub fn normalize_yaw(yaw: f64) -> f64 {
    if yaw > -PI && yaw <= PI {
        return yaw;
    }
    let mut y = yaw.rem_euclid(2.0 * PI);
    if y >= 2.0 * PI {
        y = 0.0;
    }
    if y > PI {
        y -= 2.0 * PI;
    }
    y
}

/// 7-DoF box: center, extents (l along heading, w lateral, h vertical) and yaw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox3 {
    cx: f64,
    cy: f64,
    cz: f64,
    l: f64,
    w: f64,
    h: f64,
    yaw: f64,
}

impl OrientedBox3 {
    pub fn new(cx: f64, cy: f64, cz: f64, l: f64, w: f64, h: f64, yaw: f64) -> Result<Self, GeometryError> {
        let all = [cx, cy, cz, l, w, h, yaw];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidBox(format!("non-finite field in {all:?}")));
        }
        if l <= 0.0 || w <= 0.0 || h <= 0.0 {
            return Err(GeometryError::InvalidBox(format!("extents must be positive, got l={l} w={w} h={h}")));
        }
        Ok(Self { cx, cy, cz, l, w, h, yaw: normalize_yaw(yaw) })
    }

    /// Builds from `[cx, cy, cz, l, w, h, yaw]`, the order used by every file format.
    pub fn from_array(a: [f64; 7]) -> Result<Self, GeometryError> {
        Self::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6])
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw]
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn cz(&self) -> f64 {
        self.cz
    }
    pub fn l(&self) -> f64 {
        self.l
    }
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn center(&self) -> Point3 {
        Point3::new(self.cx, self.cy, self.cz)
    }

    pub fn center_bev(&self) -> Point2 {
        Point2::new(self.cx, self.cy)
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    pub fn bev_area(&self) -> f64 {
        self.l * self.w
    }

    pub fn z_min(&self) -> f64 {
        self.cz - 0.5 * self.h
    }

    pub fn z_max(&self) -> f64 {
        self.cz + 0.5 * self.h
    }

    /// Returns a copy moved by `(dx, dy, dz)`.
    pub fn translated(&self, dx: f64, dy: f64, dz: f64) -> Self {
        Self { cx: self.cx + dx, cy: self.cy + dy, cz: self.cz + dz, ..*self }
    }

    /// Returns a copy with the given extents, keeping pose.
    pub fn with_size(&self, l: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(self.cx, self.cy, self.cz, l, w, h, self.yaw)
    }

    /// Expresses a world-frame BEV point in the box frame (x along heading).
    pub fn to_local_bev(&self, p: Point2) -> Point2 {
        let (s, c) = self.yaw.sin_cos();
        let dx = p.x - self.cx;
        let dy = p.y - self.cy;
        Point2::new(c * dx + s * dy, -s * dx + c * dy)
    }

    /// Maps a box-frame BEV offset back to world coordinates.
    pub fn to_world_bev(&self, p: Point2) -> Point2 {
        let (s, c) = self.yaw.sin_cos();
        Point2::new(self.cx + c * p.x - s * p.y, self.cy + s * p.x + c * p.y)
    }

    /// Closed containment test in the box frame.
    pub fn contains(&self, p: Point3) -> bool {
        let q = self.to_local_bev(p.bev());
        q.x.abs() <= 0.5 * self.l && q.y.abs() <= 0.5 * self.w && (p.z - self.cz).abs() <= 0.5 * self.h
    }

    /// Closed containment of the BEV projection, ignoring z.
    pub fn contains_bev(&self, p: Point2) -> bool {
        let q = self.to_local_bev(p);
        q.x.abs() <= 0.5 * self.l && q.y.abs() <= 0.5 * self.w
    }

    /// Scales `l` and `w` by `1 + factor`; height and pose are untouched.
    pub fn scaled(&self, factor: f64) -> Result<Self, GeometryError> {
        if !factor.is_finite() || factor <= -1.0 {
            return Err(GeometryError::InvalidScale(factor));
        }
        let k = 1.0 + factor;
        Ok(Self { l: self.l * k, w: self.w * k, ..*self })
    }

    /// BEV corners in counter-clockwise order.
    pub fn corners_bev(&self) -> [Point2; 4] {
        let hl = 0.5 * self.l;
        let hw = 0.5 * self.w;
        [
            self.to_world_bev(Point2::new(hl, -hw)),
            self.to_world_bev(Point2::new(hl, hw)),
            self.to_world_bev(Point2::new(-hl, hw)),
            self.to_world_bev(Point2::new(-hl, -hw)),
        ]
    }

    pub fn footprint(&self) -> Polygon2 {
        Polygon2 { vertices: self.corners_bev().to_vec() }
    }

    /// Axis-aligned BEV bounds `(x_min, x_max, y_min, y_max)`.
    pub fn bev_aabb(&self) -> (f64, f64, f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let ex = 0.5 * (self.l * c.abs() + self.w * s.abs());
        let ey = 0.5 * (self.l * s.abs() + self.w * c.abs());
        (self.cx - ex, self.cx + ex, self.cy - ey, self.cy + ey)
    }

    /// Rigid SE(2) motion: rotate by `dyaw` about `pivot`, then translate.
    pub fn transformed_se2(&self, pivot: Point2, dyaw: f64, dx: f64, dy: f64) -> Self {
        let c = rotate_about(self.center_bev(), pivot, dyaw);
        Self {
            cx: c.x + dx,
            cy: c.y + dy,
            yaw: normalize_yaw(self.yaw + dyaw),
            ..*self
        }
    }
}

pub fn rotate_about(p: Point2, pivot: Point2, angle: f64) -> Point2 {
    let (s, c) = angle.sin_cos();
    let dx = p.x - pivot.x;
    let dy = p.y - pivot.y;
    Point2::new(pivot.x + c * dx - s * dy, pivot.y + s * dx + c * dy)
}

/// Convenience form of [`OrientedBox3::contains`].
pub fn point_in_box(p: Point3, b: &OrientedBox3) -> bool {
    b.contains(p)
}

/// Convenience form of [`OrientedBox3::scaled`].
pub fn scale_box(b: &OrientedBox3, factor: f64) -> Result<OrientedBox3, GeometryError> {
    b.scaled(factor)
}

/// Exact orientation: > 0 when `a, b, c` turn counter-clockwise.
pub fn orient2d(a: Point2, b: Point2, c: Point2) -> f64 {
    robust::orient2d(
        robust::Coord { x: a.x, y: a.y },
        robust::Coord { x: b.x, y: b.y },
        robust::Coord { x: c.x, y: c.y },
    )
}

/// Simple polygon with counter-clockwise vertices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Polygon2 {
    pub vertices: Vec<Point2>,
}

impl Polygon2 {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        if n < 3 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            acc += a.cross(b);
        }
        0.5 * acc
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    /// Every consecutive triple turns left or is straight.
    pub fn is_convex(&self) -> bool {
        let n = self.vertices.len();
        if n < 3 {
            return false;
        }
        (0..n).all(|i| {
            orient2d(self.vertices[i], self.vertices[(i + 1) % n], self.vertices[(i + 2) % n]) >= 0.0
        })
    }

    /// Closed containment for a convex CCW polygon.
    pub fn contains_convex(&self, p: Point2) -> bool {
        let n = self.vertices.len();
        n >= 3 && (0..n).all(|i| orient2d(self.vertices[i], self.vertices[(i + 1) % n], p) >= 0.0)
    }
}

/// Convex hull by Andrew's monotone chain with exact orientation tests.
///
/// Output is CCW, starts at the lexicographically smallest point and keeps only
/// strictly convex vertices, so collinear boundary points and duplicates are
/// dropped.
pub fn convex_hull_2d(points: &[Point2]) -> Result<Polygon2, GeometryError> {
    if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(GeometryError::NonFinitePoint);
    }
    let mut pts: Vec<Point2> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return Err(GeometryError::Degenerate);
    }

    let mut hull: Vec<Point2> = Vec::with_capacity(pts.len() * 2);
    for &p in pts.iter() {
        while hull.len() >= 2 && orient2d(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && orient2d(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();

    if hull.len() < 3 {
        return Err(GeometryError::Degenerate);
    }
    Ok(Polygon2 { vertices: hull })
}

fn side(a: Point2, b: Point2, p: Point2) -> f64 {
    b.sub(a).cross(p.sub(a))
}

/// Sutherland-Hodgman clip of `subject` against convex CCW `clip`.
pub fn clip_convex(subject: &Polygon2, clip: &Polygon2) -> Polygon2 {
    let mut output = subject.vertices.clone();
    let n = clip.vertices.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip.vertices[i];
        let b = clip.vertices[(i + 1) % n];
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let s_cur = side(a, b, cur);
            let s_prev = side(a, b, prev);
            let cur_in = s_cur >= -CLIP_EPS;
            let prev_in = s_prev >= -CLIP_EPS;
            if cur_in {
                if !prev_in {
                    output.push(segment_cut(prev, cur, s_prev, s_cur));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_cut(prev, cur, s_prev, s_cur));
            }
        }
    }
    Polygon2 { vertices: output }
}

fn segment_cut(p: Point2, q: Point2, sp: f64, sq: f64) -> Point2 {
    let t = sp / (sp - sq);
    Point2::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
}

/// Area of the intersection of two BEV footprints.
pub fn bev_intersection_area(a: &OrientedBox3, b: &OrientedBox3) -> f64 {
    let (ax0, ax1, ay0, ay1) = a.bev_aabb();
    let (bx0, bx1, by0, by1) = b.bev_aabb();
    if ax1 < bx0 || bx1 < ax0 || ay1 < by0 || by1 < ay0 {
        return 0.0;
    }
    clip_convex(&a.footprint(), &b.footprint()).area()
}

fn same_footprint(a: &OrientedBox3, b: &OrientedBox3) -> bool {
    if a.cx != b.cx || a.cy != b.cy || a.l != b.l || a.w != b.w {
        return false;
    }
    let d = (a.yaw - b.yaw).abs();
    d == 0.0 || d == PI
}

/// Rotated BEV IoU in `[0, 1]`.
pub fn bev_iou(a: &OrientedBox3, b: &OrientedBox3) -> f64 {
    if same_footprint(a, b) {
        return 1.0;
    }
    let inter = bev_intersection_area(a, b);
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// 3D IoU: BEV intersection times vertical overlap over the union volume.
pub fn iou_3d(a: &OrientedBox3, b: &OrientedBox3) -> f64 {
    if same_footprint(a, b) && a.cz == b.cz && a.h == b.h {
        return 1.0;
    }
    let dz = a.z_max().min(b.z_max()) - a.z_min().max(b.z_min());
    if dz <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Closed separating-axis overlap test between two BEV footprints.
pub fn footprints_overlap(a: &OrientedBox3, b: &OrientedBox3) -> bool {
    let ca = a.corners_bev();
    let cb = b.corners_bev();
    let axes = [
        ca[1].sub(ca[0]),
        ca[2].sub(ca[1]),
        cb[1].sub(cb[0]),
        cb[2].sub(cb[1]),
    ];
    for axis in axes {
        let project = |pts: &[Point2; 4]| {
            pts.iter().map(|p| p.dot(axis)).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        let (alo, ahi) = project(&ca);
        let (blo, bhi) = project(&cb);
        if ahi < blo || bhi < alo {
            return false;
        }
    }
    true
}

/// Total order on points used for deterministic hull comparisons.
pub fn lex_cmp(a: &Point2, b: &Point2) -> Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y))
}
