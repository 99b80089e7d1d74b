//! Independent reference implementations shared by the integration tests.
//!
//! Everything here is written from the definitions directly: no spatial
//! index, no shared helpers with the library beyond plain data types.

#![allow(dead_code)]

use coop_labels::geometry::{OrientedBox3, Point2, Point3};
use coop_labels::licl::FeatureGrid;
use coop_labels::prelim::{LabelOrigin, ScoredLabel};
use coop_labels::scene::{AgentPose, Extent, PointCloud, SceneFrame};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

pub fn rand_box<R: Rng>(rng: &mut R, spread: f64) -> OrientedBox3 {
    OrientedBox3::new(
        rng.random_range(-spread..spread),
        rng.random_range(-spread..spread),
        rng.random_range(0.0..2.0),
        rng.random_range(0.5..6.0),
        rng.random_range(0.5..3.0),
        rng.random_range(0.5..2.5),
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    )
    .unwrap()
}

/// A box near `a`, so that most pairs overlap.
pub fn nearby_box<R: Rng>(rng: &mut R, a: &OrientedBox3) -> OrientedBox3 {
    OrientedBox3::new(
        a.cx() + rng.random_range(-2.0..2.0),
        a.cy() + rng.random_range(-2.0..2.0),
        a.cz() + rng.random_range(-0.8..0.8),
        rng.random_range(0.5..6.0),
        rng.random_range(0.5..3.0),
        rng.random_range(0.5..2.5),
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    )
    .unwrap()
}

/// Corner list of the BEV footprint, built from the heading unit vectors.
pub fn corners(b: &OrientedBox3) -> [Point2; 4] {
    let (s, c) = b.yaw().sin_cos();
    let ax = Point2::new(c * b.l() / 2.0, s * b.l() / 2.0);
    let ay = Point2::new(-s * b.w() / 2.0, c * b.w() / 2.0);
    let o = Point2::new(b.cx(), b.cy());
    [
        Point2::new(o.x + ax.x + ay.x, o.y + ax.y + ay.y),
        Point2::new(o.x - ax.x + ay.x, o.y - ax.y + ay.y),
        Point2::new(o.x - ax.x - ay.x, o.y - ax.y - ay.y),
        Point2::new(o.x + ax.x - ay.x, o.y + ax.y - ay.y),
    ]
}

/// Point-in-footprint via the four edge half-planes (closed).
pub fn in_footprint(b: &OrientedBox3, p: Point2) -> bool {
    let k = corners(b);
    let mut sign = 0.0f64;
    for i in 0..4 {
        let (a, c) = (k[i], k[(i + 1) % 4]);
        let cr = (c.x - a.x) * (p.y - a.y) - (c.y - a.y) * (p.x - a.x);
        if cr != 0.0 {
            if sign != 0.0 && cr.signum() != sign {
                return false;
            }
            sign = cr.signum();
        }
    }
    true
}

pub fn in_box(b: &OrientedBox3, p: Point3) -> bool {
    in_footprint(b, p.bev()) && p.z >= b.cz() - b.h() / 2.0 && p.z <= b.cz() + b.h() / 2.0
}

/// `b` with length and width multiplied by `1 + f`.
pub fn resized(b: &OrientedBox3, f: f64) -> OrientedBox3 {
    OrientedBox3::new(b.cx(), b.cy(), b.cz(), b.l() * (1.0 + f), b.w() * (1.0 + f), b.h(), b.yaw()).unwrap()
}

fn aabb(bs: &[&OrientedBox3]) -> (f64, f64, f64, f64) {
    let mut r = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for b in bs {
        for c in corners(b) {
            r.0 = r.0.min(c.x);
            r.1 = r.1.max(c.x);
            r.2 = r.2.min(c.y);
            r.3 = r.3.max(c.y);
        }
    }
    r
}

/// Monte-Carlo BEV IoU from uniform samples over the joint bounding rectangle.
pub fn mc_bev_iou(a: &OrientedBox3, b: &OrientedBox3, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let (x0, x1, y0, y1) = aabb(&[a, b]);
    let (mut both, mut either) = (0usize, 0usize);
    for _ in 0..n {
        let p = Point2::new(rng.random_range(x0..x1), rng.random_range(y0..y1));
        let (ia, ib) = (in_footprint(a, p), in_footprint(b, p));
        both += usize::from(ia && ib);
        either += usize::from(ia || ib);
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

pub fn mc_iou_3d(a: &OrientedBox3, b: &OrientedBox3, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let (x0, x1, y0, y1) = aabb(&[a, b]);
    let z0 = (a.cz() - a.h() / 2.0).min(b.cz() - b.h() / 2.0);
    let z1 = (a.cz() + a.h() / 2.0).max(b.cz() + b.h() / 2.0);
    let (mut both, mut either) = (0usize, 0usize);
    for _ in 0..n {
        let p = Point3::new(rng.random_range(x0..x1), rng.random_range(y0..y1), rng.random_range(z0..z1));
        let (ia, ib) = (in_box(a, p), in_box(b, p));
        both += usize::from(ia && ib);
        either += usize::from(ia || ib);
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

fn orient(a: Point2, b: Point2, c: Point2) -> f64 {
    robust::orient2d(robust::Coord { x: a.x, y: a.y }, robust::Coord { x: b.x, y: b.y }, robust::Coord { x: c.x, y: c.y })
}

fn on_segment(p: Point2, a: Point2, b: Point2) -> bool {
    orient(a, b, p) == 0.0 && p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

fn in_triangle(p: Point2, a: Point2, b: Point2, c: Point2) -> bool {
    let (d1, d2, d3) = (orient(a, b, p), orient(b, c, p), orient(c, a, p));
    let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(neg && pos)
}

/// Extreme points of a set: a distinct point is extreme iff it lies in no
/// closed triangle (or segment) spanned by the other distinct points.
pub fn extreme_points(points: &[Point2]) -> Vec<Point2> {
    let mut pts: Vec<Point2> = Vec::new();
    for p in points {
        if !pts.iter().any(|q| q.x == p.x && q.y == p.y) {
            pts.push(*p);
        }
    }
    let n = pts.len();
    let mut out = Vec::new();
    'outer: for i in 0..n {
        let p = pts[i];
        let others: Vec<Point2> = (0..n).filter(|&j| j != i).map(|j| pts[j]).collect();
        let m = others.len();
        for a in 0..m {
            for b in a + 1..m {
                if on_segment(p, others[a], others[b]) {
                    continue 'outer;
                }
                for c in b + 1..m {
                    if orient(others[a], others[b], others[c]) != 0.0 && in_triangle(p, others[a], others[b], others[c]) {
                        continue 'outer;
                    }
                }
            }
        }
        out.push(p);
    }
    out
}

pub fn sorted(mut v: Vec<Point2>) -> Vec<(f64, f64)> {
    v.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    v.into_iter().map(|p| (p.x, p.y)).collect()
}

/// One view of one label, computed from the definitions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewOracle {
    pub n_inside: usize,
    pub r: Option<f64>,
    pub o: Option<f64>,
    pub d: f64,
}

pub fn view_oracle(b: &OrientedBox3, cloud: &[Point3], agent_center: Point2, eta_e: f64, eta_r: f64, eps: f64) -> ViewOracle {
    let big = resized(b, eta_e);
    let small = resized(b, -eta_r);
    let inside: Vec<Point3> = cloud.iter().copied().filter(|p| in_box(b, *p)).collect();
    let enlarged = cloud.iter().filter(|p| in_box(&big, **p)).count();
    let r = if inside.is_empty() { None } else { Some((enlarged as f64 - inside.len() as f64) / inside.len() as f64) };
    let hull = extreme_points(&inside.iter().map(|p| p.bev()).collect::<Vec<_>>());
    // fewer than three extreme points means every interior point is collinear
    let o = if hull.len() < 3 {
        None
    } else {
        let q_inner = hull.iter().filter(|v| in_footprint(&small, **v)).count();
        Some((hull.len() as f64 - q_inner as f64) / hull.len() as f64)
    };
    let dx = agent_center.x - b.cx();
    let dy = agent_center.y - b.cy();
    ViewOracle { n_inside: inside.len(), r, o, d: 1.0 / (dx * dx + dy * dy).max(eps) }
}

/// Aggregated `(r, o, high)` over the views that vote.
pub fn verdict_oracle(views: &[ViewOracle], n_min: usize, phi_r: f64, phi_o: f64) -> (Option<f64>, Option<f64>, bool) {
    let mut num_r = 0.0;
    let mut num_o = 0.0;
    let mut den = 0.0;
    let mut any = false;
    for v in views {
        if v.n_inside >= n_min {
            if let (Some(r), Some(o)) = (v.r, v.o) {
                num_r += v.d * r;
                num_o += v.d * o;
                den += v.d;
                any = true;
            }
        }
    }
    if !any {
        return (None, None, false);
    }
    let (r, o) = (num_r / den, num_o / den);
    (Some(r), Some(o), r < phi_r && o > phi_o)
}

/// Random cloud around `b`: interior, ring and far points plus face samples.
pub fn cloud_around<R: Rng>(rng: &mut R, b: &OrientedBox3, n: usize) -> Vec<Point3> {
    let (s, c) = b.yaw().sin_cos();
    (0..n)
        .map(|_| {
            let (u, v) = match rng.random_range(0..4) {
                0 => (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
                1 => (rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)),
                2 => (if rng.random::<bool>() { 0.49 } else { -0.49 }, rng.random_range(-0.5..0.5)),
                _ => (rng.random_range(-0.5..0.5), if rng.random::<bool>() { 0.47 } else { -0.47 }),
            };
            let (lx, ly) = (u * b.l(), v * b.w());
            Point3::new(
                b.cx() + c * lx - s * ly,
                b.cy() + s * lx + c * ly,
                b.cz() + rng.random_range(-0.6..0.6) * b.h(),
            )
        })
        .collect()
}

/// Cell whose half-open footprint contains `(x, y)`; the top edge belongs to the last cell.
pub fn cell_oracle(x: f64, y: f64, grid: &FeatureGrid) -> (usize, usize) {
    let e = grid.extent();
    let find = |v: f64, lo: f64, hi: f64, n: usize| {
        let step = (hi - lo) / n as f64;
        (0..n).find(|&i| v >= lo + i as f64 * step && v < lo + (i + 1) as f64 * step).unwrap_or(n - 1)
    };
    (find(x, e.x_min, e.x_max, grid.width()), find(y, e.y_min, e.y_max, grid.height()))
}

/// Direct transcription of the shared-sum loss with explicit exp and log.
pub fn licl_naive(pos: &[Vec<f64>], neg: &[Vec<f64>], tau: f64, normalize: bool) -> f64 {
    let prep = |f: &Vec<f64>| -> Vec<f64> {
        if normalize {
            let n = f.iter().map(|x| x * x).sum::<f64>().sqrt();
            f.iter().map(|x| x / n).collect()
        } else {
            f.clone()
        }
    };
    let u: Vec<Vec<f64>> = pos.iter().map(prep).collect();
    let v: Vec<Vec<f64>> = neg.iter().map(prep).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for um in &u {
        let num = (u.iter().map(|ui| dot(um, ui)).sum::<f64>() / tau).exp();
        let den: f64 = v.iter().map(|vn| (u.iter().map(|ui| dot(ui, vn)).sum::<f64>() / tau).exp()).sum();
        total += (num / den).ln();
    }
    -total / u.len() as f64
}

#[derive(Debug, Deserialize)]
pub struct LiclFixture {
    pub tau: f64,
    pub normalize: bool,
    pub pos: Vec<Vec<f64>>,
    pub neg: Vec<Vec<f64>>,
    pub loss: String,
}

pub fn licl_fixtures() -> Vec<LiclFixture> {
    let text = include_str!("../fixtures/licl_oracle.json");
    serde_json::from_str(text).expect("fixture parses")
}

/// Lays features out one per cell along x and returns the grid and the
/// boxes that select them.
pub fn grid_from_features(pos: &[Vec<f64>], neg: &[Vec<f64>]) -> (FeatureGrid, Vec<OrientedBox3>, Vec<OrientedBox3>) {
    let c = pos[0].len();
    let w = pos.len() + neg.len();
    let mut values = vec![0.0; w * c];
    for (ix, f) in pos.iter().chain(neg).enumerate() {
        for (ch, v) in f.iter().enumerate() {
            values[ch * w + ix] = *v;
        }
    }
    let extent = coop_labels::scene::Extent::new(0.0, w as f64, 0.0, 1.0);
    let grid = FeatureGrid::new(w, 1, c, values, extent).unwrap();
    let at = |i: usize| OrientedBox3::new(i as f64 + 0.5, 0.5, 0.5, 0.4, 0.4, 1.0, 0.0).unwrap();
    let pb = (0..pos.len()).map(at).collect();
    let nb = (pos.len()..w).map(at).collect();
    (grid, pb, nb)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

pub fn label(b: OrientedBox3, score: f64) -> ScoredLabel {
    ScoredLabel::new(b, score, LabelOrigin::External).unwrap()
}

/// Greedy matching written independently of the library: repeatedly take
/// the highest-scoring unprocessed label (ties: lower index) and give it the
/// best remaining ground truth (ties: lower index).
pub fn greedy_tp(iou: &[Vec<f64>], scores: &[f64], thr: f64) -> usize {
    let mut used_l = vec![false; scores.len()];
    let mut used_g = vec![false; iou.first().map_or(0, |r| r.len())];
    let mut tp = 0;
    for _ in 0..scores.len() {
        let mut li = None;
        for i in 0..scores.len() {
            if !used_l[i] && li.is_none_or(|j: usize| scores[i] > scores[j]) {
                li = Some(i);
            }
        }
        let li = li.unwrap();
        used_l[li] = true;
        let mut best: Option<usize> = None;
        for g in 0..used_g.len() {
            if !used_g[g] && iou[li][g] >= thr && best.is_none_or(|b| iou[li][g] > iou[li][b]) {
                best = Some(g);
            }
        }
        if let Some(g) = best {
            used_g[g] = true;
            tp += 1;
        }
    }
    tp
}

/// Largest number of label/gt pairs with IoU above `thr` over all one-to-one assignments.
pub fn max_assignment(iou: &[Vec<f64>], thr: f64) -> usize {
    fn go(i: usize, iou: &[Vec<f64>], thr: f64, used: &mut Vec<bool>) -> usize {
        if i == iou.len() {
            return 0;
        }
        let mut best = go(i + 1, iou, thr, used);
        for g in 0..used.len() {
            if !used[g] && iou[i][g] >= thr {
                used[g] = true;
                best = best.max(1 + go(i + 1, iou, thr, used));
                used[g] = false;
            }
        }
        best
    }
    let n_gt = iou.first().map_or(0, |r| r.len());
    go(0, iou, thr, &mut vec![false; n_gt])
}

/// One label seen by 2-4 agents with small random clouds.
pub fn micro_instance(rng: &mut ChaCha8Rng) -> (SceneFrame, OrientedBox3) {
    let b = rand_box(rng, 5.0);
    let n_views = rng.random_range(2..=4);
    let mut agents = Vec::new();
    let mut clouds = Vec::new();
    for v in 0..n_views {
        let pose = OrientedBox3::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), 0.8, 4.5, 1.9, 1.6, 0.0).unwrap();
        agents.push(AgentPose { agent_id: v as u32, pose });
        let n = rng.random_range(0..40);
        clouds.push(PointCloud::new(cloud_around(rng, &b, n)));
    }
    let frame = SceneFrame {
        frame_id: 0,
        extent: Extent::new(-50.0, 50.0, -50.0, 50.0),
        agents,
        clouds,
        ground: Vec::new(),
        gt_boxes: Vec::new(),
        clutter: Vec::new(),
    };
    (frame, b)
}
