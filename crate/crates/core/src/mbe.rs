//! Multi-scale box encoding and the two-condition label discriminator.
//!
//! For every label and every agent view three numbers are computed on that
//! view's own cloud:
//!
//! * `r`, the collision ratio: extra points picked up when the box is enlarged
//!   by `eta_enlarge`, relative to the points inside the box;
//! * `o`, the boundary occupancy: the share of convex-hull vertices of the
//!   interior points (BEV) that fall outside the box shrunk by `eta_reduce`;
//! * `d`, the information confidence: inverse squared BEV distance between the
//!   agent and the label, floored at `epsilon_d`.
//!
//! A label is high quality when the `d`-weighted mean of `r` is below `phi_r`
//! and the `d`-weighted mean of `o` is above `phi_o`. Views without a defined
//! `r` or `o`, or with fewer than `n_min` interior points, abstain and the
//! weights are renormalized over the remaining views.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{convex_hull_2d, OrientedBox3, Point2, Point3};
use crate::prelim::ScoredLabel;
use crate::scene::{AgentPose, PointCloud, SceneFrame};

#[derive(Debug, Error, PartialEq)]
pub enum MbeError {
    #[error("invalid MBE parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MbeParams {
    pub eta_enlarge: f64,
    pub eta_reduce: f64,
    pub phi_r: f64,
    pub phi_o: f64,
    pub n_min: usize,
    pub epsilon_d: f64,
}

impl Default for MbeParams {
    fn default() -> Self {
        Self { eta_enlarge: 0.5, eta_reduce: 0.2, phi_r: 0.1, phi_o: 0.7, n_min: 5, epsilon_d: 0.01 }
    }
}

impl MbeParams {
    pub fn validate(&self) -> Result<(), MbeError> {
        let bad = |m: String| Err(MbeError::InvalidParams(m));
        if !(self.eta_enlarge > 0.0 && self.eta_enlarge.is_finite()) {
            return bad(format!("eta_enlarge must be > 0, got {}", self.eta_enlarge));
        }
        if !(self.eta_reduce > 0.0 && self.eta_reduce < 1.0) {
            return bad(format!("eta_reduce must lie in (0, 1), got {}", self.eta_reduce));
        }
        if !(self.phi_r > 0.0 && self.phi_r.is_finite()) {
            return bad(format!("phi_r must be > 0, got {}", self.phi_r));
        }
        if !(self.phi_o > 0.0 && self.phi_o < 1.0) {
            return bad(format!("phi_o must lie in (0, 1), got {}", self.phi_o));
        }
        if self.n_min < 3 {
            return bad(format!("n_min must be >= 3, got {}", self.n_min));
        }
        if !(self.epsilon_d > 0.0 && self.epsilon_d.is_finite()) {
            return bad(format!("epsilon_d must be > 0, got {}", self.epsilon_d));
        }
        Ok(())
    }
}

/// Per-view encoding; `None` marks an undefined ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodingTriple {
    pub view_id: u32,
    pub r: Option<f64>,
    pub o: Option<f64>,
    pub d: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    High,
    Low,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityVerdict {
    pub label_index: usize,
    pub verdict: Verdict,
    pub aggregated_r: Option<f64>,
    pub aggregated_o: Option<f64>,
    pub per_view: Vec<EncodingTriple>,
}

impl QualityVerdict {
    pub fn is_high(&self) -> bool {
        self.verdict == Verdict::High
    }
}

fn expand(b: &OrientedBox3, factor: f64) -> OrientedBox3 {
    b.scaled(factor).expect("validated scale factor")
}

fn cpe_counts<'a>(b: &OrientedBox3, eta_enlarge: f64, pts: impl Iterator<Item = &'a Point3>) -> (usize, usize) {
    let big = expand(b, eta_enlarge);
    let mut inside = 0;
    let mut enlarged = 0;
    for p in pts {
        if big.contains(*p) {
            enlarged += 1;
            if b.contains(*p) {
                inside += 1;
            }
        }
    }
    (inside, enlarged)
}

fn ratio(inside: usize, enlarged: usize) -> Option<f64> {
    (inside > 0).then(|| (enlarged - inside) as f64 / inside as f64)
}

fn bae_ratio<'a>(b: &OrientedBox3, eta_reduce: f64, pts: impl Iterator<Item = &'a Point3>) -> Option<f64> {
    let interior: Vec<Point2> = pts.filter(|p| b.contains(**p)).map(|p| p.bev()).collect();
    let hull = convex_hull_2d(&interior).ok()?;
    let reduced = expand(b, -eta_reduce);
    let inner = hull.vertices.iter().filter(|v| reduced.contains_bev(**v)).count();
    Some((hull.len() - inner) as f64 / hull.len() as f64)
}

/// Collision ratio of `b` in one view, plus the number of interior points.
pub fn encode_cpe(b: &OrientedBox3, cloud: &PointCloud, eta_enlarge: f64) -> (Option<f64>, usize) {
    let (inside, enlarged) = cpe_counts(b, eta_enlarge, cloud.points.iter());
    (ratio(inside, enlarged), inside)
}

/// Boundary occupancy of `b` in one view; `None` when the interior hull is degenerate.
pub fn encode_bae(b: &OrientedBox3, cloud: &PointCloud, eta_reduce: f64) -> Option<f64> {
    bae_ratio(b, eta_reduce, cloud.points.iter())
}

/// Information confidence of `agent` about `b`.
pub fn encode_ice(b: &OrientedBox3, agent: &AgentPose, epsilon_d: f64) -> f64 {
    let dx = agent.pose.cx() - b.cx();
    let dy = agent.pose.cy() - b.cy();
    1.0 / (dx * dx + dy * dy).max(epsilon_d)
}

/// Applies both discriminator conditions to the qualifying views.
pub fn discriminate(per_view: &[EncodingTriple], params: &MbeParams) -> QualityVerdict {
    let voting: Vec<(f64, f64, f64)> = per_view
        .iter()
        .filter(|e| e.n_points >= params.n_min)
        .filter_map(|e| Some((e.r?, e.o?, e.d)))
        .collect();
    let total: f64 = voting.iter().map(|v| v.2).sum();
    if voting.is_empty() || !(total > 0.0) {
        return QualityVerdict {
            label_index: 0,
            verdict: Verdict::Low,
            aggregated_r: None,
            aggregated_o: None,
            per_view: per_view.to_vec(),
        };
    }
    let mut r_agg = 0.0;
    let mut o_agg = 0.0;
    for (r, o, d) in &voting {
        let w = d / total;
        r_agg += r * w;
        o_agg += o * w;
    }
    let high = r_agg < params.phi_r && o_agg > params.phi_o;
    QualityVerdict {
        label_index: 0,
        verdict: if high { Verdict::High } else { Verdict::Low },
        aggregated_r: Some(r_agg),
        aggregated_o: Some(o_agg),
        per_view: per_view.to_vec(),
    }
}

/// Uniform BEV bucket grid over one cloud for box queries.
pub struct CloudIndex<'a> {
    points: &'a [Point3],
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<u32>>,
}

impl<'a> CloudIndex<'a> {
    pub fn new(cloud: &'a PointCloud, cell: f64) -> Self {
        let mut buckets: HashMap<(i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in cloud.points.iter().enumerate() {
            buckets.entry(Self::key(p.x, p.y, cell)).or_default().push(i as u32);
        }
        Self { points: &cloud.points, cell, buckets }
    }

    fn key(x: f64, y: f64, cell: f64) -> (i64, i64) {
        ((x / cell).floor() as i64, (y / cell).floor() as i64)
    }

    /// Points whose BEV position may fall inside `b`, in cloud order.
    pub fn candidates(&self, b: &OrientedBox3) -> Vec<&'a Point3> {
        let (x0, x1, y0, y1) = b.bev_aabb();
        let (kx0, ky0) = Self::key(x0, y0, self.cell);
        let (kx1, ky1) = Self::key(x1, y1, self.cell);
        let mut idx: Vec<u32> = Vec::new();
        for kx in kx0..=kx1 {
            for ky in ky0..=ky1 {
                if let Some(v) = self.buckets.get(&(kx, ky)) {
                    idx.extend_from_slice(v);
                }
            }
        }
        idx.sort_unstable();
        idx.into_iter().map(|i| &self.points[i as usize]).collect()
    }
}

const INDEX_CELL: f64 = 2.0;

/// Encodes one label in every view.
pub fn encode_label(
    b: &OrientedBox3,
    agents: &[AgentPose],
    indices: &[CloudIndex<'_>],
    eta_enlarge: f64,
    eta_reduce: f64,
    epsilon_d: f64,
) -> Vec<EncodingTriple> {
    let big = expand(b, eta_enlarge);
    agents
        .iter()
        .zip(indices)
        .map(|(agent, index)| {
            let cand = index.candidates(&big);
            let (inside, enlarged) = cpe_counts(b, eta_enlarge, cand.iter().copied());
            EncodingTriple {
                view_id: agent.agent_id,
                r: ratio(inside, enlarged),
                o: bae_ratio(b, eta_reduce, cand.iter().copied()),
                d: encode_ice(b, agent, epsilon_d),
                n_points: inside,
            }
        })
        .collect()
}

/// Per-label, per-view encodings for a whole frame.
pub fn encode_frame(frame: &SceneFrame, labels: &[ScoredLabel], eta_enlarge: f64, eta_reduce: f64, epsilon_d: f64) -> Vec<Vec<EncodingTriple>> {
    let indices: Vec<CloudIndex<'_>> = frame.clouds.iter().map(|c| CloudIndex::new(c, INDEX_CELL)).collect();
    labels
        .iter()
        .map(|l| encode_label(&l.bbox, &frame.agents, &indices, eta_enlarge, eta_reduce, epsilon_d))
        .collect()
}

/// Discriminates precomputed encodings, tagging verdicts with their label index.
pub fn discriminate_all(encodings: &[Vec<EncodingTriple>], params: &MbeParams) -> Vec<QualityVerdict> {
    encodings
        .iter()
        .enumerate()
        .map(|(i, per_view)| QualityVerdict { label_index: i, ..discriminate(per_view, params) })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub high: Vec<ScoredLabel>,
    pub low: Vec<ScoredLabel>,
    pub verdicts: Vec<QualityVerdict>,
}

/// Splits labels into high and low quality, preserving input order.
pub fn partition(labels: &[ScoredLabel], verdicts: Vec<QualityVerdict>) -> FilterOutcome {
    let (mut high, mut low) = (Vec::new(), Vec::new());
    for (l, v) in labels.iter().zip(&verdicts) {
        if v.is_high() {
            high.push(*l);
        } else {
            low.push(*l);
        }
    }
    FilterOutcome { high, low, verdicts }
}

/// Encodes every label in every agent's own cloud and discriminates.
pub fn filter_labels(frame: &SceneFrame, labels: &[ScoredLabel], params: &MbeParams) -> Result<FilterOutcome, MbeError> {
    params.validate()?;
    let enc = encode_frame(frame, labels, params.eta_enlarge, params.eta_reduce, params.epsilon_d);
    Ok(partition(labels, discriminate_all(&enc, params)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prelim::LabelOrigin;
    use proptest::prelude::*;

    fn bx(cx: f64, cy: f64, l: f64, w: f64, yaw: f64) -> OrientedBox3 {
        OrientedBox3::new(cx, cy, 0.0, l, w, 2.0, yaw).unwrap()
    }

    fn agent(id: u32, x: f64, y: f64) -> AgentPose {
        AgentPose { agent_id: id, pose: OrientedBox3::new(x, y, 0.75, 4.5, 1.9, 1.5, 0.0).unwrap() }
    }

    fn triple(r: Option<f64>, o: Option<f64>, d: f64, n: usize) -> EncodingTriple {
        EncodingTriple { view_id: 0, r, o, d, n_points: n }
    }

    #[test]
    fn cpe_examples() {
        let b = bx(0.0, 0.0, 2.0, 2.0, 0.0);
        let inside: Vec<Point3> = (0..10).map(|i| Point3::new(-0.9 + 0.2 * i as f64, 0.0, 0.0)).collect();
        let cloud = PointCloud::new(inside.clone());
        assert_eq!(encode_cpe(&b, &cloud, 0.5), (Some(0.0), 10));

        let mut with_ring = inside;
        // ring of the 3x3 enlarged box
        with_ring.push(Point3::new(1.3, 0.0, 0.0));
        with_ring.push(Point3::new(0.0, -1.4, 0.5));
        // outside the enlarged box: ignored
        with_ring.push(Point3::new(1.6, 0.0, 0.0));
        with_ring.push(Point3::new(0.0, 0.0, 1.5));
        let (r, n) = encode_cpe(&b, &PointCloud::new(with_ring), 0.5);
        assert_eq!(n, 10);
        assert!((r.unwrap() - 0.2).abs() < 1e-15);

        assert_eq!(encode_cpe(&b, &PointCloud::new(vec![Point3::new(5.0, 5.0, 0.0)]), 0.5), (None, 0));
    }

    #[test]
    fn bae_extremes() {
        let b = bx(0.0, 0.0, 2.0, 2.0, 0.0);
        let corners = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)].map(|(x, y)| Point3::new(x, y, 0.0));
        assert_eq!(encode_bae(&b, &PointCloud::new(corners.to_vec()), 0.2), Some(1.0));

        let cluster = [(0.1, 0.0), (0.0, 0.1), (-0.1, 0.0), (0.0, -0.1), (0.0, 0.0)].map(|(x, y)| Point3::new(x, y, 0.0));
        assert_eq!(encode_bae(&b, &PointCloud::new(cluster.to_vec()), 0.2), Some(0.0));

        let collinear: Vec<Point3> = (0..6).map(|i| Point3::new(0.1 * i as f64, 0.0, 0.0)).collect();
        assert_eq!(encode_bae(&b, &PointCloud::new(collinear), 0.2), None);
    }

    #[test]
    fn ice_examples() {
        let b = bx(0.0, 0.0, 4.0, 2.0, 0.0);
        assert!((encode_ice(&b, &agent(0, 3.0, 4.0), 0.01) - 0.04).abs() < 1e-15);
        assert!((encode_ice(&b, &agent(0, 0.0, 0.0), 0.01) - 100.0).abs() < 1e-12);
        let near = encode_ice(&b, &agent(0, 1.5, 2.0), 0.01);
        let far = encode_ice(&b, &agent(0, 3.0, 4.0), 0.01);
        assert!((near / 4.0 - far).abs() < 1e-15);
    }

    #[test]
    fn discriminator_examples() {
        let p = MbeParams::default();
        let v = discriminate(&[triple(Some(0.0), Some(0.9), 0.04, 10), triple(Some(0.3), Some(0.9), 0.01, 10)], &p);
        assert!((v.aggregated_r.unwrap() - 0.06).abs() < 1e-15);
        assert!((v.aggregated_o.unwrap() - 0.9).abs() < 1e-15);
        assert_eq!(v.verdict, Verdict::High);

        let v = discriminate(&[triple(Some(0.2), Some(0.9), 123.0, 10)], &p);
        assert_eq!(v.verdict, Verdict::Low);
        assert!((v.aggregated_r.unwrap() - 0.2).abs() < 1e-15);

        let v = discriminate(&[triple(None, None, 1.0, 0), triple(Some(0.0), None, 1.0, 10)], &p);
        assert_eq!(v.verdict, Verdict::Low);
        assert_eq!((v.aggregated_r, v.aggregated_o), (None, None));
    }

    #[test]
    fn thin_views_abstain() {
        let p = MbeParams::default();
        // the bad view has only 4 points, so it cannot outvote the good one
        let v = discriminate(&[triple(Some(0.0), Some(1.0), 0.01, 20), triple(Some(5.0), Some(0.0), 100.0, 4)], &p);
        assert_eq!(v.verdict, Verdict::High);
        assert_eq!(v.aggregated_r, Some(0.0));
    }

    #[test]
    fn conditions_are_strict() {
        let p = MbeParams::default();
        assert_eq!(discriminate(&[triple(Some(0.1), Some(0.9), 1.0, 10)], &p).verdict, Verdict::Low);
        assert_eq!(discriminate(&[triple(Some(0.0), Some(0.7), 1.0, 10)], &p).verdict, Verdict::Low);
    }

    #[test]
    fn params_validation() {
        assert!(MbeParams::default().validate().is_ok());
        for bad in [
            MbeParams { eta_reduce: 1.0, ..MbeParams::default() },
            MbeParams { eta_enlarge: 0.0, ..MbeParams::default() },
            MbeParams { phi_o: 1.0, ..MbeParams::default() },
            MbeParams { n_min: 2, ..MbeParams::default() },
            MbeParams { epsilon_d: 0.0, ..MbeParams::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn index_matches_brute_force() {
        let pts: Vec<Point3> = (0..400)
            .map(|i| {
                let t = i as f64 * 0.37;
                Point3::new(10.0 * t.sin(), 7.0 * (1.3 * t).cos(), (0.7 * t).sin())
            })
            .collect();
        let cloud = PointCloud::new(pts);
        let index = CloudIndex::new(&cloud, INDEX_CELL);
        let agents = [agent(0, 20.0, 0.0)];
        for k in 0..20 {
            let b = bx(-6.0 + 0.6 * k as f64, 0.5 * k as f64 - 4.0, 3.0, 1.5, 0.3 * k as f64);
            let fast = encode_label(&b, &agents, std::slice::from_ref(&index), 0.5, 0.2, 0.01);
            let (r, n) = encode_cpe(&b, &cloud, 0.5);
            assert_eq!(fast[0].r, r);
            assert_eq!(fast[0].n_points, n);
            assert_eq!(fast[0].o, encode_bae(&b, &cloud, 0.2));
        }
    }

    fn frame_with(clouds: Vec<Vec<Point3>>, agents: Vec<AgentPose>) -> SceneFrame {
        SceneFrame {
            frame_id: 0,
            extent: crate::scene::Extent::new(-50.0, 50.0, -50.0, 50.0),
            agents,
            clouds: clouds.into_iter().map(PointCloud::new).collect(),
            ground: Vec::new(),
            gt_boxes: Vec::new(),
            clutter: Vec::new(),
        }
    }

    /// Points on the two faces of `b` seen from +x/+y.
    fn l_shape(b: &OrientedBox3, n: usize) -> Vec<Point3> {
        let mut pts = Vec::new();
        for i in 0..n {
            let t = -0.5 + (i as f64 + 0.5) / n as f64;
            let z = 0.5 * ((i * 7 % n) as f64 / n as f64 - 0.5);
            let p = b.to_world_bev(Point2::new(0.5 * b.l() - 1e-6, t * b.w()));
            pts.push(Point3::new(p.x, p.y, z));
            let q = b.to_world_bev(Point2::new(t * b.l(), 0.5 * b.w() - 1e-6));
            pts.push(Point3::new(q.x, q.y, z));
        }
        pts
    }

    #[test]
    fn exact_and_shifted_labels() {
        let obj = bx(0.0, 0.0, 4.5, 1.9, 0.4);
        let cloud = l_shape(&obj, 30);
        let frame = frame_with(vec![cloud, Vec::new()], vec![agent(0, 15.0, 10.0), agent(1, -20.0, -3.0)]);
        let exact = ScoredLabel { bbox: obj, score: 0.8, origin: LabelOrigin::External };
        // shifted by w/2 across the heading: half the object lands in the ring
        let shift = obj.to_world_bev(Point2::new(0.0, -0.5 * obj.w()));
        let half = ScoredLabel {
            bbox: OrientedBox3::new(shift.x, shift.y, 0.0, 4.5, 1.9, 2.0, 0.4).unwrap(),
            ..exact
        };
        let empty = ScoredLabel { bbox: bx(30.0, 30.0, 4.5, 1.9, 0.0), ..exact };
        let out = filter_labels(&frame, &[exact, half, empty], &MbeParams::default()).unwrap();
        assert_eq!(out.verdicts[0].verdict, Verdict::High);
        assert_eq!(out.verdicts[1].verdict, Verdict::Low);
        assert!(out.verdicts[1].aggregated_r.unwrap() >= 0.1);
        assert_eq!(out.verdicts[2].verdict, Verdict::Low);
        assert!(out.verdicts[2].per_view.iter().all(|e| e.r.is_none() && e.o.is_none()));
        assert_eq!(out.high, vec![exact]);
        assert_eq!(out.low, vec![half, empty]);
    }

    proptest! {
        #[test]
        fn d_scale_equivariance(
            views in prop::collection::vec((0.0..0.5f64, 0.0..1.0f64, 0.001..10.0f64, 0usize..20), 1..5),
            k in 0.01..100.0f64,
        ) {
            let p = MbeParams::default();
            let a: Vec<_> = views.iter().map(|v| triple(Some(v.0), Some(v.1), v.2, v.3)).collect();
            let b: Vec<_> = views.iter().map(|v| triple(Some(v.0), Some(v.1), v.2 * k, v.3)).collect();
            let va = discriminate(&a, &p);
            let vb = discriminate(&b, &p);
            prop_assert_eq!(va.verdict, vb.verdict);
            if let (Some(ra), Some(rb)) = (va.aggregated_r, vb.aggregated_r) {
                prop_assert!((ra - rb).abs() < 1e-12);
                prop_assert!((va.aggregated_o.unwrap() - vb.aggregated_o.unwrap()).abs() < 1e-12);
            }
        }

        #[test]
        fn ring_points_never_decrease_r(
            inner in prop::collection::vec((-0.9..0.9f64, -0.45..0.45f64), 1..20),
            ring in prop::collection::vec((1.05..1.45f64, -0.6..0.6f64), 0..10),
            far in prop::collection::vec((2.0..5.0f64, -3.0..3.0f64), 0..10),
            yaw in -3.0..3.0f64,
        ) {
            let b = bx(1.0, -2.0, 2.0, 1.0, yaw);
            let to_world = |(x, y): (f64, f64)| { let p = b.to_world_bev(Point2::new(x, y)); Point3::new(p.x, p.y, 0.0) };
            let base: Vec<Point3> = inner.iter().copied().map(to_world).collect();
            let (r0, _) = encode_cpe(&b, &PointCloud::new(base.clone()), 0.5);
            let mut more = base.clone();
            more.extend(ring.iter().copied().map(to_world));
            let (r1, _) = encode_cpe(&b, &PointCloud::new(more.clone()), 0.5);
            prop_assert!(r1.unwrap() >= r0.unwrap());
            // points outside the enlarged box change nothing
            let mut with_far = more.clone();
            with_far.extend(far.iter().copied().map(to_world));
            prop_assert_eq!(encode_cpe(&b, &PointCloud::new(with_far.clone()), 0.5), encode_cpe(&b, &PointCloud::new(more.clone()), 0.5));
            prop_assert_eq!(encode_bae(&b, &PointCloud::new(with_far), 0.2), encode_bae(&b, &PointCloud::new(more), 0.2));
        }
    }
}
