//! Synthetic multi-agent LiDAR frames.
//!
//! Each agent carries a sensor at its box center raised by `sensor_height`.
//! Visible vertical faces of every other box are sampled with an areal density
//! of `density / range^2` points per square meter, and occlusion is resolved
//! with an azimuth z-buffer: each azimuth bin remembers which box the bin's
//! center ray hits first, and a face point survives only if its own box owns
//! its bin. Boxes are treated as infinitely tall occluders.
//!
//! Vehicle surfaces are sampled on a body box obtained by shrinking the
//! annotation box by `body_margin_l` / `body_margin_w` on each side. Setting
//! both margins to zero puts every point on the annotation box surface.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{footprints_overlap, rotate_about, GeometryError, OrientedBox3, Point2, Point3};
use crate::rng;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("could not place {what} #{index} without overlap after {attempts} attempts")]
    Placement { what: &'static str, index: usize, attempts: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Extent {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Self {
        Self { x_min, x_max, y_min, y_max }
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.x_max, self.y_min, self.y_max].iter().all(|v| v.is_finite())
            && self.x_max > self.x_min
            && self.y_max > self.y_min
    }

    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    pub fn contains_box(&self, b: &OrientedBox3) -> bool {
        b.corners_bev().iter().all(|c| self.contains(*c))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.x_max, self.y_min, self.y_max]
    }
}

/// Uniform ranges `[lo, hi]` for box extents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizePrior {
    pub l: [f64; 2],
    pub w: [f64; 2],
    pub h: [f64; 2],
}

impl SizePrior {
    pub fn car() -> Self {
        Self { l: [3.9, 4.9], w: [1.7, 2.1], h: [1.4, 1.7] }
    }

    pub fn clutter() -> Self {
        Self { l: [0.3, 1.6], w: [0.3, 1.2], h: [0.5, 1.5] }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> (f64, f64, f64) {
        let u = |r: &mut R, [lo, hi]: [f64; 2]| if hi > lo { r.random_range(lo..=hi) } else { lo };
        let l = u(rng, self.l);
        let w = u(rng, self.w);
        let h = u(rng, self.h);
        (l, w, h)
    }

    fn is_valid(&self) -> bool {
        [self.l, self.w, self.h].iter().all(|[lo, hi]| lo.is_finite() && hi.is_finite() && *lo > 0.0 && hi >= lo)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub extent: [f64; 4],
    /// Randomly placed agents, in addition to `fixed_agents`.
    pub n_agents: usize,
    /// Randomly placed vehicles, in addition to `fixed_objects`.
    pub n_objects: usize,
    /// Non-annotated roadside objects (poles, bins, bushes).
    pub n_clutter: usize,
    pub vehicle_size: SizePrior,
    pub clutter_size: SizePrior,
    /// Minimum BEV clearance between any two placed boxes, meters.
    pub min_gap: f64,
    pub body_margin_l: f64,
    pub body_margin_w: f64,
    pub sensor_height: f64,
    /// Points per square meter at 1 m range.
    pub density: f64,
    pub max_areal_density: f64,
    pub max_range: f64,
    /// Azimuth z-buffer bin width, radians.
    pub azimuth_bin: f64,
    /// Inward offset of sampled surface points, meters.
    pub surface_inset: f64,
    /// Round emitted coordinates to `f32` so the binary cloud format is lossless.
    pub quantize_f32: bool,
    pub ground_points: bool,
    pub max_place_attempts: usize,
    pub fixed_agents: Vec<[f64; 7]>,
    pub fixed_objects: Vec<[f64; 7]>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            extent: [-40.0, 40.0, -40.0, 40.0],
            n_agents: 3,
            n_objects: 22,
            n_clutter: 12,
            vehicle_size: SizePrior::car(),
            clutter_size: SizePrior::clutter(),
            min_gap: 1.5,
            body_margin_l: 0.22,
            body_margin_w: 0.095,
            sensor_height: 1.0,
            density: 1500.0,
            max_areal_density: 150.0,
            max_range: 70.0,
            azimuth_bin: 1e-3,
            surface_inset: 1e-5,
            quantize_f32: true,
            ground_points: false,
            max_place_attempts: 2000,
            fixed_agents: Vec::new(),
            fixed_objects: Vec::new(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<Extent, SceneError> {
        let bad = |m: String| Err(SceneError::InvalidConfig(m));
        let ext = Extent::new(self.extent[0], self.extent[1], self.extent[2], self.extent[3]);
        if !ext.is_valid() {
            return bad(format!("empty or non-finite extent {:?}", self.extent));
        }
        if self.n_agents + self.fixed_agents.len() < 2 {
            return bad("at least two agents are required".into());
        }
        if !(self.density > 0.0 && self.density.is_finite()) {
            return bad(format!("density must be positive, got {}", self.density));
        }
        if !(self.max_areal_density > 0.0) || !(self.max_range > 0.0) {
            return bad("max_areal_density and max_range must be positive".into());
        }
        if !(self.azimuth_bin > 0.0 && self.azimuth_bin < PI) {
            return bad(format!("azimuth_bin out of range: {}", self.azimuth_bin));
        }
        if !(self.min_gap >= 0.0) || !(self.surface_inset >= 0.0) || !self.sensor_height.is_finite() {
            return bad("min_gap, surface_inset must be >= 0 and sensor_height finite".into());
        }
        if !(self.body_margin_l >= 0.0 && self.body_margin_w >= 0.0) {
            return bad("body margins must be >= 0".into());
        }
        if !self.vehicle_size.is_valid() || !self.clutter_size.is_valid() {
            return bad("size priors need 0 < lo <= hi".into());
        }
        if 2.0 * self.body_margin_l >= self.vehicle_size.l[0] || 2.0 * self.body_margin_w >= self.vehicle_size.w[0] {
            return bad("body margins leave no vehicle body".into());
        }
        if self.max_place_attempts == 0 {
            return bad("max_place_attempts must be >= 1".into());
        }
        Ok(ext)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentPose {
    pub agent_id: u32,
    /// Ego shape and pose.
    pub pose: OrientedBox3,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn count_in(&self, b: &OrientedBox3) -> usize {
        self.points.iter().filter(|p| b.contains(**p)).count()
    }

    /// Rotates by `dyaw` about `pivot` then translates by `(dx, dy)`.
    pub fn transformed(&self, pivot: Point2, dyaw: f64, dx: f64, dy: f64) -> PointCloud {
        let points = self
            .points
            .iter()
            .map(|p| {
                let q = rotate_about(p.bev(), pivot, dyaw);
                Point3::new(q.x + dx, q.y + dy, p.z)
            })
            .collect();
        PointCloud { points }
    }
}

/// One synchronized multi-agent observation.
///
/// `gt_boxes` lists agent boxes first (in `agents` order), then vehicles.
/// `clouds[v]` is the world-frame cloud of `agents[v]`; `ground[v]`, when
/// present, holds that agent's ground returns, kept apart from the object
/// clouds.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFrame {
    pub frame_id: u64,
    pub extent: Extent,
    pub agents: Vec<AgentPose>,
    pub clouds: Vec<PointCloud>,
    pub ground: Vec<PointCloud>,
    pub gt_boxes: Vec<OrientedBox3>,
    pub clutter: Vec<OrientedBox3>,
}

impl SceneFrame {
    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    /// Whether `gt_boxes[i]` is one of the agents.
    pub fn is_agent_gt(&self, i: usize) -> bool {
        self.gt_boxes.get(i).is_some_and(|g| self.agents.iter().any(|a| a.pose == *g))
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::InvalidConfig(m));
        if self.agents.len() < 2 {
            return bad(format!("frame {} has {} agents, need >= 2", self.frame_id, self.agents.len()));
        }
        if self.clouds.len() != self.agents.len() {
            return bad(format!("frame {}: {} clouds for {} agents", self.frame_id, self.clouds.len(), self.agents.len()));
        }
        if !self.ground.is_empty() && self.ground.len() != self.agents.len() {
            return bad(format!("frame {}: ground clouds do not match agents", self.frame_id));
        }
        let mut ids: Vec<u32> = self.agents.iter().map(|a| a.agent_id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.agents.len() {
            return bad(format!("frame {}: duplicate agent ids", self.frame_id));
        }
        if self.clouds.iter().chain(self.ground.iter()).flat_map(|c| c.points.iter()).any(|p| !p.is_finite()) {
            return bad(format!("frame {}: non-finite point", self.frame_id));
        }
        Ok(())
    }
}

/// Zero-mean Gaussian pose error applied to every non-ego agent's cloud.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    pub sigma_xy: f64,
    pub sigma_yaw: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { sigma_xy: 0.0, sigma_yaw: 0.0, seed: 0 }
    }
}

/// Kind of a placed box; only vehicles and agents are annotated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Agent,
    Vehicle,
    Clutter,
}

struct Placed {
    annotation: OrientedBox3,
    body: OrientedBox3,
    kind: Kind,
}

fn body_of(b: &OrientedBox3, kind: Kind, cfg: &SceneConfig) -> Result<OrientedBox3, GeometryError> {
    match kind {
        Kind::Clutter => Ok(*b),
        Kind::Agent | Kind::Vehicle => {
            let l = (b.l() - 2.0 * cfg.body_margin_l).max(0.1 * b.l());
            let w = (b.w() - 2.0 * cfg.body_margin_w).max(0.1 * b.w());
            b.with_size(l, w, b.h())
        }
    }
}

fn clearance_box(b: &OrientedBox3, gap: f64) -> OrientedBox3 {
    b.with_size(b.l() + gap, b.w() + gap, b.h()).expect("positive extents stay positive")
}

fn fits(candidate: &OrientedBox3, placed: &[Placed], ext: &Extent, gap: f64) -> bool {
    if !ext.contains_box(candidate) {
        return false;
    }
    let c = clearance_box(candidate, gap);
    placed.iter().all(|p| !footprints_overlap(&c, &clearance_box(&p.annotation, gap)))
}

fn place_random<R: Rng>(
    rng: &mut R,
    cfg: &SceneConfig,
    ext: &Extent,
    prior: &SizePrior,
    placed: &[Placed],
    what: &'static str,
    index: usize,
) -> Result<OrientedBox3, SceneError> {
    for _ in 0..cfg.max_place_attempts {
        let (l, w, h) = prior.sample(rng);
        let x = rng.random_range(ext.x_min..=ext.x_max);
        let y = rng.random_range(ext.y_min..=ext.y_max);
        let yaw = rng.random_range(-PI..PI);
        let b = OrientedBox3::new(x, y, 0.5 * h, l, w, h, yaw)?;
        if fits(&b, placed, ext, cfg.min_gap) {
            return Ok(b);
        }
    }
    Err(SceneError::Placement { what, index, attempts: cfg.max_place_attempts })
}

/// Azimuth z-buffer: for every bin, the index of the first box hit by the
/// bin-center ray and the hit distance.
pub struct AzimuthBuffer {
    bin: f64,
    owner: Vec<Option<usize>>,
    depth: Vec<f64>,
}

impl AzimuthBuffer {
    pub fn build(origin: Point2, bin: f64, occluders: &[(usize, OrientedBox3)]) -> Self {
        // widen slightly so the bins tile the circle exactly
        let n_bins = (2.0 * PI / bin).ceil() as usize;
        let bin = 2.0 * PI / n_bins as f64;
        let mut owner = vec![None; n_bins];
        let mut depth = vec![f64::INFINITY; n_bins];
        for (id, b) in occluders {
            let corners = b.corners_bev();
            let center_angle = b.center_bev().sub(origin);
            let base = center_angle.y.atan2(center_angle.x);
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for c in corners {
                let d = c.sub(origin);
                let rel = wrap_pi(d.y.atan2(d.x) - base);
                lo = lo.min(rel);
                hi = hi.max(rel);
            }
            let first = ((base + lo) / bin).floor() as i64;
            let last = ((base + hi) / bin).floor() as i64;
            let poly = b.footprint();
            for k in first..=last {
                let idx = k.rem_euclid(n_bins as i64) as usize;
                let theta = (idx as f64 + 0.5) * bin;
                let dir = Point2::new(theta.cos(), theta.sin());
                if let Some(t) = ray_entry(origin, dir, &poly.vertices) {
                    if t < depth[idx] {
                        depth[idx] = t;
                        owner[idx] = Some(*id);
                    }
                }
            }
        }
        Self { bin, owner, depth }
    }

    pub fn bin_of(&self, origin: Point2, p: Point2) -> usize {
        let d = p.sub(origin);
        let a = d.y.atan2(d.x).rem_euclid(2.0 * PI);
        ((a / self.bin).floor() as usize).min(self.owner.len() - 1)
    }

    /// Direction of the ray that defines `bin`.
    pub fn bin_center(&self, bin: usize) -> f64 {
        (bin as f64 + 0.5) * self.bin
    }

    pub fn owner(&self, bin: usize) -> Option<usize> {
        self.owner[bin]
    }

    pub fn depth(&self, bin: usize) -> f64 {
        self.depth[bin]
    }

    pub fn num_bins(&self) -> usize {
        self.owner.len()
    }
}

fn wrap_pi(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Distance along a unit ray to where it enters a convex CCW polygon.
pub fn ray_entry(origin: Point2, dir: Point2, poly: &[Point2]) -> Option<f64> {
    let mut t_enter = 0.0f64;
    let mut t_exit = f64::INFINITY;
    let n = poly.len();
    for i in 0..n {
        let a = poly[i];
        let e = poly[(i + 1) % n].sub(a);
        let normal = Point2::new(e.y, -e.x);
        let num = normal.dot(a.sub(origin));
        let den = normal.dot(dir);
        if den == 0.0 {
            if num < 0.0 {
                return None;
            }
        } else if den < 0.0 {
            t_enter = t_enter.max(num / den);
        } else {
            t_exit = t_exit.min(num / den);
        }
    }
    (t_enter <= t_exit).then_some(t_enter)
}

fn quantize(p: Point3, on: bool) -> Point3 {
    if on {
        Point3::new(p.x as f32 as f64, p.y as f32 as f64, p.z as f32 as f64)
    } else {
        p
    }
}

fn emit_view(
    cfg: &SceneConfig,
    seed: u64,
    agent_index: usize,
    agent: &AgentPose,
    placed: &[Placed],
) -> (PointCloud, PointCloud) {
    let origin2 = agent.pose.center_bev();
    let origin_z = agent.pose.cz() + cfg.sensor_height;
    let occluders: Vec<(usize, OrientedBox3)> = placed
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != agent_index)
        .map(|(j, p)| (j, p.body))
        .collect();
    let zbuf = AzimuthBuffer::build(origin2, cfg.azimuth_bin, &occluders);
    let mut rng = rng::stream(seed, &[rng::TAG_EMIT, agent.agent_id as u64]);
    let mut points = Vec::new();

    for (j, body) in &occluders {
        let hl = 0.5 * body.l();
        let hw = 0.5 * body.w();
        // (outward normal in box frame, face center offset, face half-length along tangent)
        let faces = [
            (Point2::new(1.0, 0.0), Point2::new(hl, 0.0), hw),
            (Point2::new(-1.0, 0.0), Point2::new(-hl, 0.0), hw),
            (Point2::new(0.0, 1.0), Point2::new(0.0, hw), hl),
            (Point2::new(0.0, -1.0), Point2::new(0.0, -hw), hl),
        ];
        for (normal, offset, half_len) in faces {
            let fc = body.to_world_bev(offset);
            let nw = body.to_world_bev(normal).sub(body.center_bev());
            if fc.sub(origin2).dot(nw) >= 0.0 {
                continue;
            }
            let dz = body.cz() - origin_z;
            let range = (fc.sub(origin2).norm().powi(2) + dz * dz).sqrt();
            if range > cfg.max_range {
                continue;
            }
            let areal = (cfg.density / (range * range)).min(cfg.max_areal_density);
            let expected = areal * 2.0 * half_len * body.h();
            let mut n = expected.floor() as usize;
            if rng.random::<f64>() < expected - n as f64 {
                n += 1;
            }
            let tangent = Point2::new(-normal.y, normal.x);
            let inset = offset.sub(Point2::new(normal.x * cfg.surface_inset, normal.y * cfg.surface_inset));
            for _ in 0..n {
                let s = rng.random_range(-half_len..=half_len);
                let z = body.z_min() + rng.random::<f64>() * body.h();
                let local = Point2::new(inset.x + tangent.x * s, inset.y + tangent.y * s);
                let wp = body.to_world_bev(local);
                let bin = zbuf.bin_of(origin2, wp);
                if zbuf.owner(bin) != Some(*j) {
                    continue;
                }
                points.push(quantize(Point3::new(wp.x, wp.y, z), cfg.quantize_f32));
            }
        }
    }

    let mut ground = Vec::new();
    if cfg.ground_points {
        let mut grng = rng::stream(seed, &[rng::TAG_GROUND, agent.agent_id as u64]);
        let r_min = 2.0f64;
        // density / r^2 over an annulus integrates to 2*pi*density*ln(R/r_min)
        let expected = 2.0 * PI * cfg.density * (cfg.max_range / r_min).ln() * 0.01;
        let n = expected.round() as usize;
        for _ in 0..n {
            // log-uniform radius reproduces the 1/r^2 areal law
            let r = r_min * (cfg.max_range / r_min).powf(grng.random::<f64>());
            let th = grng.random_range(-PI..PI);
            let p = Point2::new(origin2.x + r * th.cos(), origin2.y + r * th.sin());
            let bin = zbuf.bin_of(origin2, p);
            if zbuf.depth(bin) < r || placed.iter().any(|q| q.body.contains_bev(p)) {
                continue;
            }
            ground.push(quantize(Point3::new(p.x, p.y, 0.0), cfg.quantize_f32));
        }
    }
    (PointCloud::new(points), PointCloud::new(ground))
}

/// Generates one frame. Pure function of `(cfg, seed)`.
pub fn generate_frame(cfg: &SceneConfig, frame_id: u64, seed: u64) -> Result<SceneFrame, SceneError> {
    let ext = cfg.validate()?;
    let mut rng = rng::stream(seed, &[rng::TAG_PLACE]);
    let mut placed: Vec<Placed> = Vec::new();

    let push = |placed: &mut Vec<Placed>, b: OrientedBox3, kind: Kind| -> Result<(), SceneError> {
        let body = body_of(&b, kind, cfg)?;
        placed.push(Placed { annotation: b, body, kind });
        Ok(())
    };

    for (i, a) in cfg.fixed_agents.iter().enumerate() {
        let b = OrientedBox3::from_array(*a)?;
        if !fits(&b, &placed, &ext, 0.0) {
            return Err(SceneError::InvalidConfig(format!("fixed agent {i} overlaps or leaves the extent")));
        }
        push(&mut placed, b, Kind::Agent)?;
    }
    for i in 0..cfg.n_agents {
        let b = place_random(&mut rng, cfg, &ext, &cfg.vehicle_size, &placed, "agent", i)?;
        push(&mut placed, b, Kind::Agent)?;
    }
    for (i, o) in cfg.fixed_objects.iter().enumerate() {
        let b = OrientedBox3::from_array(*o)?;
        if !fits(&b, &placed, &ext, 0.0) {
            return Err(SceneError::InvalidConfig(format!("fixed object {i} overlaps or leaves the extent")));
        }
        push(&mut placed, b, Kind::Vehicle)?;
    }
    for i in 0..cfg.n_objects {
        let b = place_random(&mut rng, cfg, &ext, &cfg.vehicle_size, &placed, "object", i)?;
        push(&mut placed, b, Kind::Vehicle)?;
    }
    for i in 0..cfg.n_clutter {
        let b = place_random(&mut rng, cfg, &ext, &cfg.clutter_size, &placed, "clutter", i)?;
        push(&mut placed, b, Kind::Clutter)?;
    }

    let agents: Vec<AgentPose> = placed
        .iter()
        .filter(|p| p.kind == Kind::Agent)
        .enumerate()
        .map(|(i, p)| AgentPose { agent_id: i as u32, pose: p.annotation })
        .collect();

    let mut clouds = Vec::with_capacity(agents.len());
    let mut ground = Vec::new();
    for (i, a) in agents.iter().enumerate() {
        // agents occupy the first slots of `placed`
        let (cloud, g) = emit_view(cfg, seed, i, a, &placed);
        clouds.push(cloud);
        if cfg.ground_points {
            ground.push(g);
        }
    }

    Ok(SceneFrame {
        frame_id,
        extent: ext,
        agents,
        clouds,
        ground,
        gt_boxes: placed.iter().filter(|p| p.kind != Kind::Clutter).map(|p| p.annotation).collect(),
        clutter: placed.iter().filter(|p| p.kind == Kind::Clutter).map(|p| p.annotation).collect(),
    })
}

/// Misaligns every non-ego cloud by a sampled rigid pose error.
///
/// The ego agent is `agent_id == 0`. Box annotations are untouched.
pub fn apply_localization_noise(frame: &SceneFrame, noise: &NoiseModel) -> SceneFrame {
    let mut out = frame.clone();
    if noise.sigma_xy <= 0.0 && noise.sigma_yaw <= 0.0 {
        return out;
    }
    for (v, agent) in frame.agents.iter().enumerate() {
        if agent.agent_id == 0 {
            continue;
        }
        let (dx, dy, dyaw) = pose_error(noise, frame.frame_id, agent.agent_id);
        let pivot = agent.pose.center_bev();
        out.clouds[v] = frame.clouds[v].transformed(pivot, dyaw, dx, dy);
        if let Some(g) = frame.ground.get(v) {
            out.ground[v] = g.transformed(pivot, dyaw, dx, dy);
        }
    }
    out
}

/// The `(dx, dy, dyaw)` drawn for one agent; exposed for diagnostics.
pub fn pose_error(noise: &NoiseModel, frame_id: u64, agent_id: u32) -> (f64, f64, f64) {
    let mut rng = rng::stream(noise.seed, &[rng::TAG_NOISE, frame_id, agent_id as u64]);
    let xy = Normal::new(0.0, noise.sigma_xy.max(0.0)).expect("finite sigma");
    let dx = xy.sample(&mut rng);
    let dy = xy.sample(&mut rng);
    let dyaw = if noise.sigma_yaw > 0.0 {
        Normal::new(0.0, noise.sigma_yaw).expect("finite sigma").sample(&mut rng)
    } else {
        0.0
    };
    (dx, dy, dyaw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_agents_around_object() -> SceneConfig {
        SceneConfig {
            n_agents: 0,
            n_objects: 0,
            n_clutter: 0,
            fixed_agents: vec![[-12.0, 0.0, 0.75, 4.5, 1.9, 1.5, 0.0], [12.0, 0.0, 0.75, 4.5, 1.9, 1.5, PI]],
            fixed_objects: vec![[0.0, 0.0, 0.75, 4.5, 1.9, 1.5, 0.6]],
            ..SceneConfig::default()
        }
    }

    fn visible_faces(cloud: &PointCloud, b: &OrientedBox3) -> usize {
        let tol = 1e-3;
        let mut seen = [false; 4];
        for p in &cloud.points {
            let q = b.to_local_bev(p.bev());
            if (q.x - 0.5 * b.l()).abs() < tol {
                seen[0] = true;
            } else if (q.x + 0.5 * b.l()).abs() < tol {
                seen[1] = true;
            } else if (q.y - 0.5 * b.w()).abs() < tol {
                seen[2] = true;
            } else if (q.y + 0.5 * b.w()).abs() < tol {
                seen[3] = true;
            }
        }
        seen.iter().filter(|s| **s).count()
    }

    #[test]
    fn opposing_views_complete_each_other() {
        let cfg = SceneConfig { body_margin_l: 0.0, body_margin_w: 0.0, ..two_agents_around_object() };
        let f = generate_frame(&cfg, 0, 3).unwrap();
        let obj = f.gt_boxes[2];
        let a = visible_faces(&f.clouds[0], &obj);
        let b = visible_faces(&f.clouds[1], &obj);
        let merged = PointCloud::new(f.clouds[0].points.iter().chain(&f.clouds[1].points).copied().collect());
        assert!(a <= 2 && b <= 2, "single views saw {a} and {b} faces");
        assert!(visible_faces(&merged, &obj) >= 3);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_frame(&cfg, 1, 11).unwrap(), generate_frame(&cfg, 1, 11).unwrap());
        assert_ne!(generate_frame(&cfg, 1, 11).unwrap(), generate_frame(&cfg, 1, 12).unwrap());
    }

    #[test]
    fn points_lie_on_annotation_surface_without_margin() {
        let cfg = SceneConfig {
            body_margin_l: 0.0,
            body_margin_w: 0.0,
            surface_inset: 0.0,
            quantize_f32: false,
            ..SceneConfig::default()
        };
        let f = generate_frame(&cfg, 0, 5).unwrap();
        let all: Vec<OrientedBox3> = f.gt_boxes.iter().chain(f.clutter.iter()).copied().collect();
        for cloud in &f.clouds {
            for p in &cloud.points {
                let on: Vec<_> = all
                    .iter()
                    .filter(|b| {
                        let q = b.to_local_bev(p.bev());
                        let dx = (q.x.abs() - 0.5 * b.l()).abs();
                        let dy = (q.y.abs() - 0.5 * b.w()).abs();
                        let inside_x = q.x.abs() <= 0.5 * b.l() + 1e-9;
                        let inside_y = q.y.abs() <= 0.5 * b.w() + 1e-9;
                        ((dx < 1e-9 && inside_y) || (dy < 1e-9 && inside_x)) && p.z >= b.z_min() && p.z <= b.z_max()
                    })
                    .collect();
                assert_eq!(on.len(), 1, "point {p:?} on {} surfaces", on.len());
            }
        }
    }

    #[test]
    fn occlusion_soundness() {
        let cfg = SceneConfig::default();
        let f = generate_frame(&cfg, 0, 9).unwrap();
        let bodies: Vec<OrientedBox3> = f
            .gt_boxes
            .iter()
            .map(|b| body_of(b, Kind::Vehicle, &cfg).unwrap())
            .chain(f.clutter.iter().copied())
            .collect();
        for (v, a) in f.agents.iter().enumerate() {
            let origin = a.pose.center_bev();
            let occ: Vec<(usize, OrientedBox3)> =
                bodies.iter().enumerate().filter(|(j, _)| *j != v).map(|(j, b)| (j, *b)).collect();
            let zbuf = AzimuthBuffer::build(origin, cfg.azimuth_bin, &occ);
            for p in &f.clouds[v].points {
                let bin = zbuf.bin_of(origin, p.bev());
                let owner = zbuf.owner(bin).expect("kept point in empty bin");
                // the bin's nearest surface is the box the point belongs to
                assert!(bodies[owner].scaled(1e-4).unwrap().contains_bev(p.bev()));
                // and no other box is hit nearer along the bin center ray
                let theta = zbuf.bin_center(bin);
                let dir = Point2::new(theta.cos(), theta.sin());
                for (j, b) in &occ {
                    if let Some(t) = ray_entry(origin, dir, &b.footprint().vertices) {
                        assert!(t >= zbuf.depth(bin) - 1e-9 || *j == owner, "bin {bin} owner {owner} depth {} other {j} t {t}", zbuf.depth(bin));
                    }
                }
            }
        }
    }

    #[test]
    fn density_follows_inverse_square() {
        let count_at = |dist: f64| {
            let cfg = SceneConfig {
                n_agents: 0,
                n_objects: 0,
                n_clutter: 0,
                max_areal_density: 1e9,
                fixed_agents: vec![[0.0, 0.0, 0.75, 4.5, 1.9, 1.5, 0.0], [0.0, -35.0, 0.75, 4.5, 1.9, 1.5, 0.0]],
                fixed_objects: vec![[dist, 0.0, 0.75, 4.5, 1.9, 1.5, 0.4]],
                ..SceneConfig::default()
            };
            let f = generate_frame(&cfg, 0, 21).unwrap();
            f.clouds[0].count_in(&f.gt_boxes[2]) as f64
        };
        let ratio = count_at(10.0) / count_at(20.0);
        assert!((ratio - 4.0).abs() <= 1.0, "ratio {ratio}");
    }

    #[test]
    fn placement_failure_is_reported() {
        let cfg = SceneConfig { extent: [0.0, 8.0, 0.0, 8.0], n_objects: 40, max_place_attempts: 50, ..SceneConfig::default() };
        assert!(matches!(generate_frame(&cfg, 0, 1), Err(SceneError::Placement { .. })));
    }

    #[test]
    fn rejects_single_agent() {
        let cfg = SceneConfig { n_agents: 1, ..SceneConfig::default() };
        assert!(matches!(generate_frame(&cfg, 0, 1), Err(SceneError::InvalidConfig(_))));
    }

    #[test]
    fn ground_points_are_separate() {
        let cfg = SceneConfig { ground_points: true, ..SceneConfig::default() };
        let f = generate_frame(&cfg, 0, 4).unwrap();
        assert_eq!(f.ground.len(), f.agents.len());
        assert!(f.ground.iter().all(|g| !g.is_empty() && g.points.iter().all(|p| p.z == 0.0)));
        let plain = generate_frame(&SceneConfig::default(), 0, 4).unwrap();
        assert_eq!(plain.clouds, f.clouds);
    }

    #[test]
    fn zero_noise_is_identity_and_ego_is_fixed() {
        let f = generate_frame(&SceneConfig::default(), 0, 8).unwrap();
        assert_eq!(apply_localization_noise(&f, &NoiseModel::default()), f);
        let noisy = apply_localization_noise(&f, &NoiseModel { sigma_xy: 0.6, sigma_yaw: 0.01, seed: 3 });
        assert_eq!(noisy.clouds[0], f.clouds[0]);
        assert_ne!(noisy.clouds[1], f.clouds[1]);
        assert_eq!(noisy.gt_boxes, f.gt_boxes);
    }

    #[test]
    fn every_gt_within_extent() {
        let f = generate_frame(&SceneConfig::default(), 0, 2).unwrap();
        assert!(f.gt_boxes.iter().all(|b| f.extent.contains_box(b)));
        assert!((0..f.agents.len()).all(|i| f.is_agent_gt(i)));
        assert!(!f.is_agent_gt(f.agents.len()));
    }
}
