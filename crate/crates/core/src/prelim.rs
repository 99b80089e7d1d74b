//! Preliminary labels: agent-shared boxes and a stochastic detector surrogate.
//!
//! The surrogate stands in for a trained initial detector. True positives are
//! jittered copies of annotated boxes with scores drawn from a high-mean Beta
//! model; false positives are placed either in free space or next to clutter
//! objects and draw scores from a low-mean Beta model. Sweeping a confidence
//! threshold over its output trades recall against precision the way a real
//! detector's output does.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Beta, Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{bev_iou, OrientedBox3};
use crate::rng;
use crate::scene::{SceneFrame, SizePrior};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelOrigin {
    AgentShared,
    SurrogateTp,
    SurrogateFp,
    External,
}

impl LabelOrigin {
    pub fn as_str(&self) -> &'static str {
        match self {
            LabelOrigin::AgentShared => "agent_shared",
            LabelOrigin::SurrogateTp => "surrogate_tp",
            LabelOrigin::SurrogateFp => "surrogate_fp",
            LabelOrigin::External => "external",
        }
    }
}

impl fmt::Display for LabelOrigin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LabelOrigin {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "agent_shared" => Ok(LabelOrigin::AgentShared),
            "surrogate_tp" => Ok(LabelOrigin::SurrogateTp),
            "surrogate_fp" => Ok(LabelOrigin::SurrogateFp),
            "external" => Ok(LabelOrigin::External),
            other => Err(format!("unknown label origin '{other}'")),
        }
    }
}

/// A scored box. `origin` is diagnostic only; filtering and evaluation never read it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredLabel {
    pub bbox: OrientedBox3,
    pub score: f64,
    pub origin: LabelOrigin,
}

impl ScoredLabel {
    pub fn new(bbox: OrientedBox3, score: f64, origin: LabelOrigin) -> Result<Self, PrelimError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(PrelimError::InvalidScore(score));
        }
        Ok(Self { bbox, score, origin })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PrelimError {
    #[error("score {0} outside [0, 1]")]
    InvalidScore(f64),
    #[error("invalid surrogate config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaScore {
    pub a: f64,
    pub b: f64,
}

impl BetaScore {
    pub fn mean(&self) -> f64 {
        self.a / (self.a + self.b)
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        Beta::new(self.a, self.b).expect("validated beta parameters").sample(rng).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub p_detect: f64,
    /// RMS length of the BEV center offset, meters; each axis gets `jitter_pos / sqrt(2)`.
    pub jitter_pos: f64,
    /// Relative std of l, w, h.
    pub jitter_size: f64,
    pub jitter_yaw: f64,
    /// Poisson mean of false positives per frame.
    pub fp_per_frame: f64,
    /// Share of false positives attached to clutter rather than free space.
    pub fp_clutter_fraction: f64,
    /// Max center offset of a clutter-attached false positive from its clutter object.
    pub fp_clutter_offset: f64,
    pub fp_size: SizePrior,
    pub fp_max_attempts: usize,
    pub tp_score: BetaScore,
    pub fp_score: BetaScore,
    /// Score model for agent boxes; the initial detector overfits to agents.
    pub agent_score: BetaScore,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            p_detect: 0.9,
            jitter_pos: 0.1,
            jitter_size: 0.01,
            jitter_yaw: 0.01,
            fp_per_frame: 10.0,
            fp_clutter_fraction: 0.5,
            fp_clutter_offset: 0.8,
            fp_size: SizePrior::car(),
            fp_max_attempts: 200,
            tp_score: BetaScore { a: 5.0, b: 2.0 },
            fp_score: BetaScore { a: 2.0, b: 5.0 },
            agent_score: BetaScore { a: 20.0, b: 1.0 },
            seed: 17,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<(), PrelimError> {
        let bad = |m: String| Err(PrelimError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.p_detect) || !(0.0..=1.0).contains(&self.fp_clutter_fraction) {
            return bad("probabilities must lie in [0, 1]".into());
        }
        let stds = [self.jitter_pos, self.jitter_size, self.jitter_yaw, self.fp_clutter_offset];
        if stds.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad(format!("jitters must be finite and >= 0, got {stds:?}"));
        }
        if !(self.fp_per_frame.is_finite() && self.fp_per_frame >= 0.0) {
            return bad(format!("fp_per_frame must be >= 0, got {}", self.fp_per_frame));
        }
        for (name, m) in [("tp_score", self.tp_score), ("fp_score", self.fp_score), ("agent_score", self.agent_score)] {
            if !(m.a > 0.0 && m.b > 0.0 && m.a.is_finite() && m.b.is_finite()) {
                return bad(format!("{name} needs positive finite parameters"));
            }
        }
        if self.tp_score.mean() <= self.fp_score.mean() {
            return bad("mean TP score must exceed mean FP score".into());
        }
        if self.fp_max_attempts == 0 {
            return bad("fp_max_attempts must be >= 1".into());
        }
        Ok(())
    }
}

/// One score-1 label per agent, copied from its shared ego box.
pub fn agent_labels(frame: &SceneFrame) -> Vec<ScoredLabel> {
    frame
        .agents
        .iter()
        .map(|a| ScoredLabel { bbox: a.pose, score: 1.0, origin: LabelOrigin::AgentShared })
        .collect()
}

fn jitter_box<R: Rng>(b: &OrientedBox3, cfg: &SurrogateConfig, rng: &mut R) -> OrientedBox3 {
    let mut draw = |sigma: f64| {
        if sigma > 0.0 {
            Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
        } else {
            0.0
        }
    };
    let dx = draw(cfg.jitter_pos * FRAC_1_SQRT_2);
    let dy = draw(cfg.jitter_pos * FRAC_1_SQRT_2);
    let sl = draw(cfg.jitter_size);
    let sw = draw(cfg.jitter_size);
    let sh = draw(cfg.jitter_size);
    let dyaw = draw(cfg.jitter_yaw);
    if dx == 0.0 && dy == 0.0 && sl == 0.0 && sw == 0.0 && sh == 0.0 && dyaw == 0.0 {
        return *b;
    }
    let rel = |v: f64, s: f64| v * (1.0 + s).max(0.1);
    OrientedBox3::new(
        b.cx() + dx,
        b.cy() + dy,
        b.cz(),
        rel(b.l(), sl),
        rel(b.w(), sw),
        rel(b.h(), sh),
        b.yaw() + dyaw,
    )
    .expect("jittered box stays valid")
}

fn sample_fp<R: Rng>(frame: &SceneFrame, cfg: &SurrogateConfig, rng: &mut R) -> Option<OrientedBox3> {
    let ext = frame.extent;
    let near_clutter = !frame.clutter.is_empty() && rng.random::<f64>() < cfg.fp_clutter_fraction;
    for _ in 0..cfg.fp_max_attempts {
        let l = rng.random_range(cfg.fp_size.l[0]..=cfg.fp_size.l[1]);
        let w = rng.random_range(cfg.fp_size.w[0]..=cfg.fp_size.w[1]);
        let h = rng.random_range(cfg.fp_size.h[0]..=cfg.fp_size.h[1]);
        let yaw = rng.random_range(-PI..PI);
        let (x, y) = if near_clutter {
            let c = &frame.clutter[rng.random_range(0..frame.clutter.len())];
            let r = cfg.fp_clutter_offset * rng.random::<f64>().sqrt();
            let t = rng.random_range(-PI..PI);
            (c.cx() + r * t.cos(), c.cy() + r * t.sin())
        } else {
            (rng.random_range(ext.x_min..=ext.x_max), rng.random_range(ext.y_min..=ext.y_max))
        };
        let b = OrientedBox3::new(x, y, 0.5 * h, l, w, h, yaw).expect("positive sizes");
        if frame.gt_boxes.iter().all(|g| bev_iou(&b, g) < 0.1) {
            return Some(b);
        }
    }
    None
}

/// Detector surrogate over one frame. Deterministic in `(frame.frame_id, cfg.seed)`.
pub fn surrogate_detect(frame: &SceneFrame, cfg: &SurrogateConfig) -> Vec<ScoredLabel> {
    let mut rng = rng::stream(cfg.seed, &[rng::TAG_SURROGATE, frame.frame_id]);
    let mut labels = Vec::new();
    for (i, gt) in frame.gt_boxes.iter().enumerate() {
        if rng.random::<f64>() >= cfg.p_detect {
            continue;
        }
        let bbox = jitter_box(gt, cfg, &mut rng);
        let model = if frame.is_agent_gt(i) { cfg.agent_score } else { cfg.tp_score };
        labels.push(ScoredLabel { bbox, score: model.sample(&mut rng), origin: LabelOrigin::SurrogateTp });
    }

    let mut fp_rng = rng::stream(cfg.seed, &[rng::TAG_FALSE_POS, frame.frame_id]);
    let n_fp = if cfg.fp_per_frame > 0.0 {
        Poisson::new(cfg.fp_per_frame).expect("positive rate").sample(&mut fp_rng) as usize
    } else {
        0
    };
    for _ in 0..n_fp {
        if let Some(bbox) = sample_fp(frame, cfg, &mut fp_rng) {
            labels.push(ScoredLabel { bbox, score: cfg.fp_score.sample(&mut fp_rng), origin: LabelOrigin::SurrogateFp });
        }
    }
    labels
}

/// Keeps labels with `score >= delta`, preserving order.
pub fn threshold_filter(labels: &[ScoredLabel], delta: f64) -> Vec<ScoredLabel> {
    labels.iter().filter(|l| l.score >= delta).copied().collect()
}
