//! Label-internal contrastive loss on a BEV feature grid.
//!
//! Boxes pick the feature vector of the grid cell under their center. The
//! default loss form sums every positive feature into one vector `S` and
//! compares `u_m . S` against a log-sum-exp over `S . v_n`, so the
//! denominator is shared by all anchors. A per-pair InfoNCE form is kept
//! behind [`LossForm::InfoNce`] for comparison.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::OrientedBox3;
use crate::scene::Extent;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LiclError {
    #[error("need at least one positive and one negative box (got {positives} and {negatives})")]
    EmptySet { positives: usize, negatives: usize },
    #[error("box center ({x}, {y}) lies outside the grid extent")]
    OutOfExtent { x: f64, y: f64 },
    #[error("feature at cell ({ix}, {iy}) has zero norm and cannot be normalized")]
    ZeroFeature { ix: usize, iy: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    /// Shared-sum form; the default.
    #[default]
    Verbatim,
    /// Standard per-pair InfoNCE over positive pairs `(m, i)`, `i != m`.
    InfoNce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiclParams {
    pub tau: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub normalize_features: bool,
    pub form: LossForm,
}

impl Default for LiclParams {
    fn default() -> Self {
        Self { tau: 0.07, gamma: 1.0, alpha: 1.0, beta: 1.0, normalize_features: true, form: LossForm::Verbatim }
    }
}

impl LiclParams {
    pub fn validate(&self) -> Result<(), LiclError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LiclError::InvalidParams(format!("tau must be positive and finite, got {}", self.tau)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(LiclError::InvalidParams(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(LiclError::InvalidParams("alpha and beta must be finite".into()));
        }
        Ok(())
    }
}

/// Dense `W x H x C` grid; `x` varies fastest, then `y`, then channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    width: usize,
    height: usize,
    channels: usize,
    values: Vec<f64>,
    extent: Extent,
}

impl FeatureGrid {
    pub fn new(width: usize, height: usize, channels: usize, values: Vec<f64>, extent: Extent) -> Result<Self, LiclError> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(LiclError::InvalidGrid(format!("dimensions must be >= 1, got {width}x{height}x{channels}")));
        }
        let n = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| LiclError::InvalidGrid("grid size overflows".into()))?;
        if values.len() != n {
            return Err(LiclError::InvalidGrid(format!("expected {n} values, got {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LiclError::InvalidGrid("values must be finite".into()));
        }
        if !extent.is_valid() {
            return Err(LiclError::InvalidGrid("extent must be non-empty".into()));
        }
        Ok(Self { width, height, channels, values, extent })
    }

    pub fn zeros(width: usize, height: usize, channels: usize, extent: Extent) -> Result<Self, LiclError> {
        Self::new(width, height, channels, vec![0.0; width * height * channels], extent)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn extent(&self) -> Extent {
        self.extent
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn offset(&self, ix: usize, iy: usize, c: usize) -> usize {
        (c * self.height + iy) * self.width + ix
    }

    pub fn feature(&self, ix: usize, iy: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.values[self.offset(ix, iy, c)]).collect()
    }

    fn add_feature(&mut self, ix: usize, iy: usize, g: &[f64]) {
        for (c, v) in g.iter().enumerate() {
            let o = self.offset(ix, iy, c);
            self.values[o] += v;
        }
    }
}

fn cell(v: f64, lo: f64, hi: f64, n: usize) -> usize {
    let k = ((v - lo) / (hi - lo) * n as f64).floor();
    (k.max(0.0) as usize).min(n - 1)
}

/// Cell under the box center; the upper extent edge clamps into the last cell.
pub fn grid_index(b: &OrientedBox3, grid: &FeatureGrid) -> Result<(usize, usize), LiclError> {
    let e = grid.extent;
    let (x, y) = (b.cx(), b.cy());
    if !(x >= e.x_min && x <= e.x_max && y >= e.y_min && y <= e.y_max) {
        return Err(LiclError::OutOfExtent { x, y });
    }
    Ok((cell(x, e.x_min, e.x_max, grid.width), cell(y, e.y_min, e.y_max, grid.height)))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Log-sum-exp with max shift; returns the value and the softmax weights.
fn log_sum_exp(xs: &[f64]) -> (f64, Vec<f64>) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    (m + s.ln(), e.into_iter().map(|v| v / s).collect())
}

struct Gathered {
    cells: Vec<(usize, usize)>,
    raw: Vec<Vec<f64>>,
    unit: Vec<Vec<f64>>,
}

fn gather(grid: &FeatureGrid, boxes: &[OrientedBox3], normalize: bool) -> Result<Gathered, LiclError> {
    let mut g = Gathered { cells: Vec::new(), raw: Vec::new(), unit: Vec::new() };
    for b in boxes {
        let (ix, iy) = grid_index(b, grid)?;
        let f = grid.feature(ix, iy);
        let u = if normalize {
            let n = dot(&f, &f).sqrt();
            if !(n > 0.0) {
                return Err(LiclError::ZeroFeature { ix, iy });
            }
            f.iter().map(|v| v / n).collect()
        } else {
            f.clone()
        };
        g.cells.push((ix, iy));
        g.raw.push(f);
        g.unit.push(u);
    }
    Ok(g)
}

fn check(pos: &[OrientedBox3], neg: &[OrientedBox3], params: &LiclParams) -> Result<(), LiclError> {
    params.validate()?;
    if pos.is_empty() || neg.is_empty() {
        return Err(LiclError::EmptySet { positives: pos.len(), negatives: neg.len() });
    }
    Ok(())
}

/// Loss and gradient with respect to the (possibly normalized) features.
fn loss_on_features(u: &[Vec<f64>], v: &[Vec<f64>], tau: f64, form: LossForm) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let c = u[0].len();
    let mut gu = vec![vec![0.0; c]; u.len()];
    let mut gv = vec![vec![0.0; c]; v.len()];
    match form {
        LossForm::Verbatim => {
            let m = u.len() as f64;
            let mut s = vec![0.0; c];
            for f in u {
                for (a, b) in s.iter_mut().zip(f) {
                    *a += b;
                }
            }
            let logits: Vec<f64> = v.iter().map(|f| dot(&s, f) / tau).collect();
            let (lse, p) = log_sum_exp(&logits);
            let numer: f64 = u.iter().map(|f| dot(f, &s) / tau).sum();
            let loss = -(numer / m) + lse;
            // every u_m enters only through S
            let mut gs: Vec<f64> = s.iter().map(|x| -2.0 * x / (m * tau)).collect();
            for (pn, f) in p.iter().zip(v) {
                for (a, b) in gs.iter_mut().zip(f) {
                    *a += pn * b / tau;
                }
            }
            for g in gu.iter_mut() {
                g.copy_from_slice(&gs);
            }
            for (g, pn) in gv.iter_mut().zip(&p) {
                for (a, b) in g.iter_mut().zip(&s) {
                    *a = pn * b / tau;
                }
            }
            (loss, gu, gv)
        }
        LossForm::InfoNce => {
            let pairs: Vec<(usize, usize)> = if u.len() == 1 {
                vec![(0, 0)]
            } else {
                (0..u.len()).flat_map(|a| (0..u.len()).filter(move |&b| b != a).map(move |b| (a, b))).collect()
            };
            let np = pairs.len() as f64;
            let mut loss = 0.0;
            for &(a, b) in &pairs {
                let mut logits = vec![dot(&u[a], &u[b]) / tau];
                logits.extend(v.iter().map(|f| dot(&u[a], f) / tau));
                let (lse, p) = log_sum_exp(&logits);
                loss += (lse - logits[0]) / np;
                let ws = (p[0] - 1.0) / (np * tau);
                for k in 0..c {
                    let (ua, ub) = (u[a][k], u[b][k]);
                    gu[a][k] += ws * ub;
                    gu[b][k] += ws * ua;
                }
                for (n, f) in v.iter().enumerate() {
                    let w = p[n + 1] / (np * tau);
                    for k in 0..c {
                        gu[a][k] += w * f[k];
                        gv[n][k] += w * u[a][k];
                    }
                }
            }
            (loss, gu, gv)
        }
    }
}

/// Contrastive loss of positive boxes against negative boxes.
pub fn licl_loss(grid: &FeatureGrid, pos: &[OrientedBox3], neg: &[OrientedBox3], params: &LiclParams) -> Result<f64, LiclError> {
    licl_loss_and_grad(grid, pos, neg, params).map(|(l, _)| l)
}

/// Gradient of [`licl_loss`] with respect to every grid value.
pub fn licl_grad(grid: &FeatureGrid, pos: &[OrientedBox3], neg: &[OrientedBox3], params: &LiclParams) -> Result<FeatureGrid, LiclError> {
    licl_loss_and_grad(grid, pos, neg, params).map(|(_, g)| g)
}

pub fn licl_loss_and_grad(
    grid: &FeatureGrid,
    pos: &[OrientedBox3],
    neg: &[OrientedBox3],
    params: &LiclParams,
) -> Result<(f64, FeatureGrid), LiclError> {
    check(pos, neg, params)?;
    let gp = gather(grid, pos, params.normalize_features)?;
    let gn = gather(grid, neg, params.normalize_features)?;
    let (loss, du, dv) = loss_on_features(&gp.unit, &gn.unit, params.tau, params.form);
    let mut out = FeatureGrid { values: vec![0.0; grid.values.len()], ..grid.clone() };
    for (set, grads) in [(&gp, du), (&gn, dv)] {
        for ((&(ix, iy), (f, u)), g) in set.cells.iter().zip(set.raw.iter().zip(&set.unit)).zip(grads) {
            let g = if params.normalize_features {
                let n = dot(f, f).sqrt();
                let ug = dot(u, &g);
                g.iter().zip(u).map(|(gi, ui)| (gi - ui * ug) / n).collect()
            } else {
                g
            };
            out.add_feature(ix, iy, &g);
        }
    }
    Ok((loss, out))
}

/// Weighted sum of the detector losses and the contrastive term.
pub fn total_loss(l_reg: f64, l_cls: f64, l_licl: f64, params: &LiclParams) -> f64 {
    params.alpha * l_reg + params.beta * l_cls + params.gamma * l_licl
}
