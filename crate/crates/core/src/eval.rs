//! Label-quality measurement and the experiment sweeps built on it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{bev_iou, iou_3d, OrientedBox3};
use crate::mbe::{self, EncodingTriple, MbeParams, QualityVerdict};
use crate::prelim::{surrogate_detect, ScoredLabel, SurrogateConfig};
use crate::rng;
use crate::scene::{apply_localization_noise, generate_frame, NoiseModel, SceneConfig, SceneError, SceneFrame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouMode {
    #[default]
    Bev,
    #[serde(rename = "3d")]
    ThreeD,
}

impl IouMode {
    pub fn iou(&self, a: &OrientedBox3, b: &OrientedBox3) -> f64 {
        match self {
            IouMode::Bev => bev_iou(a, b),
            IouMode::ThreeD => iou_3d(a, b),
        }
    }
}

impl std::str::FromStr for IouMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bev" => Ok(IouMode::Bev),
            "3d" => Ok(IouMode::ThreeD),
            other => Err(format!("unknown IoU mode '{other}' (expected bev or 3d)")),
        }
    }
}

/// True/false positive and miss counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MatchCounts {
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn add(&mut self, o: MatchCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelMatch {
    pub gt_index: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub recall: f64,
    pub precision: f64,
    #[serde(flatten)]
    pub counts: MatchCounts,
    /// Match of each label, in input order.
    pub matches: Vec<Option<LabelMatch>>,
    pub iou_threshold: f64,
}

/// Greedy one-to-one matching in descending score order.
///
/// Each label takes the unmatched ground-truth box with the highest IoU at or
/// above the threshold; equal IoUs go to the lower ground-truth index and equal
/// scores keep input order.
pub fn match_labels(labels: &[ScoredLabel], gt: &[OrientedBox3], iou_threshold: f64, mode: IouMode) -> MatchReport {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| labels[b].score.total_cmp(&labels[a].score));
    let mut taken = vec![false; gt.len()];
    let mut matches = vec![None; labels.len()];
    for &i in &order {
        let mut best: Option<LabelMatch> = None;
        for (j, g) in gt.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let iou = mode.iou(&labels[i].bbox, g);
            if iou >= iou_threshold && best.is_none_or(|b| iou > b.iou) {
                best = Some(LabelMatch { gt_index: j, iou });
            }
        }
        if let Some(m) = best {
            taken[m.gt_index] = true;
            matches[i] = Some(m);
        }
    }
    let tp = matches.iter().filter(|m| m.is_some()).count();
    let counts = MatchCounts { tp, fp: labels.len() - tp, fn_: gt.len() - tp };
    MatchReport { recall: counts.recall(), precision: counts.precision(), counts, matches, iou_threshold }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Labels that overlap no remaining ground-truth box at all.
    pub unmatched: usize,
}

impl IouHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, o: &IouHistogram) {
        for (a, b) in self.counts.iter_mut().zip(&o.counts) {
            *a += b;
        }
        self.unmatched += o.unmatched;
    }
}

/// Histogram of matched-pair IoUs over `bins` equal-width bins on `[0, 1]`.
///
/// Pairs come from greedy matching with any positive overlap accepted.
pub fn iou_histogram(labels: &[ScoredLabel], gt: &[OrientedBox3], bins: usize, mode: IouMode) -> IouHistogram {
    let bins = bins.max(1);
    let edges: Vec<f64> = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    let mut counts = vec![0; bins];
    let report = match_labels(labels, gt, f64::MIN_POSITIVE, mode);
    let mut unmatched = 0;
    for m in &report.matches {
        match m {
            Some(m) => counts[((m.iou * bins as f64) as usize).min(bins - 1)] += 1,
            None => unmatched += 1,
        }
    }
    IouHistogram { edges, counts, unmatched }
}

/// Frames with their preliminary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub frames: Vec<SceneFrame>,
    pub labels: Vec<Vec<ScoredLabel>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_frames: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { n_frames: 100, seed: 2024 }
    }
}

/// Seed of frame `i` in a corpus.
pub fn frame_seed(corpus_seed: u64, i: u64) -> u64 {
    rng::derive_seed(corpus_seed, &[rng::TAG_FRAME, i])
}

pub fn generate_frames(scene: &SceneConfig, corpus: &CorpusConfig) -> Result<Vec<SceneFrame>, SceneError> {
    (0..corpus.n_frames as u64)
        .into_par_iter()
        .map(|i| generate_frame(scene, i, frame_seed(corpus.seed, i)))
        .collect()
}

pub fn build_corpus(scene: &SceneConfig, surrogate: &SurrogateConfig, corpus: &CorpusConfig) -> Result<Corpus, SceneError> {
    let frames = generate_frames(scene, corpus)?;
    let labels = frames.par_iter().map(|f| surrogate_detect(f, surrogate)).collect();
    Ok(Corpus { frames, labels })
}

/// Match settings shared by all sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub iou_threshold: f64,
    pub mode: IouMode,
    pub histogram_bins: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { iou_threshold: 0.5, mode: IouMode::Bev, histogram_bins: 10 }
    }
}

/// Pooled counts over frames for one label subset per frame.
pub fn pooled_counts<'a>(frames: &[SceneFrame], labels: impl IntoIterator<Item = &'a [ScoredLabel]>, eval: &EvalSettings) -> MatchCounts {
    let mut total = MatchCounts::default();
    for (f, l) in frames.iter().zip(labels) {
        total.add(match_labels(l, &f.gt_boxes, eval.iou_threshold, eval.mode).counts);
    }
    total
}

fn encode_corpus(frames: &[SceneFrame], labels: &[Vec<ScoredLabel>], eta: (f64, f64), eps: f64) -> Vec<Vec<Vec<EncodingTriple>>> {
    frames
        .par_iter()
        .zip(labels.par_iter())
        .map(|(f, l)| mbe::encode_frame(f, l, eta.0, eta.1, eps))
        .collect()
}

fn kept(labels: &[ScoredLabel], verdicts: &[QualityVerdict]) -> Vec<ScoredLabel> {
    labels.iter().zip(verdicts).filter(|(_, v)| v.is_high()).map(|(l, _)| *l).collect()
}

/// Verdicts of every label of every frame.
pub fn filter_corpus(frames: &[SceneFrame], labels: &[Vec<ScoredLabel>], params: &MbeParams) -> Vec<Vec<QualityVerdict>> {
    encode_corpus(frames, labels, (params.eta_enlarge, params.eta_reduce), params.epsilon_d)
        .iter()
        .map(|e| mbe::discriminate_all(e, params))
        .collect()
}

/// Counts of the labels judged high quality.
pub fn filtered_counts(frames: &[SceneFrame], labels: &[Vec<ScoredLabel>], verdicts: &[Vec<QualityVerdict>], eval: &EvalSettings) -> MatchCounts {
    let high: Vec<Vec<ScoredLabel>> = labels.iter().zip(verdicts).map(|(l, v)| kept(l, v)).collect();
    pooled_counts(frames, high.iter().map(|v| v.as_slice()), eval)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: String,
    pub recall: f64,
    pub precision: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl SweepRow {
    fn new(param: &str, value: String, c: MatchCounts) -> Self {
        Self { param: param.into(), value, recall: c.recall(), precision: c.precision(), tp: c.tp, fp: c.fp, fn_: c.fn_ }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn rows_for<'a>(&'a self, param: &'a str) -> impl Iterator<Item = &'a SweepRow> + 'a {
        self.rows.iter().filter(move |r| r.param == param)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("param,value,recall,precision,tp,fp,fn\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.param,
                r.value,
                fmt_sig(r.recall, 6),
                fmt_sig(r.precision, 6),
                r.tp,
                r.fp,
                r.fn_
            ));
        }
        s
    }
}

pub const PHI_R_GRID: [f64; 5] = [0.01, 0.05, 0.10, 0.15, 0.20];
pub const PHI_O_GRID: [f64; 6] = [0.1, 0.3, 0.5, 0.7, 0.8, 0.9];
/// `[enlarge, reduce]` pairs.
pub const ETA_GRID: [(f64, f64); 7] = [(0.4, 0.2), (0.4, 0.3), (0.5, 0.2), (0.5, 0.3), (0.6, 0.2), (0.6, 0.3), (0.6, 0.4)];
pub const SIGMA_GRID: [f64; 7] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrids {
    pub phi_r: Vec<f64>,
    pub phi_o: Vec<f64>,
    pub eta: Vec<[f64; 2]>,
    pub sigma: Vec<f64>,
    pub delta: Vec<f64>,
    pub noise_seeds: usize,
    pub noise_seed: u64,
    pub sigma_yaw: f64,
}

impl Default for SweepGrids {
    fn default() -> Self {
        Self {
            phi_r: PHI_R_GRID.to_vec(),
            phi_o: PHI_O_GRID.to_vec(),
            eta: ETA_GRID.iter().map(|&(a, b)| [a, b]).collect(),
            sigma: SIGMA_GRID.to_vec(),
            delta: vec![0.01, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            noise_seeds: 10,
            noise_seed: 99,
            sigma_yaw: 0.0,
        }
    }
}

pub fn fmt_eta(e: [f64; 2]) -> String {
    format!("{}/{}", fmt_sig(e[0], 6), fmt_sig(e[1], 6))
}

/// Filters the corpus at every grid point. The `phi_r` rows hold `phi_o` at
/// its base value and vice versa; `eta` rows keep both tolerances at base.
pub fn sweep_mbe(corpus: &Corpus, phi_r: &[f64], phi_o: &[f64], eta: &[[f64; 2]], base: &MbeParams, eval: &EvalSettings) -> SweepResult {
    let mut rows = Vec::new();
    let run = |enc: &[Vec<Vec<EncodingTriple>>], p: &MbeParams| {
        let verdicts: Vec<Vec<QualityVerdict>> = enc.iter().map(|e| mbe::discriminate_all(e, p)).collect();
        filtered_counts(&corpus.frames, &corpus.labels, &verdicts, eval)
    };
    if !phi_r.is_empty() || !phi_o.is_empty() {
        let enc = encode_corpus(&corpus.frames, &corpus.labels, (base.eta_enlarge, base.eta_reduce), base.epsilon_d);
        for &v in phi_r {
            rows.push(SweepRow::new("phi_r", fmt_sig(v, 6), run(&enc, &MbeParams { phi_r: v, ..*base })));
        }
        for &v in phi_o {
            rows.push(SweepRow::new("phi_o", fmt_sig(v, 6), run(&enc, &MbeParams { phi_o: v, ..*base })));
        }
    }
    for &e in eta {
        let enc = encode_corpus(&corpus.frames, &corpus.labels, (e[0], e[1]), base.epsilon_d);
        let p = MbeParams { eta_enlarge: e[0], eta_reduce: e[1], ..*base };
        rows.push(SweepRow::new("eta", fmt_eta(e), run(&enc, &p)));
    }
    SweepResult { rows }
}

/// Confidence-threshold sweep, before (`delta`) and after (`delta_mbe`) filtering.
pub fn sweep_delta(corpus: &Corpus, deltas: &[f64], params: &MbeParams, eval: &EvalSettings) -> SweepResult {
    let verdicts = filter_corpus(&corpus.frames, &corpus.labels, params);
    let mut rows = Vec::new();
    for &d in deltas {
        let kept: Vec<Vec<ScoredLabel>> = corpus.labels.iter().map(|l| crate::prelim::threshold_filter(l, d)).collect();
        rows.push(SweepRow::new("delta", fmt_sig(d, 6), pooled_counts(&corpus.frames, kept.iter().map(|v| v.as_slice()), eval)));
    }
    for &d in deltas {
        let kept: Vec<Vec<ScoredLabel>> = corpus
            .labels
            .iter()
            .zip(&verdicts)
            .map(|(l, v)| l.iter().zip(v).filter(|(x, q)| x.score >= d && q.is_high()).map(|(x, _)| *x).collect())
            .collect();
        rows.push(SweepRow::new("delta_mbe", fmt_sig(d, 6), pooled_counts(&corpus.frames, kept.iter().map(|v| v.as_slice()), eval)));
    }
    SweepResult { rows }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub sigma: f64,
    pub seed: u64,
    pub recall: f64,
    pub precision: f64,
    #[serde(flatten)]
    pub counts: MatchCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSummary {
    pub sigma: f64,
    pub recall_mean: f64,
    pub recall_std: f64,
    pub precision_mean: f64,
    pub precision_std: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseSweep {
    pub rows: Vec<NoiseRow>,
    pub summary: Vec<NoiseSummary>,
}

impl NoiseSweep {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sigma,seed,recall,precision\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", fmt_sig(r.sigma, 6), r.seed, fmt_sig(r.recall, 6), fmt_sig(r.precision, 6)));
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("sigma,recall_mean,recall_std,precision_mean,precision_std\n");
        for r in &self.summary {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                fmt_sig(r.sigma, 6),
                fmt_sig(r.recall_mean, 6),
                fmt_sig(r.recall_std, 6),
                fmt_sig(r.precision_mean, 6),
                fmt_sig(r.precision_std, 6)
            ));
        }
        s
    }
}

/// Noise seed used for replicate `k` of a noise sweep.
pub fn noise_seed(base: u64, k: u64) -> u64 {
    rng::derive_seed(base, &[rng::TAG_NOISE, k])
}

/// Re-filters the corpus under localization noise for every `(sigma, seed)`.
pub fn sweep_noise(corpus: &Corpus, sigmas: &[f64], seeds: usize, grids: &SweepGrids, params: &MbeParams, eval: &EvalSettings) -> NoiseSweep {
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &sigma in sigmas {
        let per_seed: Vec<NoiseRow> = (0..seeds as u64)
            .into_par_iter()
            .map(|k| {
                let noise = NoiseModel { sigma_xy: sigma, sigma_yaw: if sigma > 0.0 { grids.sigma_yaw } else { 0.0 }, seed: noise_seed(grids.noise_seed, k) };
                let noisy: Vec<SceneFrame> = corpus.frames.iter().map(|f| apply_localization_noise(f, &noise)).collect();
                let verdicts = filter_corpus(&noisy, &corpus.labels, params);
                let counts = filtered_counts(&corpus.frames, &corpus.labels, &verdicts, eval);
                NoiseRow { sigma, seed: k, recall: counts.recall(), precision: counts.precision(), counts }
            })
            .collect();
        let (rm, rs) = mean_std(per_seed.iter().map(|r| r.recall));
        let (pm, ps) = mean_std(per_seed.iter().map(|r| r.precision));
        summary.push(NoiseSummary { sigma, recall_mean: rm, recall_std: rs, precision_mean: pm, precision_std: ps });
        rows.extend(per_seed);
    }
    NoiseSweep { rows, summary }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = xs.collect();
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let rx = ranks(x);
    let ry = ranks(y);
    let (mx, _) = mean_std(rx.iter().copied());
    let (my, _) = mean_std(ry.iter().copied());
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Formats like C's `%.{sig}g`.
pub fn fmt_sig(x: f64, sig: usize) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.*e}", sig - 1, x);
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= sig as i32 {
        let mant = trim_zeros(mant);
        format!("{mant}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    } else {
        let decimals = (sig as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
