//! Pipeline configuration and the command implementations behind the binary.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{self, Corpus, CorpusConfig, EvalSettings, IouHistogram, MatchCounts, SweepGrids};
use crate::geometry::OrientedBox3;
use crate::io::{self, FrameLabel, IoError};
use crate::licl::{self, FeatureGrid, LiclParams};
use crate::mbe::{self, MbeParams, QualityVerdict};
use crate::prelim::{surrogate_detect, ScoredLabel, SurrogateConfig};
use crate::scene::{Extent, SceneConfig, SceneFrame};

pub const THREADS_ENV: &str = "COOP_LABELS_THREADS";
pub const CONFIG_SNAPSHOT: &str = "config.resolved.toml";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("validation failed: {0}")]
    Validation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Validation(_) => 4,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiclCheckConfig {
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub max_pos: usize,
    pub max_neg: usize,
}

impl Default for LiclCheckConfig {
    fn default() -> Self {
        Self { instances: 50, step: 1e-5, tolerance: 1e-4, width: 8, height: 8, channels: 8, max_pos: 4, max_neg: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiclSection {
    #[serde(flatten)]
    pub params: LiclParams,
    pub check: LiclCheckConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seed of the frame corpus.
    pub seed: u64,
    pub frames: usize,
    pub scene: SceneConfig,
    pub surrogate: SurrogateConfig,
    pub mbe: MbeParams,
    pub licl: LiclSection,
    pub eval: EvalSettings,
    pub sweep: SweepGrids,
    pub paths: PathsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let corpus = CorpusConfig::default();
        Self {
            seed: corpus.seed,
            frames: corpus.n_frames,
            scene: SceneConfig::default(),
            surrogate: SurrogateConfig::default(),
            mbe: MbeParams::default(),
            licl: LiclSection::default(),
            eval: EvalSettings::default(),
            sweep: SweepGrids::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn corpus(&self) -> CorpusConfig {
        CorpusConfig { n_frames: self.frames, seed: self.seed }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        self.scene.validate().map_err(|e| cfg(&e))?;
        self.surrogate.validate().map_err(|e| cfg(&e))?;
        self.mbe.validate().map_err(|e| cfg(&e))?;
        self.licl.params.validate().map_err(|e| cfg(&e))?;
        if self.frames == 0 {
            return Err(CliError::Config("frames must be >= 1".into()));
        }
        let t = self.eval.iou_threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(CliError::Config(format!("eval.iou_threshold must lie in (0, 1), got {t}")));
        }
        if self.eval.histogram_bins == 0 {
            return Err(CliError::Config("eval.histogram_bins must be >= 1".into()));
        }
        if self.sweep.sigma.iter().any(|s| !(0.0..=2.0).contains(s)) {
            return Err(CliError::Config("sweep.sigma values must lie in [0, 2]".into()));
        }
        if self.sweep.noise_seeds == 0 {
            return Err(CliError::Config("sweep.noise_seeds must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Loads `path` (or defaults) and applies `section.key=value` overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<PipelineConfig, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            text.parse::<toml::Table>().map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| CliError::Config(format!("override '{o}' is not of the form section.key=value")))?;
        let parts: Vec<&str> = key.trim().split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(CliError::Config(format!("bad override key '{key}'")));
        }
        let mut cur = &mut table;
        for p in &parts[..parts.len() - 1] {
            let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cur = entry.as_table_mut().ok_or_else(|| CliError::Config(format!("override '{key}': '{p}' is not a section")))?;
        }
        cur.insert(parts[parts.len() - 1].to_string(), parse_override_value(raw.trim()));
    }
    let cfg: PipelineConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn snapshot(dir: &Path, cfg: &PipelineConfig) -> Result<(), CliError> {
    io::write_atomic(&dir.join(CONFIG_SNAPSHOT), cfg.to_toml().as_bytes())?;
    Ok(())
}

fn parent_dir(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn write_text(path: &Path, s: &str) -> Result<(), CliError> {
    io::write_atomic(path, s.as_bytes()).map_err(CliError::from)
}

fn pretty_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

fn scene_err(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

pub fn cmd_gen(cfg: &PipelineConfig, out: &Path) -> Result<Vec<SceneFrame>, CliError> {
    let frames = eval::generate_frames(&cfg.scene, &cfg.corpus()).map_err(scene_err)?;
    io::write_scene(out, &frames)?;
    snapshot(&parent_dir(out), cfg)?;
    Ok(frames)
}

pub fn cmd_prelim(cfg: &PipelineConfig, scene: &Path, out: &Path) -> Result<Vec<FrameLabel>, CliError> {
    let frames = io::read_scene(scene)?;
    let labels: Vec<Vec<ScoredLabel>> = frames.iter().map(|f| surrogate_detect(f, &cfg.surrogate)).collect();
    let rows = io::flatten_labels(&frames, &labels);
    write_text(out, &io::labels_to_csv(&rows))?;
    snapshot(&parent_dir(out), cfg)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameVerdicts {
    pub frame_id: u64,
    pub verdicts: Vec<QualityVerdict>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub labels: usize,
    pub high: usize,
    pub low: usize,
}

fn load_corpus(scene: &Path, labels: &Path) -> Result<Corpus, CliError> {
    let frames = io::read_scene(scene)?;
    let rows = io::read_labels(labels)?;
    let grouped = io::group_labels(&frames, &rows, labels)?;
    Ok(Corpus { frames, labels: grouped })
}

/// Writes `high.csv`, `low.csv` and `verdicts.json` into `out_dir`.
pub fn cmd_filter(cfg: &PipelineConfig, scene: &Path, labels: &Path, out_dir: &Path) -> Result<FilterSummary, CliError> {
    let corpus = load_corpus(scene, labels)?;
    let verdicts = eval::filter_corpus(&corpus.frames, &corpus.labels, &cfg.mbe);
    let (mut high, mut low) = (Vec::new(), Vec::new());
    let mut dump = Vec::new();
    for ((f, l), v) in corpus.frames.iter().zip(&corpus.labels).zip(verdicts) {
        let out = mbe::partition(l, v);
        high.extend(out.high.iter().map(|label| FrameLabel { frame_id: f.frame_id, label: *label }));
        low.extend(out.low.iter().map(|label| FrameLabel { frame_id: f.frame_id, label: *label }));
        dump.push(FrameVerdicts { frame_id: f.frame_id, verdicts: out.verdicts });
    }
    write_text(&out_dir.join("high.csv"), &io::labels_to_csv(&high))?;
    write_text(&out_dir.join("low.csv"), &io::labels_to_csv(&low))?;
    write_text(&out_dir.join("verdicts.json"), &pretty_json(&dump))?;
    snapshot(out_dir, cfg)?;
    Ok(FilterSummary { labels: high.len() + low.len(), high: high.len(), low: low.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub mode: eval::IouMode,
    pub frames: usize,
    pub labels: usize,
    pub recall: f64,
    pub precision: f64,
    #[serde(flatten)]
    pub counts: MatchCounts,
    pub histogram: IouHistogram,
}

/// Writes `report.json`, `report.csv` and `histogram.csv` into `out_dir`.
pub fn cmd_eval(cfg: &PipelineConfig, scene: &Path, labels: &Path, out_dir: &Path) -> Result<EvalReport, CliError> {
    let corpus = load_corpus(scene, labels)?;
    let counts = eval::pooled_counts(&corpus.frames, corpus.labels.iter().map(|v| v.as_slice()), &cfg.eval);
    let mut hist: Option<IouHistogram> = None;
    for (f, l) in corpus.frames.iter().zip(&corpus.labels) {
        let h = eval::iou_histogram(l, &f.gt_boxes, cfg.eval.histogram_bins, cfg.eval.mode);
        match hist.as_mut() {
            Some(acc) => acc.merge(&h),
            None => hist = Some(h),
        }
    }
    let histogram = hist.unwrap_or_else(|| eval::iou_histogram(&[], &[], cfg.eval.histogram_bins, cfg.eval.mode));
    let report = EvalReport {
        iou_threshold: cfg.eval.iou_threshold,
        mode: cfg.eval.mode,
        frames: corpus.frames.len(),
        labels: corpus.labels.iter().map(Vec::len).sum(),
        recall: counts.recall(),
        precision: counts.precision(),
        counts,
        histogram,
    };
    let csv = format!(
        "iou_threshold,recall,precision,tp,fp,fn\n{},{},{},{},{},{}\n",
        eval::fmt_sig(report.iou_threshold, 6),
        eval::fmt_sig(report.recall, 6),
        eval::fmt_sig(report.precision, 6),
        counts.tp,
        counts.fp,
        counts.fn_
    );
    write_text(&out_dir.join("report.json"), &pretty_json(&report))?;
    write_text(&out_dir.join("report.csv"), &csv)?;
    write_text(&out_dir.join("histogram.csv"), &io::histogram_csv(&report.histogram))?;
    snapshot(out_dir, cfg)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Phi,
    Eta,
    Noise,
    Delta,
}

impl SweepKind {
    pub fn name(&self) -> &'static str {
        match self {
            SweepKind::Phi => "phi",
            SweepKind::Eta => "eta",
            SweepKind::Noise => "noise",
            SweepKind::Delta => "delta",
        }
    }
}

/// Builds the corpus from config, or loads it when both files are given.
pub fn corpus_for(cfg: &PipelineConfig, scene: Option<&Path>, labels: Option<&Path>) -> Result<Corpus, CliError> {
    match (scene, labels) {
        (Some(s), Some(l)) => load_corpus(s, l),
        (None, None) => eval::build_corpus(&cfg.scene, &cfg.surrogate, &cfg.corpus()).map_err(scene_err),
        _ => Err(CliError::Config("--scene and --labels must be given together".into())),
    }
}

/// Runs one sweep and returns the paths written.
pub fn cmd_sweep(cfg: &PipelineConfig, kind: SweepKind, corpus: &Corpus, out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let g = &cfg.sweep;
    let mut written = Vec::new();
    let mut emit = |name: &str, text: String| -> Result<(), CliError> {
        let p = out_dir.join(name);
        write_text(&p, &text)?;
        written.push(p);
        Ok(())
    };
    match kind {
        SweepKind::Phi => {
            let r = eval::sweep_mbe(corpus, &g.phi_r, &[], &[], &cfg.mbe, &cfg.eval);
            emit("sweep_phi_r.csv", r.to_csv())?;
            let r = eval::sweep_mbe(corpus, &[], &g.phi_o, &[], &cfg.mbe, &cfg.eval);
            emit("sweep_phi_o.csv", r.to_csv())?;
        }
        SweepKind::Eta => {
            let r = eval::sweep_mbe(corpus, &[], &[], &g.eta, &cfg.mbe, &cfg.eval);
            emit("sweep_eta.csv", r.to_csv())?;
        }
        SweepKind::Noise => {
            let r = eval::sweep_noise(corpus, &g.sigma, g.noise_seeds, g, &cfg.mbe, &cfg.eval);
            emit("sweep_noise.csv", r.to_csv())?;
            emit("sweep_noise_summary.csv", r.summary_csv())?;
        }
        SweepKind::Delta => {
            let r = eval::sweep_delta(corpus, &g.delta, &cfg.mbe, &cfg.eval);
            emit("sweep_delta.csv", r.to_csv())?;
        }
    }
    snapshot(out_dir, cfg)?;
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiclCheckReport {
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub untouched_nonzero: usize,
    pub passed: bool,
}

/// Random grid with `pos`/`neg` boxes at random cell centers.
pub fn random_licl_instance(rng: &mut ChaCha8Rng, c: &LiclCheckConfig) -> (FeatureGrid, Vec<OrientedBox3>, Vec<OrientedBox3>) {
    let extent = Extent::new(-40.0, 40.0, -40.0, 40.0);
    let values = (0..c.width * c.height * c.channels).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grid = FeatureGrid::new(c.width, c.height, c.channels, values, extent).expect("valid random grid");
    let at = |rng: &mut ChaCha8Rng| {
        let ix = rng.random_range(0..c.width);
        let iy = rng.random_range(0..c.height);
        let x = extent.x_min + (ix as f64 + rng.random_range(0.05..0.95)) * (extent.x_max - extent.x_min) / c.width as f64;
        let y = extent.y_min + (iy as f64 + rng.random_range(0.05..0.95)) * (extent.y_max - extent.y_min) / c.height as f64;
        OrientedBox3::new(x, y, 0.8, 4.5, 1.9, 1.6, rng.random_range(-3.0..3.0)).expect("valid box")
    };
    let m = rng.random_range(1..=c.max_pos.max(1));
    let n = rng.random_range(1..=c.max_neg.max(1));
    let pos = (0..m).map(|_| at(rng)).collect();
    let neg = (0..n).map(|_| at(rng)).collect();
    (grid, pos, neg)
}

/// Largest relative error between the analytic gradient and central
/// differences, and the number of nonzero entries outside indexed cells.
pub fn gradient_check(grid: &FeatureGrid, pos: &[OrientedBox3], neg: &[OrientedBox3], params: &LiclParams, h: f64) -> Result<(f64, usize), licl::LiclError> {
    let g = licl::licl_grad(grid, pos, neg, params)?;
    let mut cells = Vec::new();
    for b in pos.iter().chain(neg) {
        cells.push(licl::grid_index(b, grid)?);
    }
    let mut worst: f64 = 0.0;
    let mut stray = 0;
    let mut probe = grid.clone();
    for iy in 0..grid.height() {
        for ix in 0..grid.width() {
            let touched = cells.contains(&(ix, iy));
            for c in 0..grid.channels() {
                let o = grid.offset(ix, iy, c);
                let analytic = g.values()[o];
                if !touched {
                    stray += usize::from(analytic != 0.0);
                    continue;
                }
                let base = grid.values()[o];
                probe.values_mut()[o] = base + h;
                let up = licl::licl_loss(&probe, pos, neg, params)?;
                probe.values_mut()[o] = base - h;
                let dn = licl::licl_loss(&probe, pos, neg, params)?;
                probe.values_mut()[o] = base;
                let fd = (up - dn) / (2.0 * h);
                let err = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0);
                worst = worst.max(err);
            }
        }
    }
    Ok((worst, stray))
}

pub fn cmd_licl_check(cfg: &PipelineConfig, out: &Path) -> Result<LiclCheckReport, CliError> {
    let c = &cfg.licl.check;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::rng::derive_seed(cfg.seed, &[crate::rng::TAG_LICL]));
    let mut worst: f64 = 0.0;
    let mut stray = 0;
    for _ in 0..c.instances {
        let (grid, pos, neg) = random_licl_instance(&mut rng, c);
        let (e, s) = gradient_check(&grid, &pos, &neg, &cfg.licl.params, c.step).map_err(|e| CliError::Validation(e.to_string()))?;
        worst = worst.max(e);
        stray += s;
    }
    let report = LiclCheckReport {
        instances: c.instances,
        step: c.step,
        tolerance: c.tolerance,
        max_rel_error: worst,
        untouched_nonzero: stray,
        passed: worst < c.tolerance && stray == 0,
    };
    write_text(out, &pretty_json(&report))?;
    snapshot(&parent_dir(out), cfg)?;
    Ok(report)
}

/// Applies the thread-count override from the environment, if set.
pub fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().map_err(|_| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
        if n == 0 {
            return Err(CliError::Config(format!("{THREADS_ENV} must be >= 1")));
        }
        // a pool may already exist when called twice in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}
