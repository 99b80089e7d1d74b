use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use coop_labels::cli::{self, CliError, PipelineConfig, SweepKind};
use coop_labels::io;
use coop_labels::plot::{self, Table};

#[derive(Parser)]
#[command(name = "coop-labels", version, about = "Multi-agent LiDAR label generation, filtering and evaluation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set mbe.phi_r=0.05`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the resolved configuration.
    Config,
    /// Generate the synthetic scene corpus.
    Gen {
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run the detector surrogate over a scene file.
    Prelim {
        #[arg(long)]
        scene: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Split labels into high and low quality.
    Filter {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Recall, precision and IoU histogram of a label file.
    Eval {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Parameter and noise sweeps.
    Sweep {
        kind: Kind,
        /// Use this scene instead of generating one (needs --labels).
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Finite-difference check of the contrastive-loss gradient.
    LiclCheck {
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Render a CSV table as an SVG chart.
    Plot {
        csv: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// X column; defaults to `value`, `sigma`, or a histogram.
        #[arg(long)]
        x: Option<String>,
        /// Y columns, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "recall,precision")]
        y: Vec<String>,
        /// Column that splits rows into series.
        #[arg(long)]
        group: Option<String>,
        #[arg(long, default_value = "")]
        title: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Phi,
    Eta,
    Noise,
    Delta,
}

impl From<Kind> for SweepKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Phi => SweepKind::Phi,
            Kind::Eta => SweepKind::Eta,
            Kind::Noise => SweepKind::Noise,
            Kind::Delta => SweepKind::Delta,
        }
    }
}

fn out_or(cfg: &PipelineConfig, given: Option<PathBuf>, default: &str) -> PathBuf {
    given.unwrap_or_else(|| cfg.paths.out_dir.join(default))
}

fn plot_cmd(csv: &Path, out: &Path, x: Option<String>, y: &[String], group: Option<String>, title: &str) -> Result<(), CliError> {
    let text = io::read_text(csv)?;
    let t = Table::parse(&text).map_err(|e| CliError::Validation(format!("{}: {e}", csv.display())))?;
    let svg = if x.is_none() && t.header.iter().any(|h| h == "bin_lo") {
        plot::histogram_chart(&t, title)
    } else {
        let x = x.unwrap_or_else(|| if t.header.iter().any(|h| h == "sigma") { "sigma".into() } else { "value".into() });
        let group = group.or_else(|| t.header.iter().any(|h| h == "param").then(|| "param".to_string()));
        let ys: Vec<&str> = y.iter().map(String::as_str).collect();
        plot::line_chart(&t, &x, &ys, group.as_deref(), title)
    }
    .map_err(|e| CliError::Validation(format!("{}: {e}", csv.display())))?;
    io::write_atomic(out, svg.as_bytes())?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    cli::init_threads()?;
    let cfg = cli::load_config(cli.common.config.as_deref(), &cli.common.overrides)?;
    match cli.cmd {
        Cmd::Config => print!("{}", cfg.to_toml()),
        Cmd::Gen { out } => {
            let out = out_or(&cfg, out, "scene.jsonl");
            let frames = cli::cmd_gen(&cfg, &out)?;
            println!("wrote {} frames to {}", frames.len(), out.display());
        }
        Cmd::Prelim { scene, out } => {
            let out = out_or(&cfg, out, "labels.csv");
            let rows = cli::cmd_prelim(&cfg, &scene, &out)?;
            println!("wrote {} labels to {}", rows.len(), out.display());
        }
        Cmd::Filter { scene, labels, out_dir } => {
            let dir = out_dir.unwrap_or_else(|| cfg.paths.out_dir.join("filter"));
            let s = cli::cmd_filter(&cfg, &scene, &labels, &dir)?;
            println!("{} labels: {} high, {} low -> {}", s.labels, s.high, s.low, dir.display());
        }
        Cmd::Eval { scene, labels, out_dir } => {
            let dir = out_dir.unwrap_or_else(|| cfg.paths.out_dir.join("eval"));
            let r = cli::cmd_eval(&cfg, &scene, &labels, &dir)?;
            println!(
                "recall {} precision {} (tp {} fp {} fn {}) -> {}",
                coop_labels::eval::fmt_sig(r.recall, 6),
                coop_labels::eval::fmt_sig(r.precision, 6),
                r.counts.tp,
                r.counts.fp,
                r.counts.fn_,
                dir.display()
            );
        }
        Cmd::Sweep { kind, scene, labels, out_dir } => {
            let kind = SweepKind::from(kind);
            let dir = out_dir.unwrap_or_else(|| cfg.paths.out_dir.join("sweep"));
            let corpus = cli::corpus_for(&cfg, scene.as_deref(), labels.as_deref())?;
            for p in cli::cmd_sweep(&cfg, kind, &corpus, &dir)? {
                println!("wrote {}", p.display());
            }
        }
        Cmd::LiclCheck { out } => {
            let out = out_or(&cfg, out, "licl_check.json");
            let r = cli::cmd_licl_check(&cfg, &out)?;
            println!("max relative error {:e} over {} instances", r.max_rel_error, r.instances);
            if !r.passed {
                return Err(CliError::Validation(format!(
                    "gradient check failed: max relative error {:e} (tolerance {:e}), {} nonzero entries outside indexed cells",
                    r.max_rel_error, r.tolerance, r.untouched_nonzero
                )));
            }
        }
        Cmd::Plot { csv, out, x, y, group, title } => plot_cmd(&csv, &out, x, &y, group, &title)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("coop-labels: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
