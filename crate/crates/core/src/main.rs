use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use certpose::experiments::{
    cmd_centroid_robustness, cmd_certify, cmd_corrector_analysis, cmd_corrector_robustness,
    cmd_gen_scenes, cmd_selftrain, CommandReport, HarnessConfig,
};
use certpose::Result;

/// Outlier-robust 6D object pose estimation: robust corrector,
/// observable-correctness certificates, and certificate-gated ensemble
/// self-training on synthetic scenes.
#[derive(Parser)]
#[command(name = "certpose", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed for every random draw in the command.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for CSV, JSON, SVG and checkpoint files.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads for the trial pool (0 = all cores). Outputs are
    /// identical at any worker count.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Run at reduced scale and assert the experiment's thresholds;
    /// exits 1 when a threshold fails.
    #[arg(long)]
    check: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Keypoint-noise sweep: corrected vs. uncorrected registration on
    /// clean scenes (normalized ADD-S and certificate fractions per σ).
    CorrectorAnalysis {
        #[command(flatten)]
        common: Common,
        /// Trials per grid point.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Outlier-rate sweep comparing robust, non-robust and no corrector at
    /// fixed keypoint noise.
    CorrectorRobustness {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Robust centroid vs. plain mean, and FPS vs. score-based pooling, on
    /// an inlier-ball / outlier-box construction.
    CentroidRobustness {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Pre-train an ensemble on the sim domain and self-train it on a
    /// shifted domain, logging certificate fractions per iteration.
    Selftrain {
        #[command(flatten)]
        common: Common,
        /// Self-training iterations.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Certify one stored scene against a pose JSON file
    /// ({"rotation": [[...]x3], "translation": [...]}); prints the
    /// certificate record to stdout.
    Certify {
        /// TOML configuration file (model and thresholds).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scene dataset directory written by gen-scenes.
        #[arg(long)]
        scene: PathBuf,
        /// Scene index within the dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Pose JSON file.
        #[arg(long)]
        pose: PathBuf,
        /// Optional directory for certificate.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a labeled synthetic scene dataset.
    GenScenes {
        #[command(flatten)]
        common: Common,
        /// Number of scenes.
        #[arg(long, default_value_t = 32)]
        count: usize,
    },
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<HarnessConfig> {
    let mut cfg = match path {
        Some(p) => HarnessConfig::from_toml_file(p)?,
        None => HarnessConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn with_pool<T>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T>
where
    T: Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| certpose::Error::InvalidInput(format!("worker pool: {e}")))?;
    pool.install(f)
}

fn finish(report: CommandReport, check: bool) -> ExitCode {
    for (what, ok) in &report.checks {
        println!("[{}] {what}", if *ok { "PASS" } else { "FAIL" });
    }
    println!("outputs written to {}", report.out_dir.display());
    if check && !report.passed() {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

fn run() -> Result<ExitCode> {
    let cli = Cli::parse();
    Ok(match cli.command {
        Command::CorrectorAnalysis { common, trials } => {
            let mut cfg = load_config(&common.config, common.seed)?;
            if let Some(t) = trials {
                cfg.corrector_analysis.trials = t;
            }
            let report = with_pool(common.workers, || {
                cmd_corrector_analysis(&cfg, &common.out, common.check)
            })?;
            finish(report, common.check)
        }
        Command::CorrectorRobustness { common, trials } => {
            let mut cfg = load_config(&common.config, common.seed)?;
            if let Some(t) = trials {
                cfg.corrector_robustness.trials = t;
            }
            let report = with_pool(common.workers, || {
                cmd_corrector_robustness(&cfg, &common.out, common.check)
            })?;
            finish(report, common.check)
        }
        Command::CentroidRobustness { common, trials } => {
            let mut cfg = load_config(&common.config, common.seed)?;
            if let Some(t) = trials {
                cfg.centroid_robustness.trials = t;
            }
            let report = with_pool(common.workers, || {
                cmd_centroid_robustness(&cfg, &common.out, common.check)
            })?;
            finish(report, common.check)
        }
        Command::Selftrain { common, iterations } => {
            let mut cfg = load_config(&common.config, common.seed)?;
            if let Some(it) = iterations {
                cfg.selftrain.iterations = it;
            }
            let report = with_pool(common.workers, || {
                cmd_selftrain(&cfg, &common.out, common.check)
            })?;
            finish(report, common.check)
        }
        Command::Certify {
            config,
            scene,
            index,
            pose,
            out,
        } => {
            let cfg = load_config(&config, None)?;
            let result = cmd_certify(&cfg, &scene, index, &pose, out.as_deref())?;
            println!("{}", serde_json::to_string(&result)?);
            ExitCode::SUCCESS
        }
        Command::GenScenes { common, count } => {
            let cfg = load_config(&common.config, common.seed)?;
            let report = with_pool(common.workers, || cmd_gen_scenes(&cfg, count, &common.out))?;
            finish(report, false)
        }
    })
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
