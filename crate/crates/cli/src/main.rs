use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use multispeed::harness::{
    self, curve_to_csv, fmt_f64, CurveConfig, Estimator, ExperimentConfig, ScoreSourceKind,
};
use multispeed::network::Checkpoint;
use multispeed::schedules::VsSchedule;

#[derive(Parser)]
#[command(name = "multispeed", about = "Conditional score-based diffusion at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the config's estimator: dse, cde, cdiffe, cmde or vs-cmde.
    #[arg(long, global = true)]
    estimator: Option<String>,
    /// Overrides the condition's maximum noise scale.
    #[arg(long = "sigma-y-max", global = true)]
    sigma_y_max: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the datasets, train, and write checkpoint.bin.
    Train,
    /// Draw reconstructions for the held-out set into samples.csv.
    Sample,
    /// Score the held-out set into metrics.csv.
    Evaluate,
    /// Error of the diffused-condition score against the clean one.
    #[command(name = "theorem3-curve")]
    Theorem3Curve,
    /// Condition speed over training for VS-CMDE.
    Schedule,
    /// Train and evaluate in one go.
    Run,
}

fn experiment_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_ref().context("--config is required for this command")?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = ExperimentConfig::parse_unvalidated(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(e) = &cli.estimator {
        cfg.estimator = Estimator::parse(e)?;
    }
    if let Some(s) = cli.sigma_y_max {
        cfg.mspec.sigma_y_max = Some(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_checkpoint(cfg: &ExperimentConfig, out: &Path) -> Result<Option<Checkpoint>> {
    if cfg.score_source == ScoreSourceKind::Oracle {
        return Ok(None);
    }
    let path = out.join("checkpoint.bin");
    let ckpt = Checkpoint::load(&path)
        .with_context(|| format!("loading {} (run `train` first)", path.display()))?;
    Ok(Some(ckpt))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    std::fs::create_dir_all(&cli.out)?;
    match cli.command {
        Command::Train => {
            let cfg = experiment_config(&cli)?;
            if cfg.score_source == ScoreSourceKind::Oracle {
                bail!("score_source = \"oracle\" has nothing to train");
            }
            let (train_set, eval_set) = harness::datasets(&cfg)?;
            train_set.save(&cli.out.join("train.dataset"))?;
            eval_set.save(&cli.out.join("eval.dataset"))?;
            let model = harness::train(&cfg, &train_set)?;
            model.checkpoint.save(&cli.out.join("checkpoint.bin"))?;
            log::info!(
                "final loss {}",
                model.losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Sample => {
            let cfg = experiment_config(&cli)?;
            let ckpt = load_checkpoint(&cfg, &cli.out)?;
            let source = harness::score_source(&cfg, ckpt.as_ref())?;
            let (_, eval_set) = harness::datasets(&cfg)?;
            let recs = harness::reconstruct(&cfg, source.as_ref(), &eval_set)?;
            let k = cfg.k_reconstructions;
            let mut text = String::from("observation,reconstruction");
            for j in 0..recs.ncols() {
                text.push_str(&format!(",x{j}"));
            }
            text.push('\n');
            for (r, row) in recs.outer_iter().enumerate() {
                text.push_str(&format!("{},{}", r / k, r % k));
                for v in row {
                    text.push(',');
                    text.push_str(&fmt_f64(*v));
                }
                text.push('\n');
            }
            std::fs::write(cli.out.join("samples.csv"), text)?;
        }
        Command::Evaluate => {
            let cfg = experiment_config(&cli)?;
            let ckpt = load_checkpoint(&cfg, &cli.out)?;
            let source = harness::score_source(&cfg, ckpt.as_ref())?;
            let (_, eval_set) = harness::datasets(&cfg)?;
            let report = harness::evaluate(&cfg, source.as_ref(), &eval_set)?;
            report.write_csv(&cli.out.join("metrics.csv"))?;
            print!("{}", report.to_csv());
        }
        Command::Theorem3Curve => {
            let mut cfg = match &cli.config {
                Some(p) => CurveConfig::from_toml(&std::fs::read_to_string(p)?)?,
                None => CurveConfig::default(),
            };
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let csv = curve_to_csv(&cfg.run()?);
            std::fs::write(cli.out.join("theorem3.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Schedule => {
            let schedule = match &cli.config {
                Some(_) => {
                    let mut cfg = experiment_config(&cli)?;
                    cfg.estimator = Estimator::VsCmde;
                    cfg.vs_schedule()?.context("config has no schedule")?
                }
                None => VsSchedule::new(125_000, 50.0, cli.sigma_y_max.unwrap_or(1.0))?,
            };
            let m = schedule.iterations;
            let mut csv = String::from("iteration,sigma_max\n");
            let mut points: Vec<usize> = (0..=100).map(|i| i * m / 100).collect();
            points.dedup();
            for n in points {
                csv.push_str(&format!("{n},{}\n", fmt_f64(schedule.sigma_max_at(n))));
            }
            std::fs::write(cli.out.join("schedule.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Run => {
            let cfg = experiment_config(&cli)?;
            let outcome = harness::run_to_dir(&cfg, &cli.out)?;
            print!("{}", outcome.report.to_csv());
            for note in &outcome.report.notes {
                log::info!("note: {note}");
            }
        }
    }
    Ok(())
}
