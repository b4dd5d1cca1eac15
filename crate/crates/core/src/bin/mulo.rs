use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use mulo::baselines::{grid_search, GridSpec};
use mulo::coordcheck::{run_coordcheck, write_records, CoordCheckConfig};
use mulo::harness::{adam_objective, write_curves_csv, CurveSet, EvalConfig, EvalTask, SweepSpec};
use mulo::lo::read_checkpoint;
use mulo::optimizee::SyntheticConfig;
use mulo::parametrization::ParamMode;
use mulo::pes::{read_snapshot, MetaTrainConfig, MetaTrainer};
use mulo::{Error, Result};

#[derive(Parser)]
#[command(name = "mulo", version, about = "Meta-train and evaluate learned optimizers under SP and µP")]
struct Cli {
    /// Worker threads for parallel runs.
    #[arg(long, global = true, env = "MULO_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed (or seed list, which becomes this single seed).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train a learned optimizer with PES.
    MetaTrain {
        #[command(flatten)]
        common: Common,
        /// Continue from a snapshot written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train optimizees with the configured optimizers and write loss curves.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Expand a width/depth/horizon cross product and evaluate every cell.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Track pre-activation drift across widths.
    Coordcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Grid-search Adam or µAdam learning rate and multipliers.
    TuneAdam {
        #[command(flatten)]
        common: Common,
    },
    /// Write a synthetic Gaussian-mixture dataset.
    MakeDataset {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        input_dim: usize,
        #[arg(long)]
        num_classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        center_radius: Option<f64>,
        #[arg(long)]
        noise_std: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a summary of a φ checkpoint.
    InspectCheckpoint { path: PathBuf },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TuneConfig {
    task: EvalTask,
    mode: ParamMode,
    #[serde(default)]
    grid: GridSpec,
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn write_summary(sets: &[CurveSet], path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        task_id: &'a str,
        optimizer: &'a str,
        step: usize,
        mean: f64,
        se: Option<f64>,
        diverged: usize,
    }
    let mut wtr = csv::Writer::from_path(path)?;
    for set in sets {
        for s in set.summary() {
            wtr.serialize(Row {
                task_id: &set.task.id,
                optimizer: &set.optimizer,
                step: s.step,
                mean: s.mean,
                se: s.se,
                diverged: s.diverged,
            })?;
        }
    }
    wtr.flush()?;
    Ok(())
}

fn evaluate(cfg: EvalConfig, out_dir: &Path) -> Result<()> {
    let sets = cfg.run()?;
    fs::create_dir_all(out_dir)?;
    write_curves_csv(&sets, &out_dir.join("curves.csv"))?;
    write_summary(&sets, &out_dir.join("summary.csv"))?;
    for set in &sets {
        let finals = set.final_losses();
        let (mean, se) = mulo::harness::mean_se(&finals);
        eprintln!(
            "{:<24} {:<12} final loss {:.5} ± {:.5}  diverged {}/{}",
            set.task.id,
            set.optimizer,
            mean,
            se.unwrap_or(0.0),
            set.diverged_seeds(),
            set.curves.len()
        );
    }
    Ok(())
}

fn override_seeds(seeds: &mut Vec<u64>, seed: Option<u64>) {
    if let Some(s) = seed {
        *seeds = vec![s];
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Argument(format!("cannot start thread pool: {e}")))?;
    }
    match cli.command {
        Command::MetaTrain { common, resume } => {
            let mut cfg: MetaTrainConfig = read_config(&common.config)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let mut trainer = match resume {
                Some(path) => MetaTrainer::from_snapshot(cfg, read_snapshot(&path)?)?,
                None => MetaTrainer::new(cfg)?,
            };
            let total = trainer.config.schedule.total_steps;
            let every = (total / 20).max(1);
            let out = trainer.run(&common.out_dir, |row| {
                if row.outer_step % every == 0 || row.outer_step + 1 == total {
                    eprintln!(
                        "outer {:>6}  lr {:.2e}  loss {:.5}  |g| {:.3e}  diverged {}",
                        row.outer_step, row.lr, row.mean_inner_loss, row.grad_norm, row.diverged_pairs
                    );
                }
            })?;
            eprintln!("wrote {} and {}", out.checkpoint.display(), out.log.display());
        }
        Command::Evaluate { common } => {
            let mut cfg: EvalConfig = read_config(&common.config)?;
            for t in &mut cfg.tasks {
                override_seeds(&mut t.seeds, common.seed);
            }
            evaluate(cfg, &common.out_dir)?;
        }
        Command::Sweep { common } => {
            let mut spec: SweepSpec = read_config(&common.config)?;
            override_seeds(&mut spec.seeds, common.seed);
            evaluate(spec.expand()?, &common.out_dir)?;
        }
        Command::Coordcheck { common } => {
            let mut cfg: CoordCheckConfig = read_config(&common.config)?;
            override_seeds(&mut cfg.seeds, common.seed);
            let optimizers = cfg.resolve_optimizers()?;
            let ds = cfg.data.load()?;
            let records = run_coordcheck(&cfg, &ds, &optimizers)?;
            fs::create_dir_all(&common.out_dir)?;
            write_records(&records, fs::File::create(common.out_dir.join("coordcheck.csv"))?)?;
            for opt in &optimizers {
                for (layer, ratio) in mulo::coordcheck::width_ratios(&records, &opt.name) {
                    eprintln!("{:<16} layer {layer}: widest/narrowest max std = {ratio:.3}", opt.name);
                }
            }
        }
        Command::TuneAdam { common } => {
            let mut cfg: TuneConfig = read_config(&common.config)?;
            override_seeds(&mut cfg.task.seeds, common.seed);
            cfg.task.validate()?;
            let ds = cfg.task.data.load()?;
            let result =
                grid_search(&cfg.grid, &cfg.task.seeds, |c, seed| adam_objective(&cfg.task, &ds, cfg.mode, c, seed))?;
            fs::create_dir_all(&common.out_dir)?;
            result.write_csv(&common.out_dir.join("grid.csv"))?;
            let best = result.best();
            let hp = best.config.hyper();
            fs::write(common.out_dir.join("best.json"), serde_json::to_string_pretty(&hp)? + "\n")?;
            eprintln!(
                "best config {}: lr {} input {} output {} hidden-lr {} (mean final loss {:.5})",
                best.config.config_id,
                hp.lr,
                hp.multipliers.input_mult,
                hp.multipliers.output_mult,
                hp.multipliers.hidden_lr_mult,
                best.mean_loss
            );
        }
        Command::MakeDataset { n, input_dim, num_classes, seed, center_radius, noise_std, out } => {
            let mut cfg = SyntheticConfig::new(n, input_dim, num_classes, seed);
            if let Some(r) = center_radius {
                cfg.center_radius = r;
            }
            if let Some(s) = noise_std {
                cfg.noise_std = s;
            }
            cfg.generate()?.write(&out)?;
            eprintln!("wrote {n} examples to {}", out.display());
        }
        Command::InspectCheckpoint { path } => {
            let (phi, meta) = read_checkpoint(&path)?;
            let flat = phi.flatten();
            let summary = serde_json::json!({
                "dim": flat.len(),
                "l2_norm": mulo::tensor::l2_norm(&flat),
                "max_abs": flat.iter().fold(0.0f64, |a, x| a.max(x.abs())),
                "betas": phi.betas(),
                "meta": meta,
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
