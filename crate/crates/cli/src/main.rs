use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use oelab_core::checkpoint::Checkpoint;
use oelab_core::config::RunConfig;
use oelab_core::datagen::TaskKind;
use oelab_core::evalkit::{self, EvalPlan, ProbeConfig, DEFAULT_PT_GRID};
use oelab_core::model::{Model, Preset};
use oelab_core::train::{self, FinetuneConfig, Recipe};

#[derive(Parser, Debug)]
#[command(name = "oelab", version, about = "Masked-latent pretraining on synthetic multimodal scenes")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace the config's seed.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Replace the config's size preset.
    #[arg(long, global = true)]
    preset: Option<Preset>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain from scratch; writes metrics.jsonl and checkpoints.
    Pretrain,
    /// Probe a frozen encoder on a synthetic task.
    Eval {
        #[arg(long, required_unless_present = "random")]
        checkpoint: Option<PathBuf>,
        /// Use freshly initialized weights from --config instead of a checkpoint.
        #[arg(long)]
        random: bool,
        #[arg(long)]
        task: TaskKind,
        /// Probe sweep configuration (JSON); defaults to the task's standard sweep.
        #[arg(long)]
        probe: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 1234)]
        data_seed: u64,
    },
    /// Supervised finetuning of a pretrained encoder plus a linear head.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: TaskKind,
        #[arg(long, default_value = "FrozenStart")]
        recipe: Recipe,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 1234)]
        data_seed: u64,
    },
    /// Pretrain + probe each ablation row.
    Ablate {
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, value_delimiter = ',', default_value = "SceneClass,PatchSeg,TemporalClass")]
        tasks: Vec<TaskKind>,
        /// Run the full probe sweep per task instead of a single cell.
        #[arg(long)]
        sweep: bool,
    },
    /// Pretrain + probe at each time-masking probability.
    SweepPt {
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, value_delimiter = ',', default_value = "SceneClass,PatchSeg,TemporalClass")]
        tasks: Vec<TaskKind>,
    },
    /// Time strided-convolution vs reshape+affine patch embedding.
    Bench {
        #[arg(long, default_value_t = 12)]
        channels: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 8)]
        patch: usize,
        #[arg(long, default_value_t = 128)]
        dim: usize,
        #[arg(long, default_value_t = 10)]
        reps: usize,
    },
    /// Finite-difference checks of every op and the two-view loss.
    Gradcheck,
    /// Paired linear vs nonlinear projection runs with grad-norm curves.
    GradNorms,
}

/// Bad invocation or configuration; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let path = cli.config.as_deref().ok_or_else(|| usage("this command needs --config <PATH>"))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed_override {
        cfg.seed = seed;
    }
    if let Some(p) = cli.preset {
        cfg.preset = p;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, fallback: &Path) -> anyhow::Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| fallback.to_path_buf());
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_model(cli: &Cli, checkpoint: Option<&Path>, random: bool) -> anyhow::Result<(Model<f32>, RunConfig)> {
    if random {
        let cfg = load_config(cli)?;
        let model = Model::new(cfg.model_config(), cfg.data.registry()?, cfg.seed)?;
        return Ok((model, cfg));
    }
    let path = checkpoint.ok_or_else(|| usage("--checkpoint is required"))?;
    let ckpt = Checkpoint::load(path)?;
    let (model, ckpt_cfg) = train::model_from_checkpoint(&ckpt)?;
    if cli.config.is_some() {
        let cfg = load_config(cli)?;
        let (a, b) = (cfg.model_config(), ckpt_cfg.model_config());
        if a.scheme != b.scheme || a.patch_size != b.patch_size {
            return Err(usage(format!(
                "checkpoint {} was trained with {:?} / patch {}, config asks for {:?} / patch {}",
                path.display(),
                b.scheme,
                b.patch_size,
                a.scheme,
                a.patch_size
            )));
        }
    }
    Ok((model, ckpt_cfg))
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Pretrain => {
            let cfg = load_config(cli)?;
            let dir = out_dir(cli, &cfg.output_dir)?;
            write(&dir.join("config.json"), &cfg.to_json())?;
            let run = train::pretrain(&cfg, Some(&dir))?;
            if let (Some(first), Some(last)) = (run.metrics.first(), run.metrics.last()) {
                println!(
                    "{} steps: loss {:.4} -> {:.4} (smoothed {:.4} -> {:.4})",
                    run.metrics.len(),
                    first.loss_total,
                    last.loss_total,
                    evalkit::smoothed_initial_loss(&run.metrics),
                    evalkit::smoothed_final_loss(&run.metrics)
                );
            }
            for p in &run.checkpoints {
                println!("checkpoint {}", p.display());
            }
        }
        Command::Eval { checkpoint, random, task, probe, samples, data_seed } => {
            let (model, cfg) = load_model(cli, checkpoint.as_deref(), *random)?;
            let probe = match probe {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).map_err(|e| usage(format!("{}: {e}", p.display())))?,
                None => ProbeConfig::for_task(*task),
            };
            let ds = evalkit::task_dataset(&cfg, *task, *samples, *data_seed)?;
            let report = evalkit::probe_sweep(&model, &ds, &probe, *data_seed)?;
            let fallback = checkpoint.as_deref().and_then(Path::parent).map_or_else(|| cfg.output_dir.clone(), Path::to_path_buf);
            let dir = out_dir(cli, &fallback)?;
            let doc = serde_json::json!({
                "checkpoint": checkpoint,
                "random_init": random,
                "samples": samples,
                "probe": probe,
                "report": report,
            });
            println!("{} {}: best cell {} -> test {:.4}", task.name(), report.metric.name(), report.best, report.test);
            write(&dir.join(format!("eval_{}.json", task.name())), &serde_json::to_string_pretty(&doc)?)?;
        }
        Command::Finetune { checkpoint, task, recipe, epochs, lr, batch_size, samples, data_seed } => {
            let (model, cfg) = load_model(cli, Some(checkpoint), false)?;
            let ds = evalkit::task_dataset(&cfg, *task, *samples, *data_seed)?;
            let ft = FinetuneConfig { epochs: *epochs, base_lr: *lr, batch_size: *batch_size, seed: *data_seed };
            let report = train::finetune(&model, &ds, *recipe, &ft)?;
            let dir = out_dir(cli, checkpoint.parent().unwrap_or(Path::new(".")))?;
            println!("{} {:?}: best val {:.4} at epoch {:?}, test {:.4}", task.name(), recipe, report.best_val, report.best_epoch, report.test_at_best);
            write(&dir.join(format!("finetune_{}_{recipe:?}.json", task.name())), &serde_json::to_string_pretty(&report)?)?;
        }
        Command::Ablate { samples, tasks, sweep } => {
            let cfg = load_config(cli)?;
            let plan = EvalPlan { tasks: tasks.clone(), samples: *samples, seed: cfg.seed, sweep: *sweep };
            let report = evalkit::run_ablation_suite(&cfg, &evalkit::table3_rows(), &plan)?;
            let dir = out_dir(cli, &cfg.output_dir)?;
            print!("{}", report.to_table());
            write(&dir.join("ablation.json"), &serde_json::to_string_pretty(&report)?)?;
            write(&dir.join("ablation.md"), &report.to_table())?;
        }
        Command::SweepPt { values, samples, tasks } => {
            let cfg = load_config(cli)?;
            let values = values.clone().unwrap_or_else(|| DEFAULT_PT_GRID.to_vec());
            let plan = EvalPlan { tasks: tasks.clone(), samples: *samples, seed: cfg.seed, sweep: false };
            let rows = evalkit::sweep_pt(&values, &cfg, &plan)?;
            let dir = out_dir(cli, &cfg.output_dir)?;
            let csv = evalkit::sweep_csv(&rows);
            print!("{csv}");
            write(&dir.join("sweep_pt.csv"), &csv)?;
        }
        Command::Bench { channels, size, patch, dim, reps } => {
            if *reps < 10 {
                return Err(usage(format!("--reps must be at least 10, got {reps}")));
            }
            let report = evalkit::bench_patch_embed(*channels, (*size, *size), *patch, *dim, *reps, cli.seed_override.unwrap_or(0))?;
            let dir = out_dir(cli, Path::new("runs/bench"))?;
            println!(
                "conv {:.3} ms, reshape+affine {:.3} ms (median of {}), ratio {:.2}x, max |diff| {:.2e}",
                report.conv_median_ms, report.linear_median_ms, report.reps, report.speedup, report.max_abs_diff
            );
            write(&dir.join("bench.json"), &serde_json::to_string_pretty(&report)?)?;
        }
        Command::Gradcheck => {
            let results = oelab_core::checks::full_suite()?;
            let mut failed = 0;
            for r in &results {
                println!("{:<6} {:<32} max rel err {:.2e} over {} coords", if r.passed() { "ok" } else { "FAIL" }, r.name, r.max_rel_error, r.checked);
                failed += usize::from(!r.passed());
            }
            if let Some(dir) = &cli.out {
                std::fs::create_dir_all(dir)?;
                write(&dir.join("gradcheck.json"), &serde_json::to_string_pretty(&results)?)?;
            }
            anyhow::ensure!(failed == 0, "{failed} of {} gradient checks failed", results.len());
        }
        Command::GradNorms => {
            let cfg = load_config(cli)?;
            let report = evalkit::grad_norm_comparison(&cfg)?;
            let dir = out_dir(cli, &cfg.output_dir)?;
            for r in &report.runs {
                println!("{:?}: median grad norm {:.4e}, max {:.4e}", r.projection, r.median, r.max);
            }
            write(&dir.join("grad_norms.csv"), &report.to_csv())?;
            write(&dir.join("grad_norms.json"), &serde_json::to_string_pretty(&report)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e.downcast_ref::<Usage>().is_some() || matches!(e.downcast_ref::<oelab_core::Error>(), Some(oelab_core::Error::Config(_)));
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}
