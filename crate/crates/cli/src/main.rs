//! Command-line front end: run the link-level studies, train the unfolded
//! optimizer's step schedule, optimize a single instance, compare solvers,
//! and summarize result directories.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use ndarray::Array2;
use std::path::PathBuf;

use simstack_core::channel;
use simstack_core::config::SystemConfig;
use simstack_core::harness::{self, base_config, Experiment, ExperimentSpec, Scale};
use simstack_core::sim::{dump_phases, load_phases};
use simstack_core::upgd::{self, StepRule, StepSchedule};

#[derive(Parser)]
#[command(name = "simstack", version, about = "Metasurface-aided OFDM-IM link simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one of the named experiments.
    Run {
        /// convergence | layers-sweep | ber-vs-pt | sumrate-vs-pt | papr | im-tradeoff
        experiment: String,
        #[arg(long, default_value = "desk")]
        scale: String,
        /// Flat key=value config file overriding the scale defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Comma-separated seed list.
        #[arg(long, default_value = "1,2,3,4")]
        seeds: String,
        #[arg(long, default_value_t = 0.0)]
        pt_start: f64,
        #[arg(long, default_value_t = 10.0)]
        pt_stop: f64,
        #[arg(long, default_value_t = 5.0)]
        pt_step: f64,
    },
    /// Train the step-size schedule and persist it with its history.
    Train {
        #[arg(long, default_value = "desk")]
        scale: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        contexts: usize,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 2e-4)]
        lr: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Optimize the metasurface phases for one seeded instance.
    Optimize {
        #[arg(long, default_value = "desk")]
        scale: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        /// fixed | backtracking
        #[arg(long, default_value = "fixed")]
        rule: String,
        /// Write the channel realization used to this path.
        #[arg(long)]
        dump_channel: Option<PathBuf>,
        /// Read the channel realization from this path instead of drawing one.
        #[arg(long)]
        load_channel: Option<PathBuf>,
        /// Write the optimized phase tensor to this path.
        #[arg(long)]
        dump_phases: Option<PathBuf>,
        /// Start from the phase tensor at this path instead of zeros.
        #[arg(long)]
        load_phases: Option<PathBuf>,
    },
    /// Run fixed-step, backtracking, and unfolded solvers on one instance.
    CompareSolvers {
        #[arg(long, default_value = "desk")]
        scale: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        /// Optional trained schedule for the unfolded column.
        #[arg(long)]
        schedule: Option<PathBuf>,
    },
    /// Summarize a result directory as markdown.
    Summarize { dir: PathBuf },
}

fn load_config(scale: &str, path: &Option<PathBuf>) -> Result<SystemConfig> {
    let scale: Scale = scale.parse().map_err(|e| anyhow::anyhow!("{e}"))?;
    let cfg = match path {
        Some(p) => SystemConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => base_config(scale),
    };
    cfg.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
    Ok(cfg)
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let seeds: Result<Vec<u64>, _> = s.split(',').map(|v| v.trim().parse()).collect();
    let seeds = seeds.context("seed list must be comma-separated integers")?;
    if seeds.is_empty() {
        bail!("need at least one seed");
    }
    Ok(seeds)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            experiment,
            scale,
            config,
            out,
            seeds,
            pt_start,
            pt_stop,
            pt_step,
        } => {
            let exp: Experiment = experiment.parse().map_err(|e| anyhow::anyhow!("{e}"))?;
            let scale_parsed: Scale = scale.parse().map_err(|e| anyhow::anyhow!("{e}"))?;
            let cfg = load_config(&scale, &config)?;
            let mut spec = ExperimentSpec::new(exp, scale_parsed, out.clone());
            spec.seeds = parse_seeds(&seeds)?;
            spec.trials = spec.seeds.len();
            spec.pt_start_dbm = pt_start;
            spec.pt_stop_dbm = pt_stop;
            spec.pt_step_db = pt_step;
            let manifest = harness::run(&spec, &cfg)?;
            println!(
                "{} ({}) finished in {:.1}s -> {}",
                exp.name(),
                manifest.config_hash,
                manifest.wall_time_s,
                out.display()
            );
        }
        Command::Train {
            scale,
            config,
            out,
            contexts,
            epochs,
            batch,
            lr,
            seed,
        } => {
            let cfg = load_config(&scale, &config)?;
            std::fs::create_dir_all(&out)?;
            let data = upgd::gen_dataset(&cfg, contexts, seed)?;
            let init = StepSchedule::geometric(0.35, 0.90, cfg.t)?;
            let run = upgd::train_schedule(&data, &init, epochs, batch, lr, 0.8, seed)?;
            run.schedule.save(&out.join("schedule.txt"))?;
            run.save_history(&out.join("train_history.csv"))?;
            println!(
                "trained {} stages over {} contexts; final val loss {:.6e}",
                run.schedule.len(),
                contexts,
                run.val_history.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Optimize {
            scale,
            config,
            seed,
            steps,
            rule,
            dump_channel,
            load_channel,
            dump_phases: dump_phases_path,
            load_phases: load_phases_path,
        } => {
            let cfg = load_config(&scale, &config)?;
            let mut ctx = upgd::gen_dataset(&cfg, 1, seed)?.pop().expect("count = 1");
            if let Some(p) = &load_channel {
                let ch = channel::load(&cfg, p)
                    .with_context(|| format!("loading channel {}", p.display()))?;
                ctx.h = ch.h;
            }
            if let Some(p) = &dump_channel {
                let ch = channel::ChannelRealization {
                    h: ctx.h.clone(),
                    paths: channel::PathSet { paths: Vec::new() },
                    seed,
                };
                channel::dump(&ch, p)?;
            }
            let theta0 = match &load_phases_path {
                Some(p) => load_phases(p)?,
                None => Array2::zeros((cfg.l, cfg.m())),
            };
            let rule = match rule.as_str() {
                "fixed" => StepRule::Fixed(0.15),
                "backtracking" => StepRule::Backtracking {
                    eta0: 1.0,
                    shrink: 0.5,
                    c: 1e-4,
                },
                other => bail!("unknown step rule '{other}'"),
            };
            let traj = upgd::pgd(&ctx, &theta0, steps, rule)?;
            if let Some(p) = &dump_phases_path {
                dump_phases(&traj.theta, p)?;
            }
            println!(
                "loss {:.6e} -> {:.6e} over {steps} iterations",
                traj.initial_loss,
                traj.losses.last().copied().unwrap_or(traj.initial_loss)
            );
        }
        Command::CompareSolvers {
            scale,
            config,
            seed,
            steps,
            schedule,
        } => {
            let cfg = load_config(&scale, &config)?;
            let ctx = upgd::gen_dataset(&cfg, 1, seed)?.pop().expect("count = 1");
            let theta0 = Array2::zeros((cfg.l, cfg.m()));
            let fixed = upgd::pgd(&ctx, &theta0, steps, StepRule::Fixed(0.15))?;
            let bt = upgd::pgd(
                &ctx,
                &theta0,
                steps,
                StepRule::Backtracking {
                    eta0: 1.0,
                    shrink: 0.5,
                    c: 1e-4,
                },
            )?;
            println!("solver,final_loss");
            println!("fixed,{:.6e}", fixed.losses.last().unwrap());
            println!("backtracking,{:.6e}", bt.losses.last().unwrap());
            if let Some(p) = &schedule {
                let sched = StepSchedule::load(p)?;
                let unfolded = upgd::upgd_forward(&ctx, &theta0, &sched)?;
                println!(
                    "unfolded[{}],{:.6e}",
                    sched.len(),
                    unfolded.losses.last().copied().unwrap_or(unfolded.initial_loss)
                );
            }
        }
        Command::Summarize { dir } => {
            print!("{}", harness::summarize(&dir)?);
        }
    }
    Ok(())
}
