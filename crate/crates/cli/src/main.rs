use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use lanecast_core::attention::Variant;
use lanecast_core::bench::{run_bench, BenchConfig, BenchRow};
use lanecast_core::model::Model;
use lanecast_core::synthlane::{ipm_demo, load_dataset, make_dataset, save_dataset, Profile, SpecDistribution};
use lanecast_core::train::{
    evaluate, gradcheck, mean_loss, toy_config, toy_scene, train, Checkpoint, Optimizer, Protocol, RunConfig,
    GRADCHECK_EPS, GRADCHECK_TOLERANCE,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOSS_FILE: &str = "loss.csv";

#[derive(Parser)]
#[command(name = "lanecast", version, about = "Synthetic 3D lane detection toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset: one JSON file per scene plus a manifest.
    Gen {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// JSON file overriding the scene distribution.
        #[arg(long)]
        distribution: Option<PathBuf>,
    },
    /// Train on a dataset; writes a checkpoint and the per-step loss.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint up to `train.steps`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset. The report lands next to the checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        protocol: Protocol,
    },
    /// Time one attention layer and count its multiply-accumulates.
    Bench {
        #[arg(long)]
        na: usize,
        #[arg(long)]
        nb: usize,
        #[arg(long = "L")]
        lanes: usize,
        #[arg(long = "C")]
        channels: usize,
        #[arg(long)]
        variant: Variant,
        #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
        repeats: u64,
    },
    /// Compare analytic and finite-difference gradients per parameter group.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        flip_group: Option<String>,
    },
    /// Lateral error of flat-ground back-projection along two lanes.
    IpmDemo {
        #[arg(long)]
        profile: Profile,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Gen { count, seed, out, distribution } => {
            let dist = match distribution {
                Some(p) => serde_json::from_str(&read(&p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => SpecDistribution::default(),
            };
            let layout = RunConfig::default().target_layout();
            let data = make_dataset(count as usize, &dist, seed, &layout)?;
            save_dataset(&data, &out).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} scenes to {}", data.scenes.len(), out.display());
        }
        Cmd::Train { data, config, out, resume } => {
            let cfg = RunConfig::from_json(&read(&config)?).with_context(|| format!("config {}", config.display()))?;
            let (mut model, mut opt, start) = match resume {
                Some(p) => {
                    let ck = Checkpoint::from_json(&read(&p)?)?;
                    if ck.config.model != cfg.model {
                        bail!("checkpoint {} was trained with a different model config", p.display());
                    }
                    let (m, mut o) = ck.restore()?;
                    o.horizon = cfg.train.steps;
                    (m, o, ck.step)
                }
                None => (Model::new(cfg.model.clone(), cfg.train.seed)?, Optimizer::new(&cfg.train), 0),
            };
            let scenes = load_dataset(&data, &cfg.target_layout())
                .with_context(|| format!("loading dataset {}", data.display()))?
                .scenes;
            let steps = cfg.train.steps.saturating_sub(start);
            fs::create_dir_all(&out)?;
            let loss_path = out.join(LOSS_FILE);
            let mut log = String::new();
            if start == 0 || !loss_path.exists() {
                log.push_str("step,loss\n");
            }
            let initial = mean_loss(&model, &scenes, &cfg.loss)?;
            train(&mut model, &mut opt, &scenes, &cfg.loss, start, steps, |k, l| log.push_str(&format!("{k},{l}\n")))?;
            let fin = mean_loss(&model, &scenes, &cfg.loss)?;
            let mut f = fs::OpenOptions::new().create(true).append(start > 0).write(true).truncate(start == 0).open(&loss_path)?;
            f.write_all(log.as_bytes())?;
            fs::write(out.join(CHECKPOINT_FILE), Checkpoint::capture(&cfg, &model, &opt, start + steps).to_json()?)?;
            println!("steps {start}..{} mean loss {initial} -> {fin}", start + steps);
        }
        Cmd::Eval { data, checkpoint, protocol } => {
            let ck = Checkpoint::from_json(&read(&checkpoint)?)?;
            let (model, _) = ck.restore()?;
            let cfg = &ck.config;
            let scenes = load_dataset(&data, &cfg.target_layout())
                .with_context(|| format!("loading dataset {}", data.display()))?
                .scenes;
            let report = evaluate(&model, &scenes, &cfg.vote, &cfg.eval, protocol)?;
            let dir = checkpoint.parent().unwrap_or(Path::new("."));
            let json = serde_json::to_string_pretty(&report)?;
            fs::write(dir.join(format!("eval_{protocol}.json")), &json)?;
            fs::write(dir.join(format!("eval_{protocol}.csv")), report.to_csv())?;
            println!("{json}");
        }
        Cmd::Bench { na, nb, lanes, channels, variant, repeats } => {
            let row = run_bench(&BenchConfig::new(na, nb, lanes, channels, variant, repeats as usize))?;
            println!("{}\n{}", BenchRow::CSV_HEADER, row.csv_row());
        }
        Cmd::Gradcheck { seed, flip_group } => {
            let cfg = toy_config();
            let model = Model::new(cfg.model.clone(), seed)?;
            let scene = toy_scene(&cfg, seed)?;
            let rows = gradcheck(&model, &scene, &cfg.loss, GRADCHECK_EPS, GRADCHECK_TOLERANCE, flip_group.as_deref())?;
            println!("group,entries,max_rel_err,passed");
            for r in &rows {
                println!("{},{},{:e},{}", r.group, r.entries, r.max_rel_err, r.passed);
            }
            if !rows.iter().all(|r| r.passed) {
                eprintln!("gradient check failed");
                return Ok(ExitCode::from(1));
            }
        }
        Cmd::IpmDemo { profile, out } => {
            let rows = ipm_demo(profile, RunConfig::default().model.image_hw)?;
            let mut csv = String::from("lane,y,x_true,x_ipm,abs_err\n");
            for r in &rows {
                csv.push_str(&format!("{},{},{},{},{}\n", r.lane, r.y, r.x_true, r.x_ipm, r.abs_err));
            }
            fs::write(&out, csv).with_context(|| format!("writing {}", out.display()))?;
            let worst = rows.iter().map(|r| r.abs_err).fold(0.0, f64::max);
            println!("{} rows, max |err| {worst}", rows.len());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn read(p: &Path) -> Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}
