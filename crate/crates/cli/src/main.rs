use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sonoglove::geometry::{default_platform, platform_experiment};
use sonoglove::pipeline::{
    self, encode_stream, evaluate, evaluate_baseline, finetune, gen_human_dataset, gen_mech_dataset, pretrain,
    run_ablations, run_sensor_study, stream_infer, Dataset, DomainConfig, ExperimentConfig, Table,
    DEFAULT_FINETUNE_POSES, DEFAULT_HUMAN_POSES, DEFAULT_MECH_FRAMES, FINETUNE_LR,
};
use sonoglove::posenet::{Metrics, ModelState};

#[derive(Parser)]
#[command(name = "sonoglove", version, about = "Ultrasonic glove hand-pose toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML file with [model], [train] and [domain] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Windows sampled per epoch instead of the full training set.
    #[arg(long)]
    windows_per_epoch: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a human-hand dataset (JSON lines).
    GenHuman {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        poses: Option<usize>,
        #[arg(long)]
        sensors: Option<usize>,
        /// Shifted domain used for fine-tuning (defaults to 5000 poses).
        #[arg(long)]
        shifted: bool,
    },
    /// Simulate the servo-driven mechanical hand.
    GenMech {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = DEFAULT_MECH_FRAMES)]
        frames: usize,
        /// Range noise of a recorded session instead of the clean rig.
        #[arg(long)]
        recorded: bool,
    },
    /// Train a model from scratch; 80/10/10 split of --data by sequence.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Continue training a checkpoint on another dataset.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Test-split metrics of a checkpoint, optionally against the
    /// nearest-neighbor baseline.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Evaluate the whole file instead of its test split.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        baseline: bool,
    },
    /// Train every model variant over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Dataset to use; a mechanical-hand set at recorded-session noise
        /// is generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Joint error against the number of glove sensors.
    SensorStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20_000)]
        poses: usize,
        #[arg(long, value_delimiter = ',', default_value = "5,6,7,8")]
        counts: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
    },
    /// Rotating-platform localization experiment.
    TrilatDemo {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        /// Range noise in millimeters.
        #[arg(long, default_value_t = 0.5)]
        noise_mm: f64,
    },
    /// Sliding-window inference over the line-based wire format.
    Stream {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Wire-format input; stdin when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Replay the frames of a dataset file instead of reading --input.
        #[arg(long, conflicts_with = "input")]
        replay: Option<PathBuf>,
    },
}

type CliResult = Result<bool, Box<dyn std::error::Error>>;

fn load_config(c: &Common) -> Result<ExperimentConfig, pipeline::PipelineError> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.model.seed = c.seed;
    cfg.train.seed = c.seed;
    if let Some(e) = c.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = c.lr {
        cfg.train.lr = lr;
    }
    if c.windows_per_epoch.is_some() {
        cfg.train.windows_per_epoch = c.windows_per_epoch;
    }
    Ok(cfg)
}

fn out_path(c: &Common, default: &str) -> PathBuf {
    c.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn print_table(t: &Table) {
    print!("{}\n{}", t.to_csv(), t.to_text());
}

fn save_table(t: &Table, out: Option<&Path>) -> io::Result<()> {
    print_table(t);
    if let Some(p) = out {
        std::fs::write(p, t.to_csv())?;
    }
    Ok(())
}

fn metrics_table(rows: &[(&str, &Metrics)]) -> Table {
    let mut headers = vec!["model".to_string(), "mean".into(), "max".into()];
    if let Some((_, m)) = rows.first() {
        headers.extend(m.per_finger.iter().map(|(f, _)| f.clone()));
    }
    headers.push("windows".into());
    let rows = rows
        .iter()
        .map(|(name, m)| {
            let mut r = vec![name.to_string(), format!("{:.4}", m.mean), format!("{:.4}", m.max)];
            r.extend(m.per_finger.iter().map(|(_, v)| format!("{v:.4}")));
            r.push(m.windows.to_string());
            r
        })
        .collect();
    Table { headers, rows }
}

fn loss_table(train: &[f64], val: &[f64]) -> Table {
    Table {
        headers: vec!["epoch".into(), "train".into(), "val".into()],
        rows: train
            .iter()
            .enumerate()
            .map(|(e, t)| {
                let v = val.get(e).map_or(String::new(), |v| format!("{v:.6}"));
                vec![(e + 1).to_string(), format!("{t:.6}"), v]
            })
            .collect(),
    }
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenHuman { common, poses, sensors, shifted } => {
            let cfg = load_config(&common)?;
            let mut domain = cfg.domain.clone();
            if let Some(n) = sensors {
                domain.n_sensors = n;
            }
            if shifted {
                domain = domain.shifted();
            }
            let default = if shifted { DEFAULT_FINETUNE_POSES } else { DEFAULT_HUMAN_POSES };
            let ds = gen_human_dataset(&domain, poses.unwrap_or(default), common.seed)?;
            let out = out_path(&common, "human.jsonl");
            ds.write(&out)?;
            println!("{} frames, {:.4}% masked -> {}", ds.len(), 100.0 * ds.masked_fraction(), out.display());
        }
        Command::GenMech { common, frames, recorded } => {
            let cfg = load_config(&common)?;
            let preset = if recorded { DomainConfig::mechanical_recorded() } else { DomainConfig::mechanical() };
            let mech = DomainConfig {
                n_sensors: cfg.domain.n_sensors,
                ..preset
            };
            let ds = gen_mech_dataset(&mech, frames, common.seed)?;
            let out = out_path(&common, "mech.jsonl");
            ds.write(&out)?;
            println!("{} frames -> {}", ds.len(), out.display());
        }
        Command::Pretrain { common, data } => {
            let cfg = load_config(&common)?;
            let (train, val, test) = Dataset::read(&data)?.split(common.seed);
            let (state, report) = pretrain(&train, Some(&val), &cfg.model, &cfg.train, cfg.domain.d_max)?;
            print_table(&loss_table(&report.train_loss, &report.val_loss));
            let m = evaluate(&state, &test, cfg.domain.d_max)?;
            print_table(&metrics_table(&[("test", &m)]));
            let out = out_path(&common, "model.ckpt");
            state.save(&out)?;
            println!("{} parameters -> {}", state.param_count(), out.display());
        }
        Command::Finetune { common, checkpoint, data } => {
            let mut cfg = load_config(&common)?;
            if common.lr.is_none() {
                cfg.train.lr = FINETUNE_LR;
            }
            let mut state = ModelState::load(&checkpoint)?;
            let (train, val, test) = Dataset::read(&data)?.split(common.seed);
            let before = evaluate(&state, &test, cfg.domain.d_max)?;
            let report = finetune(&mut state, &train, Some(&val), &cfg.train, cfg.domain.d_max)?;
            print_table(&loss_table(&report.train_loss, &report.val_loss));
            let after = evaluate(&state, &test, cfg.domain.d_max)?;
            print_table(&metrics_table(&[("pretrained", &before), ("fine-tuned", &after)]));
            let out = out_path(&common, "finetuned.ckpt");
            state.save(&out)?;
            println!("-> {}", out.display());
        }
        Command::Eval { common, checkpoint, data, all, baseline } => {
            let cfg = load_config(&common)?;
            let state = ModelState::load(&checkpoint)?;
            let ds = Dataset::read(&data)?;
            let (train, _, test) = ds.split(common.seed);
            let test = if all { ds.clone() } else { test };
            let m = evaluate(&state, &test, cfg.domain.d_max)?;
            let mut rows = vec![("model", &m)];
            let b;
            if baseline {
                b = evaluate_baseline(&train, &test, state.config.window)?;
                rows.push(("nearest neighbor", &b));
            }
            save_table(&metrics_table(&rows), common.out.as_deref())?;
        }
        Command::Ablate { common, data, seeds } => {
            let cfg = load_config(&common)?;
            let ds = match data {
                Some(p) => Dataset::read(p)?,
                None => gen_mech_dataset(&DomainConfig::mechanical_recorded(), DEFAULT_MECH_FRAMES, common.seed)?,
            };
            let table = run_ablations(&ds, &seeds, &cfg.model, &cfg.train, cfg.domain.d_max)?;
            save_table(&table.table(), common.out.as_deref())?;
            if let Err(e) = table.check() {
                eprintln!("check failed: {e}");
                return Ok(false);
            }
        }
        Command::SensorStudy { common, poses, counts, seeds } => {
            let cfg = load_config(&common)?;
            let table = run_sensor_study(&counts, &cfg.domain, poses, &seeds, &cfg.model, &cfg.train)?;
            save_table(&table.table(), common.out.as_deref())?;
            if counts.iter().copied().eq(5..=8) {
                if let Err(e) = table.check() {
                    eprintln!("check failed: {e}");
                    return Ok(false);
                }
            }
        }
        Command::TrilatDemo { common, steps, noise_mm } => {
            let (frame, d) = default_platform();
            let res = platform_experiment(&frame, d, steps, noise_mm / 1000.0, common.seed)?;
            let t = Table {
                headers: vec!["steps".into(), "noise (mm)".into(), "radius (mm)".into(), "mean residual (mm)".into()],
                rows: vec![vec![
                    steps.to_string(),
                    format!("{noise_mm}"),
                    format!("{:.3}", res.fit.radius * 1000.0),
                    format!("{:.4}", res.mean_error * 1000.0),
                ]],
            };
            print_table(&t);
            if let Some(out) = &common.out {
                res.write_points_csv(BufWriter::new(File::create(out)?))?;
                let hist = out.with_extension("hist.csv");
                res.write_histogram_csv(BufWriter::new(File::create(&hist)?))?;
                println!("-> {} and {}", out.display(), hist.display());
            }
        }
        Command::Stream { common, checkpoint, input, replay } => {
            let cfg = load_config(&common)?;
            let state = ModelState::load(&checkpoint)?;
            let reader: Box<dyn BufRead> = match (input, replay) {
                (Some(p), _) => Box::new(BufReader::new(File::open(p)?)),
                (None, Some(p)) => {
                    let ds = Dataset::read(p)?;
                    let ms = ds.records.iter().map(|r| r.matrix()).collect::<Result<Vec<_>, _>>()?;
                    let mut buf = Vec::new();
                    encode_stream(&ms, &mut buf)?;
                    Box::new(io::Cursor::new(buf))
                }
                (None, None) => Box::new(io::stdin().lock()),
            };
            let mut out: Box<dyn Write> = match &common.out {
                Some(p) => Box::new(BufWriter::new(File::create(p)?)),
                None => Box::new(BufWriter::new(io::stdout().lock())),
            };
            let stats = stream_infer(reader, &state, cfg.domain.d_max, &mut out)?;
            out.flush()?;
            eprintln!(
                "{} frames, {} lines, {} malformed, {:.1} frames/s, latency mean {:.2} ms max {:.2} ms",
                stats.frames,
                stats.lines,
                stats.malformed,
                stats.frames_per_second,
                stats.mean_latency_ms,
                stats.max_latency_ms
            );
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
