use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use cstar::attack::AdvConfig;
use cstar::io::{
    bench_conv, load_checkpoint, model_ranks, rank_report, save_checkpoint, summarize, write_summary, Dataset, MetricsWriter, RunConfig,
};
use cstar::nn::Model;
use cstar::selftest;
use cstar::train::{epoch_rng, evaluate, pretrain, run_cstar, CstarConfig, TrainEvent};

/// Stream of the run seed reserved for weight initialization.
const INIT_PHASE: u32 = 100;

#[derive(Parser)]
#[command(name = "cstar", version, about = "Joint Tucker-2 compression and adversarial training for small CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Adversarially train a freshly initialized dense model.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint path (default: <output_dir>/pretrained.ckpt).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Low-rank regularized training, decomposition and factorized fine-tuning.
    Compress {
        #[arg(long)]
        config: PathBuf,
        /// Dense checkpoint to start from.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Baseline: decompose right away, then fine-tune for t1 + t2 epochs.
    Decompose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Benign and PGD accuracy on the configured test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// PGD iterations (default: eval_iters from the config).
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Per-layer ranks and parameter counts of a checkpoint.
    RankReport {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dense vs factorized convolution latency at batch size 1.
    Bench {
        #[arg(long, default_value_t = 256)]
        cin: usize,
        #[arg(long, default_value_t = 256)]
        cout: usize,
        #[arg(long, default_value_t = 3)]
        kernel: usize,
        #[arg(long, default_value_t = 32)]
        spatial: usize,
        #[arg(long, default_value_t = 4.0)]
        ratio: f64,
        #[arg(long, default_value_t = 30)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Quick oracle checks of the numerical kernels.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain { config, out } => cmd_pretrain(&config, out),
        Command::Compress { config, checkpoint } => cmd_compress(&config, &checkpoint, false),
        Command::Decompose { config, checkpoint } => cmd_compress(&config, &checkpoint, true),
        Command::Eval { config, checkpoint, iters } => cmd_eval(&config, &checkpoint, iters),
        Command::RankReport { checkpoint, out } => {
            let model = load(&checkpoint)?;
            let table = rank_report(&model_ranks(&model)?);
            print!("{table}");
            if let Some(p) = out {
                fs::write(&p, &table).with_context(|| format!("writing {}", p.display()))?;
            }
            Ok(())
        }
        Command::Bench { cin, cout, kernel, spatial, ratio, runs, seed, json } => {
            let r = bench_conv(cin, cout, kernel, spatial, ratio, runs, seed)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&r)?);
            } else {
                println!("layer      ({cout},{cin},{kernel},{kernel}) on {spatial}x{spatial}, ranks [{},{}]", r.ranks.0, r.ranks.1);
                println!("params     dense {}  factorized {}", r.dense_params, r.factorized_params);
                println!("dense      {:.3} ms/image", r.dense_ms);
                println!("factorized {:.3} ms/image", r.factorized_ms);
                println!("speedup    {:.2}x", r.speedup);
            }
            Ok(())
        }
        Command::Selftest { seed } => {
            let results = selftest::run(seed);
            let failed = results.iter().filter(|r| !r.passed).count();
            for r in &results {
                println!("{} {:<40} {}", if r.passed { "pass" } else { "FAIL" }, r.name, r.detail);
            }
            if failed > 0 {
                bail!("{failed} of {} self-checks failed", results.len());
            }
            Ok(())
        }
    }
}

fn load(path: &Path) -> Result<Model> {
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

fn setup(config: &Path) -> Result<(RunConfig, Dataset, Dataset)> {
    let cfg = RunConfig::load(config).with_context(|| format!("config {}", config.display()))?;
    let (train, test) = cfg.datasets()?;
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    Ok((cfg, train, test))
}

fn print_row(r: &cstar::train::TrainRow) {
    let acc = match (r.benign, r.robust) {
        (Some(b), Some(rb)) => format!("  benign {b:6.2}  robust {rb:6.2}"),
        _ => String::new(),
    };
    let gap = cstar::train::median(&r.gaps).map_or_else(String::new, |g| format!("  gap {g:.4}"));
    println!("phase {} epoch {:>3}  loss {:.4}  train {:6.2}{acc}{gap}", r.phase, r.epoch, r.loss, r.train_accuracy);
}

fn cmd_pretrain(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let (cfg, train, test) = setup(config)?;
    let mut model = cfg.model.build(&mut epoch_rng(cfg.seed, INIT_PHASE, 0))?;
    let metrics = cfg.output_dir.join("pretrain.csv");
    let _ = fs::remove_file(&metrics);
    let mut w = MetricsWriter::open(&metrics)?;
    pretrain(&mut model, &cfg.cstar, cfg.pretrain_epochs, &train, &test, &mut |ev| {
        if let TrainEvent::Epoch(r) = ev {
            print_row(r);
            w.append(r)?;
        }
        Ok(())
    })?;
    let out = out.unwrap_or_else(|| cfg.output_dir.join("pretrained.ckpt"));
    save_checkpoint(&model, &out).with_context(|| format!("writing {}", out.display()))?;
    println!("saved {}", out.display());
    Ok(())
}

fn cmd_compress(config: &Path, checkpoint: &Path, baseline: bool) -> Result<()> {
    let (cfg, train, test) = setup(config)?;
    let model = load(checkpoint)?;
    if model.is_factorized() {
        bail!("{} is already factorized; compression needs a dense checkpoint", checkpoint.display());
    }
    let (tag, cstar_cfg) = if baseline {
        ("decompose", CstarConfig { t1: 0, t2: cfg.cstar.t1 + cfg.cstar.t2, ..cfg.cstar.clone() })
    } else {
        ("compress", cfg.cstar.clone())
    };
    let dir = &cfg.output_dir;
    let metrics = dir.join(format!("{tag}.csv"));
    let _ = fs::remove_file(&metrics);
    let mut w = MetricsWriter::open(&metrics)?;
    let (model, report) = run_cstar(&model, &cstar_cfg, &train, &test, &mut |ev| {
        match ev {
            TrainEvent::Epoch(r) => {
                print_row(r);
                w.append(r)?;
            }
            TrainEvent::PhaseEnd { phase: 1, model } => save_checkpoint(model, &dir.join(format!("{tag}-phase1.ckpt")))?,
            TrainEvent::PhaseEnd { .. } => {}
        }
        Ok(())
    })?;
    let ckpt = dir.join(format!("{tag}.ckpt"));
    save_checkpoint(&model, &ckpt)?;
    let summary = summarize(&report, &model);
    write_summary(&summary, &dir.join(format!("{tag}-summary.json")))?;
    if let Some(plan) = &report.plan {
        let table = rank_report(plan);
        fs::write(dir.join(format!("{tag}-ranks.txt")), &table)?;
        print!("{table}");
    }
    println!("saved {}", ckpt.display());
    Ok(())
}

fn cmd_eval(config: &Path, checkpoint: &Path, iters: Option<usize>) -> Result<()> {
    let (cfg, _, test) = setup(config)?;
    if test.is_empty() {
        bail!("the configured test split is empty");
    }
    let model = load(checkpoint)?;
    let adv = cfg.cstar.adv_eval;
    let adv = AdvConfig::new(adv.delta, adv.step, iters.unwrap_or(adv.iters), adv.random_init)?;
    let (benign, robust) = evaluate(&model, &test, &adv, 256, &mut epoch_rng(cfg.seed, 20, 0))?;
    println!("samples {}  params {}", test.len(), model.param_count());
    println!("benign  {benign:.2}%");
    println!("PGD-{}  {robust:.2}%", adv.iters);
    Ok(())
}
