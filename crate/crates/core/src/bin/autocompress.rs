use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use autocompress::driver::{
    load_checkpoint, load_data, purify_phase, run_autocompress, save_checkpoint, train_baseline, train_from_scratch,
    verify_report, Checkpoint, RunConfig, RunOptions, RunReport,
};
use autocompress::model::{evaluate_accuracy, TrainConfig};
use autocompress::purify::shrink_network;
use autocompress::schemes::{count_flops, count_params, MaskSet, Objective};
use autocompress::seeds::{derive_seed, tag};
use autocompress::{Error, Result};

/// Automatic structured pruning of small CNNs: annealing search over
/// per-layer rates and schemes, ADMM pruning, purification.
#[derive(Parser)]
#[command(name = "autocompress", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration file (flat `key = value`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense baseline and save it.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "baseline.acmp")]
        out: PathBuf,
    },
    /// Full compression run.
    Compress {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        objective: Option<Objective>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        acc_floor: Option<f64>,
        /// Continue from a run checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Start from a trained baseline checkpoint instead of training one.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Run purification after every round instead of once at the end.
        #[arg(long)]
        purify_per_round: bool,
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
    },
    /// Purification and shrinking only, on a pruned checkpoint.
    Purify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "purified.acmp")]
        out: PathBuf,
    },
    /// Test accuracy and size of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Retrain a checkpoint's structure from random weights.
    Scratch {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Epochs; defaults to the baseline epochs of the config.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Print the report of a run checkpoint or report CSV.
    Report {
        /// A `.acmp` checkpoint or a report CSV.
        path: PathBuf,
        /// Print raw CSV instead of the summary table.
        #[arg(long)]
        csv: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::BelowFloor { .. } | Error::Infeasible(_) => 3,
                Error::Format { .. } | Error::Io(_) => 4,
                _ => 1,
            })
        }
    }
}

fn describe(net: &autocompress::model::Network, masks: Option<&MaskSet>) -> Result<String> {
    let p = count_params(net, masks)?;
    let f = count_flops(net, masks)?;
    Ok(format!(
        "conv params {}, total params {}, conv FLOPs {}, total FLOPs {}",
        p.conv, p.total, f.conv, f.total
    ))
}

fn read_report(path: &Path) -> Result<RunReport> {
    if path.extension().is_some_and(|e| e == "acmp") {
        let ckpt = load_checkpoint(path)?;
        let rows = ckpt
            .metadata
            .iter()
            .filter(|(k, _)| k.starts_with("report."))
            .map(|(_, v)| autocompress::driver::ReportRow::from_csv(v))
            .collect::<Result<_>>()?;
        Ok(RunReport { rows, actions: Vec::new() })
    } else {
        RunReport::from_csv(&std::fs::read_to_string(path)?)
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { common, out } => {
            let cfg = common.load()?;
            let (train, test) = load_data(&cfg)?;
            let (net, acc) = train_baseline(&cfg, &train, &test)?;
            let mut ckpt = Checkpoint {
                masks: MaskSet::dense(&net),
                network: net,
                metadata: Default::default(),
            };
            ckpt.metadata.insert("baseline.accuracy".into(), acc.to_string());
            save_checkpoint(&ckpt, &out)?;
            println!("baseline accuracy {acc:.4}; {}", describe(&ckpt.network, None)?);
            println!("saved {}", out.display());
        }
        Command::Compress {
            common,
            objective,
            rounds,
            acc_floor,
            resume,
            init,
            purify_per_round,
            out_dir,
        } => {
            let mut cfg = common.load()?;
            if let Some(o) = objective {
                cfg.objective = o;
            }
            if let Some(r) = rounds {
                cfg.rounds = r;
            }
            if acc_floor.is_some() {
                cfg.acc_floor = acc_floor;
            }
            cfg.purify_per_round |= purify_per_round;
            cfg.validate()?;
            let (train, test) = load_data(&cfg)?;
            let opts = RunOptions {
                out_dir: Some(out_dir.clone()),
                pretrained: init.map(|p| load_checkpoint(&p)).transpose()?.map(|c| c.network),
                resume,
                halt_after_round: None,
            };
            let outcome = run_autocompress(&cfg, &train, &test, &opts)?;
            print!("{}", outcome.report.summary());
            println!("stop: {:?}", outcome.stop);
            println!("final: {}", describe(&outcome.network, Some(&outcome.masks))?);
            println!("outputs in {}", out_dir.display());
            outcome.into_result()?;
        }
        Command::Purify { common, checkpoint, out } => {
            let cfg = common.load()?;
            let (_, test) = load_data(&cfg)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let eval = test.head(cfg.eval_subset.min(test.len()));
            let before = evaluate_accuracy(&ckpt.network, &test)?;
            let (net, masks, thresholds) = purify_phase(&ckpt.network, &ckpt.masks, &eval, &cfg.purify_config(0))?;
            let small = shrink_network(&net, &masks)?;
            let after = evaluate_accuracy(&small, &test)?;
            println!("accuracy {before:.4} -> {after:.4}");
            println!("before: {}", describe(&ckpt.network, Some(&ckpt.masks))?);
            println!("after:  {}", describe(&small, None)?);
            for (li, t) in &thresholds.thresholds {
                println!("layer {li}: column threshold {:.3e}, filter threshold {:.3e}", t.column, t.filter);
            }
            let mut metadata = ckpt.metadata.clone();
            metadata.insert("purified.accuracy".into(), after.to_string());
            let out_ckpt = Checkpoint {
                masks: MaskSet::dense(&small),
                network: small,
                metadata,
            };
            save_checkpoint(&out_ckpt, &out)?;
            println!("saved {}", out.display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.load()?;
            let (_, test) = load_data(&cfg)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let acc = evaluate_accuracy(&ckpt.network, &test)?;
            println!("accuracy {acc:.4} on {} samples", test.len());
            println!("{}", describe(&ckpt.network, Some(&ckpt.masks))?);
            if ckpt.metadata.contains_key("dense.conv_params") {
                let (p, f) = verify_report(&ckpt)?;
                println!("conv reduction {p:.3}x params, {f:.3}x FLOPs (matches report)");
            }
        }
        Command::Scratch {
            common,
            checkpoint,
            epochs,
        } => {
            let cfg = common.load()?;
            let (train, test) = load_data(&cfg)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let pruned = evaluate_accuracy(&ckpt.network, &test)?;
            let structure = shrink_network(&ckpt.network, &ckpt.masks)?;
            let tc = TrainConfig {
                epochs: epochs.unwrap_or(cfg.baseline_epochs),
                lr: cfg.lr,
                batch: cfg.batch,
                seed: derive_seed(cfg.seed, tag::SCRATCH),
            };
            let (_, acc) = train_from_scratch(&structure, &train, &test, &tc)?;
            println!("pruned accuracy {pruned:.4}, from-scratch accuracy {acc:.4}, gap {:+.4}", pruned - acc);
        }
        Command::Report { path, csv } => {
            let report = read_report(&path)?;
            if csv {
                print!("{}", report.to_csv());
            } else {
                print!("{}", report.summary());
            }
        }
    }
    Ok(())
}
