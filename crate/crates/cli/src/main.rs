use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use cxrc_core::finetune::FinetuneConfig;
use cxrc_core::pipeline::{self, CompareConfig};
use cxrc_core::pretrain::PretrainConfig;
use cxrc_core::synth::{self, Split, DEFAULT_DATASET_SIZE, MANIFEST_FILE, SPLIT_RATIOS};
use cxrc_core::{DecoderKind, Error, KvConfig, PretrainMethod};

// Training allocates and frees many large tensors per step; glibc serves
// those with mmap/munmap and spends about half the run in the kernel.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Contrastive pretraining and report generation on synthetic radiographs.
///
/// Exit codes: 0 success, 2 usage or configuration error, 3 I/O or corrupt
/// input, 4 numerical failure.
#[derive(Parser)]
#[command(name = "cxrc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with manifest and 7:1:2 splits.
    SynthData {
        #[arg(long, default_value_t = DEFAULT_DATASET_SIZE)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain an encoder on the training split.
    Pretrain {
        #[arg(long)]
        method: PretrainMethod,
        #[command(flatten)]
        common: Common,
    },
    /// Train encoder and decoder end to end on (image, report) pairs.
    Finetune {
        #[arg(long)]
        encoder_ckpt: PathBuf,
        #[arg(long, default_value = "transformer")]
        decoder: DecoderKind,
        /// Train the decoder only.
        #[arg(long)]
        freeze_encoder: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Generate reports for a split and score them.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model_ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain, fine-tune and evaluate every (method, seed) pair and
    /// tabulate seed-averaged scores.
    Compare {
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<PretrainMethod>,
        #[arg(long, default_value = "transformer")]
        decoder: DecoderKind,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Dataset root; the default-size dataset is generated under
        /// `<out>/data` when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        pretrain_epochs: Option<usize>,
        #[arg(long)]
        finetune_epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Flags shared by the training commands. Flags override `--config`.
#[derive(Args)]
struct Common {
    #[arg(long)]
    data: PathBuf,
    /// Flat `key=value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn kv(&self) -> anyhow::Result<KvConfig> {
        let mut kv = read_config(self.config.as_deref())?;
        if let Some(s) = self.seed {
            kv.set("seed", s);
        }
        if let Some(e) = self.epochs {
            kv.set("epochs", e);
        }
        if let Some(b) = self.batch_size {
            kv.set("batch_size", b);
        }
        Ok(kv)
    }
}

fn read_config(path: Option<&Path>) -> anyhow::Result<KvConfig> {
    match path {
        None => Ok(KvConfig::new()),
        Some(p) => {
            let text = pipeline::read_text(p)?;
            Ok(KvConfig::parse(&text).with_context(|| format!("reading {}", p.display()))?)
        }
    }
}

/// Worker count for `compare`, from `CXRC_THREADS`.
fn workers() -> anyhow::Result<usize> {
    match std::env::var("CXRC_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("CXRC_THREADS must be a positive integer, got `{v}`")).into()),
        },
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::SynthData { n, seed, out } => {
            let ds = synth::generate_dataset(n, seed, &SPLIT_RATIOS)?;
            let mut kv = KvConfig::new();
            kv.set("n", n);
            kv.set("seed", seed);
            kv.set("split_ratios", "0.7,0.1,0.2");
            pipeline::prepare_run_dir(&out, &kv, &seed.to_string())?;
            synth::write_dataset(&ds, &out)?;
            println!("wrote {n} studies to {}", out.display());
        }
        Command::Pretrain { method, common } => {
            let cfg = PretrainConfig::from_kv(&common.kv()?, Some(method), None)?;
            let res = pipeline::run_pretrain(&common.data, &cfg, &common.out)?;
            if let (Some(first), Some(last)) = (res.log.first(), res.log.last()) {
                println!("{method}: loss {:.6} -> {:.6}", first.loss, last.loss);
            }
        }
        Command::Finetune { encoder_ckpt, decoder, freeze_encoder, common } => {
            let mut kv = common.kv()?;
            if freeze_encoder {
                kv.set("freeze_encoder", true);
            }
            let cfg = FinetuneConfig::from_kv(&kv, Some(decoder), None)?;
            let res = pipeline::run_finetune(&common.data, &encoder_ckpt, &cfg, &common.out)?;
            match (res.best_epoch, res.curve.iter().find(|r| Some(r.epoch) == res.best_epoch)) {
                (Some(e), Some(r)) => println!("{decoder}: best validation loss {:.6} at epoch {e}", r.val_loss),
                _ => println!("{decoder}: no epochs run"),
            }
        }
        Command::Evaluate { data, model_ckpt, split, out } => {
            let report = pipeline::run_evaluate(&data, &model_ckpt, split, &out)?;
            print!("{}", report.to_text());
        }
        Command::Compare { methods, decoder, seeds, data, config, pretrain_epochs, finetune_epochs, out } => {
            let mut cfg = CompareConfig::new(methods, seeds, decoder);
            cfg.overrides = read_config(config.as_deref())?;
            cfg.pretrain_epochs = cfg.overrides.get_or("pretrain_epochs", cfg.pretrain_epochs)?;
            cfg.finetune_epochs = cfg.overrides.get_or("finetune_epochs", cfg.finetune_epochs)?;
            cfg.pretrain_epochs = pretrain_epochs.unwrap_or(cfg.pretrain_epochs);
            cfg.finetune_epochs = finetune_epochs.unwrap_or(cfg.finetune_epochs);
            cfg.workers = workers()?;
            cfg.validate()?;
            let data = match data {
                Some(d) => d,
                None => {
                    let d = out.join("data");
                    if !d.join(MANIFEST_FILE).exists() {
                        let ds = synth::generate_dataset(DEFAULT_DATASET_SIZE, 0, &SPLIT_RATIOS)?;
                        synth::write_dataset(&ds, &d)?;
                    }
                    d
                }
            };
            let res = pipeline::compare(&data, &cfg, &out)?;
            print!("{}\n{}", res.table, res.keyword_table);
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InvalidArgument(_)) => 2,
        Some(Error::Io { .. } | Error::Corrupt { .. }) => 3,
        Some(Error::Numerical(_)) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
