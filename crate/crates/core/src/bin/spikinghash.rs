use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spikinghash::data::Split;
use spikinghash::harness::{self, Ablation};
use spikinghash::model::checkpoint::MANIFEST;
use spikinghash::model::Checkpoint;
use spikinghash::train::{write_json, RunConfig, Trainer, CHECKPOINT_DIR};
use spikinghash::{Error, Result};

#[derive(Parser)]
#[command(name = "spikinghash", version, about = "Spiking hashing networks on synthetic event frames")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON); missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the model and data seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write train, db and query splits.
    GenData(Common),
    /// Train a model and write its checkpoint, log and soft matrix.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Encode the db and query splits and report retrieval metrics.
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; regenerated from the run configuration when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        bits: Option<usize>,
        #[arg(long, default_value_t = 10)]
        topn: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Firing rates, synaptic operations and energy over the query split.
    Energy {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the base configuration and one variant under the same seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_ablation)]
        variant: Ablation,
        #[arg(long, default_value_t = 10)]
        topn: usize,
    },
    /// Write the learned class similarity matrix of a checkpoint.
    ExportSoftMatrix {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown variant {s:?}; expected 2d-swm, all-ssa or hard-loss"))
}

fn load_run(common: &Common) -> Result<RunConfig> {
    let mut run: RunConfig = match &common.config {
        Some(path) => serde_json::from_slice(&fs::read(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        run.seed = seed;
        run.data.seed = seed;
    }
    run.validate()?;
    Ok(run)
}

/// Accepts a checkpoint directory or a training output directory.
fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if path.join(MANIFEST).is_file() {
        Checkpoint::load(path)
    } else {
        Checkpoint::load(&path.join(CHECKPOINT_DIR))
    }
}

fn run_config_of(ckpt: &Checkpoint) -> Result<RunConfig> {
    serde_json::from_value(ckpt.state["run"].clone()).map_err(|e| Error::Format(format!("checkpoint has no run configuration: {e}")))
}

fn load_or_generate(data: Option<&Path>, ckpt: &Checkpoint, split: Split) -> Result<spikinghash::data::Dataset> {
    match data {
        Some(dir) => harness::load_split(dir, split),
        None => spikinghash::data::generate(&run_config_of(ckpt)?.data, split),
    }
}

fn print_epoch(e: &spikinghash::train::EpochLog) {
    eprintln!(
        "epoch {:>3}  loss {:.5}  L_s {:.5}  L_cls {:.5}  acc {:.4}  λ {:.3}{}",
        e.epoch,
        e.loss,
        e.similarity_loss,
        e.classification_loss,
        e.accuracy,
        e.lambda,
        if e.round_finalized { "  [round]" } else { "" }
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let run = load_run(&common)?;
            harness::gen_data(&run.data, &common.out)?;
            eprintln!("wrote {} splits of {:?} to {}", Split::ALL.len(), run.data.task, common.out.display());
        }
        Command::Train { common, resume } => {
            let mut trainer = if resume {
                Trainer::from_checkpoint(&load_checkpoint(&common.out)?)?
            } else {
                Trainer::new(load_run(&common)?)?
            };
            let data = spikinghash::data::generate(&trainer.run.data, Split::Train)?;
            trainer.fit(&data, Some(&common.out), print_epoch)?;
            if let Some(last) = trainer.log.last() {
                println!("trained {} epochs, final accuracy {:.4}", trainer.log.len(), last.accuracy);
            }
        }
        Command::Retrieve { checkpoint, data, bits, topn, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let model = ckpt.to_model()?;
            let db = load_or_generate(data.as_deref(), &ckpt, Split::Db)?;
            let query = load_or_generate(data.as_deref(), &ckpt, Split::Query)?;
            let (index, report) = harness::retrieve(&model, &db, &query, bits, topn)?;
            fs::create_dir_all(&out)?;
            index.save(&out.join("db_codes"))?;
            write_json(&out.join("retrieval.json"), &serde_json::to_value(&report)?)?;
            fs::write(out.join("retrieval.txt"), report.to_table())?;
            print!("{}", report.to_table());
            if report.skipped_queries > 0 {
                eprintln!("{} queries skipped: their class is absent from the database", report.skipped_queries);
            }
            if report.idcg_zero_queries > 0 {
                eprintln!("{} queries had no relevant items; their NDCG counts as 0", report.idcg_zero_queries);
            }
        }
        Command::Energy { checkpoint, data, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let model = ckpt.to_model()?;
            let samples = load_or_generate(data.as_deref(), &ckpt, Split::Query)?;
            let report = harness::energy(&model, &samples)?;
            fs::create_dir_all(&out)?;
            write_json(&out.join("energy.json"), &serde_json::to_value(&report)?)?;
            println!("MAC {:.3} pJ  AC {:.3} pJ  total {:.6e} mJ", report.mac_pj, report.ac_pj, report.total_mj);
        }
        Command::Ablate { common, variant, topn } => {
            let run = load_run(&common)?;
            let report = harness::ablate(&run, variant, topn, |name, e| {
                eprint!("{name:>10} ");
                print_epoch(e);
            })?;
            fs::create_dir_all(&common.out)?;
            write_json(&common.out.join("ablation.json"), &serde_json::to_value(&report)?)?;
            fs::write(common.out.join("ablation.txt"), report.to_table())?;
            print!("{}", report.to_table());
        }
        Command::ExportSoftMatrix { checkpoint, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let soft = ckpt.state.get("soft").ok_or_else(|| Error::Format("checkpoint has no soft similarity state".into()))?;
            let soft: spikinghash::loss::SoftSimilarity = serde_json::from_value(soft.clone())?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            write_json(&out, &soft.to_json())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
