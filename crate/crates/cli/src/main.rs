//! `imitkd`: data generation, teacher training, distillation and analysis runs.

mod commands;
mod config;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use imitkd_core::data::Split;
use imitkd_core::trainer::Variant;

use config::Config;

#[derive(Parser)]
#[command(name = "imitkd", version, about = "Imitation-based knowledge distillation for sequence models")]
struct Cli {
    /// TOML configuration; omitted sections use defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory for all outputs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (overrides the config).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic translation corpus.
    GenData,
    /// Train the teacher on the data corpus.
    TrainTeacher {
        #[arg(long)]
        data: PathBuf,
    },
    /// Replace training targets with teacher beam outputs.
    BuildSeqkd {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Train a student with one of the distillation variants.
    Distill {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Teacher-labelled training file from `build-seqkd`.
        #[arg(long)]
        seqkd: Option<PathBuf>,
        /// e.g. Vanilla, SeqKD, ImitKD, ImitKD*, ImitKD+Full.
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Fine-tune a student on the teacher beam entries closest to the references.
    Seqinter {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
    },
    /// Write detokenized hypotheses for one split.
    Decode {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Score a model on one split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// BLEU by hypothesis length for one or more models.
    AnalyzeLength {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Per-sequence decoding time of student and teacher.
    Bench {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Behavioral cloning vs DAgger mistake growth on the corridor task.
    DaggerSim,
    /// Collect finished runs into a comparison table.
    Report {
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = Config::load(cli.config.as_deref())?.with_overrides(cli.seed, cli.threads);
    let out = cli.out.context("--out <DIR> is required")?;
    commands::prepare_out(&out, &cfg)?;
    match cli.command {
        Command::GenData => {
            let mut cfg = cfg;
            if let Some(s) = cli.seed {
                cfg.data.seed = s;
            }
            commands::gen_data(&cfg, &out)
        }
        Command::TrainTeacher { data } => commands::train_teacher(&cfg, &data, &out),
        Command::BuildSeqkd { data, teacher } => commands::build_seqkd(&cfg, &data, &teacher, &out),
        Command::Distill { data, teacher, seqkd, variant } => {
            commands::distill(&cfg, &data, teacher.as_deref(), seqkd.as_deref(), variant, &out)
        }
        Command::Seqinter { data, teacher, student } => commands::seqinter(&cfg, &data, &teacher, &student, &out),
        Command::Decode { data, model, split } => commands::decode(&cfg, &data, &model, split.into(), &out),
        Command::Evaluate { data, model, split } => commands::evaluate_cmd(&cfg, &data, &model, split.into(), &out),
        Command::AnalyzeLength { data, models, split } => commands::analyze_length(&cfg, &data, &models, split.into(), &out),
        Command::Bench { data, student, teacher } => commands::bench(&cfg, &data, &student, &teacher, &out),
        Command::DaggerSim => commands::dagger_sim(&cfg, &out),
        Command::Report { runs } => commands::report(&runs, &out),
    }
}
