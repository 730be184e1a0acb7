use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use contee::arguments::ArgumentModel;
use contee::config::{RunConfig, Strategy};
use contee::corpus::{generate_synthetic, load_corpus, power_law_counts, write_corpus, SyntheticConfig};
use contee::detection::DetectionModel;
use contee::eval::{argument_f1, detection_f1, load_predictions, write_predictions};
use contee::pipeline::{run, sweep};
use contee::{Error, Result};

#[derive(Parser)]
#[command(name = "contee", version, about = "Continual event detection and argument extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate over every stage of the task stream.
    Run {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Repeat `run` over several permutation seeds and aggregate.
    Sweep {
        #[arg(long, default_value_t = 6)]
        permutations: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score a predictions file against a gold corpus.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        gold: PathBuf,
    },
    /// Write a synthetic corpus and its schema.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        schema_out: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        types: usize,
        #[arg(long, default_value_t = 200)]
        max_count: usize,
        #[arg(long, default_value_t = 5)]
        min_count: usize,
        #[arg(long, default_value_t = 200)]
        vocab: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.3)]
        multi_type_prob: f64,
        #[arg(long)]
        no_arguments: bool,
    },
    /// Tag a corpus with a saved detection (and optionally argument) model.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        arguments: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Command-line overrides of the configuration file.
#[derive(Args)]
struct Overrides {
    /// TOML configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    synthetic_types: Option<usize>,
    #[arg(long)]
    synthetic_max_count: Option<usize>,
    #[arg(long)]
    synthetic_min_count: Option<usize>,
    #[arg(long)]
    synthetic_vocab: Option<usize>,
    #[arg(long)]
    synthetic_seed: Option<u64>,
    #[arg(long)]
    synthetic_multi_type_prob: Option<f64>,
    #[arg(long)]
    synthetic_trigger_words: Option<usize>,
    #[arg(long)]
    synthetic_arguments: Option<bool>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    memory_size: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    attn_layers: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    arguments: Option<bool>,
    #[arg(long)]
    arg_lr: Option<f64>,
    #[arg(long)]
    arg_epochs: Option<usize>,
    #[arg(long)]
    arg_feature_dim: Option<usize>,
    #[arg(long)]
    arg_gru_hidden: Option<usize>,
    #[arg(long, value_enum)]
    strategy: Option<Strategy>,
    #[arg(long)]
    da: Option<bool>,
    #[arg(long)]
    afd: Option<bool>,
    #[arg(long)]
    spd: Option<bool>,
    #[arg(long)]
    pkd: Option<bool>,
    #[arg(long)]
    pkt: Option<bool>,
    #[arg(long)]
    permutation_seed: Option<u64>,
    #[arg(long)]
    model_seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

macro_rules! apply {
    ($cfg:ident, $o:ident; $($field:ident),* $(,)?) => {
        $(if let Some(v) = $o.$field { $cfg.$field = v; })*
    };
}

impl Overrides {
    fn resolve(self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if self.corpus.is_some() {
            cfg.corpus = self.corpus.clone();
        }
        if self.schema.is_some() {
            cfg.schema = self.schema.clone();
        }
        let o = self;
        apply!(cfg, o;
            synthetic_types, synthetic_max_count, synthetic_min_count, synthetic_vocab, synthetic_seed,
            synthetic_multi_type_prob, synthetic_trigger_words, synthetic_arguments, k, memory_size, tau, alpha, beta, attn_layers,
            dropout, lr, batch_size, feature_dim, epochs, warmup_epochs, n_layers, n_heads, hidden_dim,
            ffn_dim, max_len, arguments, arg_lr, arg_epochs, arg_feature_dim, arg_gru_hidden, strategy,
            da, afd, spd, pkd, pkt, permutation_seed, model_seed, output_dir,
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn predict_file(checkpoint: &Path, arguments: Option<&Path>, input: &Path, out: &Path) -> Result<()> {
    let model = DetectionModel::load(checkpoint)?;
    let args = arguments.map(ArgumentModel::load).transpose()?;
    let (_, sentences) = load_corpus(input, None)?;
    let mut preds = model.predict_all(&sentences)?;
    if let Some(a) = &args {
        for (p, s) in preds.iter_mut().zip(&sentences) {
            p.events = a.extract_arguments(&s.tokens, &p.events)?;
        }
    }
    write_predictions(out, &preds)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { overrides } => {
            let outcome = run(&overrides.resolve()?)?;
            print_json(&outcome.report)?;
            eprintln!("run written to {}", outcome.dir.display());
        }
        Command::Sweep {
            permutations,
            overrides,
        } => {
            let report = sweep(&overrides.resolve()?, permutations)?;
            print_json(&report)?;
            if !report.failures.is_empty() {
                return Err(Error::Validation(format!("{} permutation(s) failed", report.failures.len())));
            }
        }
        Command::Evaluate { predictions, gold } => {
            let preds = load_predictions(&predictions)?;
            let (_, gold) = load_corpus(&gold, None)?;
            let det = detection_f1(&preds, &gold)?;
            let args = argument_f1(&preds, &gold)?;
            print_json(&serde_json::json!({ "detection": det, "arguments": args }))?;
        }
        Command::GenData {
            out,
            schema_out,
            types,
            max_count,
            min_count,
            vocab,
            seed,
            multi_type_prob,
            no_arguments,
        } => {
            if min_count > max_count {
                return Err(Error::InvalidArgument("--min-count exceeds --max-count".into()));
            }
            let mut cfg = SyntheticConfig::new(power_law_counts(types, max_count, min_count), vocab, seed);
            cfg.multi_type_prob = multi_type_prob;
            cfg.with_arguments = !no_arguments;
            let (schema, sentences) = generate_synthetic(&cfg)?;
            write_corpus(&out, &sentences)?;
            if let Some(p) = schema_out {
                schema.save(&p)?;
            }
            eprintln!("{} sentences, {} event types", sentences.len(), schema.event_types.len());
        }
        Command::Predict {
            checkpoint,
            arguments,
            input,
            out,
        } => predict_file(&checkpoint, arguments.as_deref(), &input, &out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}
