//! Thin command-line front end over the pipeline stages.
//!
//! Exit codes: 0 success, 2 config or validation error, 3 stage-order
//! violation, 4 numerical abort, 1 anything else.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lpv::pipeline::{
    self, AblateToggle, CorpusSet, PipelineConfig, PredictMode, RunReport, SystemSpec,
};

#[derive(Parser)]
#[command(
    name = "lpv",
    about = "Word-level prosody codes: corpus synthesis, codebook training, index prediction, evaluation",
    version
)]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; omitted fields keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dot-path config overrides, e.g. --set vq.k=32 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic corpora (all four sets unless --quality is given).
    GenCorpus {
        /// One of: high, low, text, test.
        #[arg(long)]
        quality: Option<String>,
        /// Utterance count override for the selected set.
        #[arg(long)]
        n: Option<usize>,
        /// Output directory override for the selected set.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the prosody autoencoder and codebook on the high corpus.
    TrainEncoder,
    /// Quantize a corpus set to per-word code indices.
    ExtractLpv {
        /// One of: high, low, test.
        #[arg(long, default_value = "high")]
        corpus: String,
    },
    /// Masked text pretraining of the context encoder.
    PretrainText,
    /// Decoder pretraining on the low-quality corpus.
    PretrainAudio,
    /// Final decoder training on the high-quality corpus.
    Finetune,
    /// Predict code indices for a corpus set.
    Predict {
        /// One of: high, low, test.
        #[arg(long = "in", default_value = "test")]
        input: String,
        /// One of: greedy, sample, uniform.
        #[arg(long, default_value = "greedy")]
        mode: String,
        /// Softmax temperature for --mode sample.
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        /// Output name under <workspace>/lpv/.
        #[arg(long)]
        out: Option<String>,
    },
    /// Compare two prosody systems (DTW pitch distance, duration divergence).
    Evaluate {
        /// corpus:<set> or lpv:<name>:<set>.
        #[arg(long)]
        system1: String,
        /// corpus:<set> or lpv:<name>:<set>.
        #[arg(long)]
        system2: String,
        /// Proceed even when an input's recorded config hash mismatches.
        #[arg(long)]
        force: bool,
    },
    /// Paired ablation runs over several seeds.
    Ablate {
        /// One of: kmeans_init, text_pt, audio_pt, codebook_size.
        #[arg(long)]
        toggle: String,
    },
    /// Run every stage end to end, including both evaluations.
    RunAll,
}

fn load(args: &ConfigArgs) -> lpv::Result<PipelineConfig> {
    match &args.config {
        Some(path) => pipeline::load_config(path, &args.sets),
        None => pipeline::parse_config("", &args.sets),
    }
}

fn run(cli: &Cli) -> lpv::Result<Vec<RunReport>> {
    let cfg = load(&cli.config)?;
    let reports = match &cli.command {
        Command::GenCorpus { quality, n, out } => match quality {
            Some(q) => vec![pipeline::cmd_gen_corpus(
                &cfg,
                CorpusSet::parse(q)?,
                *n,
                out.as_deref(),
            )?],
            None => {
                if n.is_some() || out.is_some() {
                    return Err(lpv::Error::Config(
                        "--n and --out require --quality to name one set".into(),
                    ));
                }
                let mut all = Vec::new();
                for set in CorpusSet::ALL {
                    all.push(pipeline::cmd_gen_corpus(&cfg, set, None, None)?);
                }
                all
            }
        },
        Command::TrainEncoder => vec![pipeline::cmd_train_encoder(&cfg)?],
        Command::ExtractLpv { corpus } => {
            vec![pipeline::cmd_extract_lpv(&cfg, CorpusSet::parse(corpus)?)?]
        }
        Command::PretrainText => vec![pipeline::cmd_pretrain_text(&cfg)?],
        Command::PretrainAudio => vec![pipeline::cmd_pretrain_audio(&cfg)?],
        Command::Finetune => vec![pipeline::cmd_finetune(&cfg)?],
        Command::Predict {
            input,
            mode,
            temperature,
            out,
        } => vec![pipeline::cmd_predict(
            &cfg,
            CorpusSet::parse(input)?,
            PredictMode::parse(mode, *temperature)?,
            out.as_deref(),
        )?],
        Command::Evaluate {
            system1,
            system2,
            force,
        } => vec![pipeline::cmd_evaluate(
            &cfg,
            &SystemSpec::parse(system1)?,
            &SystemSpec::parse(system2)?,
            *force,
            "evaluate",
        )?],
        Command::Ablate { toggle } => {
            vec![pipeline::cmd_ablate(&cfg, AblateToggle::parse(toggle)?)?]
        }
        Command::RunAll => vec![pipeline::cmd_run_all(&cfg)?],
    };
    Ok(reports)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            writeln!(
                buf,
                "{} [{}] {}",
                buf.timestamp_millis(),
                record.level(),
                record.args()
            )
        })
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(reports) => {
            for r in &reports {
                println!(
                    "{}",
                    serde_json::json!({
                        "stage": r.stage,
                        "report_hash": r.report_hash,
                        "wall_ms": r.wall_ms,
                    })
                );
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
