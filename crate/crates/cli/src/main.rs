use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctxbias::io::KeyValues;
use ctxbias::pipeline::{DecodeStage, EvaluateStage, ScoreStage, SynthStage, TrainStage};

/// Phrase biasing pipeline: synthetic data, decoder training, phrase
/// scoring and filtering, biased decoding and error-rate evaluation.
///
/// Every setting can come from a `key = value` file given with `--config`;
/// flags and `--set key=value` override the file.
#[derive(Parser)]
#[command(name = "ctxbias", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` settings file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Extra setting, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_pair)]
    set: Vec<(String, String)>,
}

fn parse_pair(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus, vocabulary and biasing lists.
    Synth {
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the biasing decoder and write a checkpoint and loss trace.
    Train {
        #[arg(long, value_name = "JSONL")]
        corpus: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        vocab: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "CSV")]
        trace: Option<PathBuf>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Score every phrase and the empty phrase; write a TSV with kept flags.
    Score {
        #[arg(long, value_name = "JSONL")]
        corpus: Option<PathBuf>,
        #[arg(long, value_name = "TXT")]
        phrases: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, value_name = "TSV")]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Same as `score`; the TSV's kept column is the filter decision.
    Filter {
        #[arg(long, value_name = "JSONL")]
        corpus: Option<PathBuf>,
        #[arg(long, value_name = "TXT")]
        phrases: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, value_name = "TSV")]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Filter phrases and run biased beam search over the toy base scorer.
    Decode {
        #[arg(long, value_name = "JSONL")]
        corpus: Option<PathBuf>,
        #[arg(long, value_name = "TXT")]
        phrases: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        synth_config: Option<PathBuf>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long, value_name = "JSONL")]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// WER, U-WER and B-WER of decode output against reference transcripts.
    Evaluate {
        #[arg(long = "ref", value_name = "JSONL")]
        reference: Option<PathBuf>,
        #[arg(long = "hyp", value_name = "JSONL")]
        hypotheses: Option<PathBuf>,
        #[arg(long, value_name = "TXT")]
        phrases: Option<PathBuf>,
        #[arg(long, value_name = "JSON")]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn settings(common: &Common, flags: Vec<(&str, Option<String>)>) -> ctxbias::Result<KeyValues> {
    let mut kv = match &common.config {
        Some(p) => KeyValues::read(p)?,
        None => KeyValues::default(),
    };
    for (k, v) in &common.set {
        kv.set(k, v.clone());
    }
    for (k, v) in flags {
        if let Some(v) = v {
            kv.set(k, v);
        }
    }
    Ok(kv)
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

fn p(v: &Option<PathBuf>) -> Option<String> {
    v.as_ref().map(|p| p.display().to_string())
}

enum Failure {
    Usage(ctxbias::Error),
    Runtime(ctxbias::Error),
}

/// Settings problems are usage errors; missing or unreadable files are not.
fn usage<T>(r: ctxbias::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| match e {
        ctxbias::Error::Io { .. } => Failure::Runtime(e),
        e => Failure::Usage(e),
    })
}

fn runtime<T>(r: ctxbias::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Runtime)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth {
            out_dir,
            seed,
            common,
        } => {
            let kv = usage(settings(&common, vec![("out_dir", p(&out_dir)), ("seed", s(&seed))]))?;
            let stage = usage(SynthStage::from_settings(kv))?;
            runtime(stage.run())
        }
        Command::Train {
            corpus,
            vocab,
            checkpoint,
            trace,
            beta,
            epochs,
            seed,
            common,
        } => {
            let kv = usage(settings(
                &common,
                vec![
                    ("corpus", p(&corpus)),
                    ("vocab", p(&vocab)),
                    ("checkpoint", p(&checkpoint)),
                    ("trace", p(&trace)),
                    ("beta", s(&beta)),
                    ("epochs", s(&epochs)),
                    ("seed", s(&seed)),
                ],
            ))?;
            let stage = usage(TrainStage::from_settings(kv))?;
            runtime(stage.run(|e| {
                eprintln!(
                    "epoch {:>3}  L_log {:.4}  L_disc {:.4}  combined {:.4}",
                    e.epoch, e.log, e.disc, e.combined
                )
            }))
            .map(|_| ())
        }
        Command::Score {
            corpus,
            phrases,
            checkpoint,
            tol,
            out,
            common,
        }
        | Command::Filter {
            corpus,
            phrases,
            checkpoint,
            tol,
            out,
            common,
        } => {
            let kv = usage(settings(
                &common,
                vec![
                    ("corpus", p(&corpus)),
                    ("phrases", p(&phrases)),
                    ("checkpoint", p(&checkpoint)),
                    ("tol", s(&tol)),
                    ("out", p(&out)),
                ],
            ))?;
            let stage = usage(ScoreStage::from_settings(kv))?;
            runtime(stage.run()).map(|_| ())
        }
        Command::Decode {
            corpus,
            phrases,
            checkpoint,
            synth_config,
            tol,
            beam,
            out,
            common,
        } => {
            let kv = usage(settings(
                &common,
                vec![
                    ("corpus", p(&corpus)),
                    ("phrases", p(&phrases)),
                    ("checkpoint", p(&checkpoint)),
                    ("synth_config", p(&synth_config)),
                    ("tol", s(&tol)),
                    ("beam", s(&beam)),
                    ("out", p(&out)),
                ],
            ))?;
            let stage = usage(DecodeStage::from_settings(kv))?;
            runtime(stage.run()).map(|_| ())
        }
        Command::Evaluate {
            reference,
            hypotheses,
            phrases,
            out,
            common,
        } => {
            let kv = usage(settings(
                &common,
                vec![
                    ("ref", p(&reference)),
                    ("hyp", p(&hypotheses)),
                    ("phrases", p(&phrases)),
                    ("out", p(&out)),
                ],
            ))?;
            let stage = usage(EvaluateStage::from_settings(kv))?;
            let report = runtime(stage.run())?;
            let fmt = |r: Option<f64>| r.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            println!(
                "WER {}  U-WER {}  B-WER {}",
                fmt(report.overall.wer),
                fmt(report.overall.u_wer),
                fmt(report.overall.b_wer)
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}\n\nSee `ctxbias <command> --help`.");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
