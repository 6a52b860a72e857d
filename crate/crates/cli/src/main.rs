use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use avsqa_cli::{cmd_dump_attention, cmd_eval, cmd_predict, cmd_synth, cmd_train, CliError, RunConfig};
use avsqa_core::datagen::Split;

#[derive(Parser)]
#[command(name = "avsqa", version, about = "Audio-visual speech quality and intelligibility assessment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds both corpus generation and training
    #[arg(long)]
    seed: Option<u64>,
    /// Output location
    #[arg(long)]
    out: PathBuf,
    /// `section.key=value` overrides, applied after the file
    overrides: Vec<String>,
}

impl Common {
    fn config(&self) -> Result<RunConfig, CliError> {
        let mut c = RunConfig::load(self.config.as_deref(), &self.overrides)?;
        if let Some(s) = self.seed {
            c.set_seed(s);
        }
        Ok(c)
    }
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ModalityArg {
    AudioOnly,
    Multimodal,
}

#[derive(Clone, Copy, ValueEnum)]
enum SubsetArg {
    Train,
    Validation,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the corpus and its manifest
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a manifest
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Shorthand for model.modality
        #[arg(long, value_enum)]
        modality: Option<ModalityArg>,
        /// Continue from last.ckpt in the output directory
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on a manifest subset
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        subset: SubsetArg,
    },
    /// Score one WAV file (and its lip video for multimodal checkpoints)
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        video: Option<PathBuf>,
    },
    /// Export attention weights and attention outputs of one utterance
    DumpAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        utterance_id: String,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { common } => {
            let out = cmd_synth(&common.config()?, &common.out)?;
            println!("{}", out.summary);
            println!("manifest: {} ({} records)", out.manifest.display(), out.records);
        }
        Command::Train { mut common, manifest, modality, resume } => {
            if let Some(m) = modality {
                let v = match m {
                    ModalityArg::AudioOnly => "audio_only",
                    ModalityArg::Multimodal => "multimodal",
                };
                common.overrides.push(format!("model.modality={v}"));
            }
            let out = cmd_train(&common.config()?, &manifest, &common.out, resume)?;
            println!("epochs: {}", out.epochs);
            if let Some(v) = out.best_val_loss {
                println!("best validation loss: {v}");
            }
            println!("checkpoint: {}", out.best.display());
        }
        Command::Eval { common, checkpoint, manifest, subset } => {
            common.config()?;
            let split = match subset {
                SubsetArg::Train => Split::Train,
                SubsetArg::Validation => Split::Validation,
                SubsetArg::Test => Split::Test,
            };
            let out = cmd_eval(&checkpoint, &manifest, split, &common.out)?;
            print!("{}", out.summary_csv);
            println!("predictions: {} ({} utterances)", out.predictions.display(), out.rows);
        }
        Command::Predict { common, checkpoint, wav, video } => {
            common.config()?;
            let (scores, _) = cmd_predict(&checkpoint, &wav, video.as_deref(), Some(&common.out))?;
            println!("{}", serde_json::to_string_pretty(&scores).expect("scores serialize"));
        }
        Command::DumpAttention { common, checkpoint, manifest, utterance_id } => {
            common.config()?;
            let heads = cmd_dump_attention(&checkpoint, &manifest, &utterance_id, &common.out)?;
            let t = heads.first().map_or(0, |h| h.len());
            println!("{}: {} head(s), T = {t}", common.out.display(), heads.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
