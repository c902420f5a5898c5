use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use facefill::train::TrainConfig;
use facefill_cli::commands::{self, EvaluateArgs, InpaintArgs, ServeArgs, TrainArgs};
use facefill_cli::service::ServiceConfig;

#[derive(Parser)]
#[command(name = "facefill", version, about = "Landmark-guided face inpainting")]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info", env = "FACEFILL_LOG")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the landmark predictor.
    TrainLandmarks {
        /// Config file of `key = value` lines.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of PNG faces with sibling JSON landmark files.
        #[arg(long)]
        data: PathBuf,
        /// Directory for checkpoints and the loss log.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a landmark checkpoint; its stored config is used.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the inpainting generator and discriminator.
    TrainInpaint {
        /// Config file of `key = value` lines.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of PNG faces with sibling JSON landmark files.
        #[arg(long)]
        data: PathBuf,
        /// Directory for checkpoints and the loss log.
        #[arg(long)]
        out: PathBuf,
        /// Continue from an inpainting checkpoint; its stored config is used.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Frozen landmark predictor, required when landmark_source = predicted.
        #[arg(long)]
        landmark_checkpoint: Option<PathBuf>,
    },
    /// Fill the masked region of one image.
    Inpaint {
        /// Face PNG at the model resolution.
        #[arg(long)]
        image: PathBuf,
        /// Mask PNG; bright pixels mark the hole.
        #[arg(long)]
        mask: PathBuf,
        /// JSON file of 68 normalized [x, y] points; skips prediction.
        #[arg(long)]
        landmarks: Option<PathBuf>,
        /// Inpainting checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Landmark checkpoint, when the inpainting checkpoint has none embedded.
        #[arg(long)]
        landmark_checkpoint: Option<PathBuf>,
        /// Output PNG.
        #[arg(long)]
        out: PathBuf,
        /// Landmark overlay PNG; defaults to `<out>_landmarks.png`.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Score a checkpoint on a directory of faces.
    Evaluate {
        /// Directory of PNG faces with sibling JSON landmark files.
        #[arg(long)]
        data: PathBuf,
        /// Inpainting checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Landmark checkpoint, when the inpainting checkpoint has none embedded.
        #[arg(long)]
        landmark_checkpoint: Option<PathBuf>,
        /// Condition on annotated landmarks instead of predicted ones.
        #[arg(long)]
        ground_truth_landmarks: bool,
        /// VGG-19 safetensors used as the FID feature backbone.
        #[arg(long)]
        vgg: Option<PathBuf>,
        /// Seed for the block masks.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the report as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write an augmented copy of a labeled dataset.
    Augment {
        /// Directory of PNG faces with sibling JSON landmark files.
        #[arg(long)]
        data: PathBuf,
        /// Inpainting checkpoint used to fill the masks.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Epoch seed; different seeds give different masks.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the HTTP inference service.
    Serve {
        /// Inpainting checkpoint; without one the service answers 503.
        #[arg(long, env = "FACEFILL_CHECKPOINT")]
        checkpoint: Option<PathBuf>,
        /// Landmark checkpoint, when the inpainting checkpoint has none embedded.
        #[arg(long, env = "FACEFILL_LANDMARK_CHECKPOINT")]
        landmark_checkpoint: Option<PathBuf>,
        /// Listen address.
        #[arg(long, env = "FACEFILL_ADDR", default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Largest accepted request body.
        #[arg(long, env = "FACEFILL_MAX_BODY_BYTES", default_value_t = 16 * 1024 * 1024)]
        max_body_bytes: usize,
        /// Requests running inference at once.
        #[arg(long, env = "FACEFILL_MAX_CONCURRENT", default_value_t = 2)]
        max_concurrent: usize,
    },
    /// Write a synthetic labeled face dataset.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of faces.
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Side length in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the effective training config, after environment overrides.
    PrintConfig {
        /// Config file of `key = value` lines.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Start from the 64×64 reduced-width profile.
        #[arg(long)]
        desk: bool,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::TrainLandmarks {
            config,
            data,
            out,
            resume,
        } => commands::train_landmarks(&TrainArgs {
            config: config.as_deref(),
            data: &data,
            out: &out,
            resume: resume.as_deref(),
            landmark_checkpoint: None,
        }),
        Command::TrainInpaint {
            config,
            data,
            out,
            resume,
            landmark_checkpoint,
        } => commands::train_inpaint(&TrainArgs {
            config: config.as_deref(),
            data: &data,
            out: &out,
            resume: resume.as_deref(),
            landmark_checkpoint: landmark_checkpoint.as_deref(),
        }),
        Command::Inpaint {
            image,
            mask,
            landmarks,
            checkpoint,
            landmark_checkpoint,
            out,
            overlay,
        } => commands::inpaint(&InpaintArgs {
            image: &image,
            mask: &mask,
            landmarks: landmarks.as_deref(),
            checkpoint: &checkpoint,
            landmark_checkpoint: landmark_checkpoint.as_deref(),
            out: &out,
            overlay: overlay.as_deref(),
        }),
        Command::Evaluate {
            data,
            checkpoint,
            landmark_checkpoint,
            ground_truth_landmarks,
            vgg,
            seed,
            out,
        } => {
            let table = commands::evaluate_cmd(&EvaluateArgs {
                data: &data,
                checkpoint: &checkpoint,
                landmark_checkpoint: landmark_checkpoint.as_deref(),
                ground_truth_landmarks,
                vgg: vgg.as_deref(),
                seed,
                out: out.as_deref(),
            })?;
            print!("{table}");
            Ok(())
        }
        Command::Augment {
            data,
            checkpoint,
            out,
            seed,
        } => {
            let n = commands::augment(&data, &checkpoint, &out, seed)?;
            println!("wrote {n} samples to {}", out.display());
            Ok(())
        }
        Command::Serve {
            checkpoint,
            landmark_checkpoint,
            addr,
            max_body_bytes,
            max_concurrent,
        } => commands::serve(&ServeArgs {
            checkpoint: checkpoint.as_deref(),
            landmark_checkpoint: landmark_checkpoint.as_deref(),
            addr,
            service: ServiceConfig {
                max_body_bytes,
                max_concurrent,
            },
        }),
        Command::Synth {
            out,
            count,
            size,
            seed,
        } => commands::synth(&out, count, size, seed),
        Command::PrintConfig { config, desk } => {
            let cfg = match (config, desk) {
                (Some(p), _) => commands::load_config(Some(&p))?,
                (None, true) => TrainConfig::desk(),
                (None, false) => TrainConfig::default(),
            };
            print!("{}", cfg.to_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp_secs().init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(ToString::to_string).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}
