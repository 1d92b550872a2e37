use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sage::commands::{self, MetricKind};
use sage::config::StylizerKind;
use sage::service::{self, ServiceConfig};
use sage::Error;

/// Semantic-aware 3D-aware portrait drawing generator.
///
/// Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure
/// (non-finite loss).
#[derive(Parser)]
#[command(name = "sage", version)]
struct Cli {
    /// Compute device; only `cpu` is available.
    #[arg(long, env = "SAGE_DEVICE", default_value = "cpu", global = true)]
    device: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train stage 1 (photos and masks) or stage 2 (drawings).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stage: u8,
        /// Stage-1 checkpoint for stage 2, or a partial stage-1 run to continue.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Comma-separated: end_to_end, no_translator, no_spade.
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Write drawings named {seed}_{view}.png.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, allow_hyphen_values = true)]
        yaw: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        pitch: Option<f64>,
        /// Views per seed; more than one spreads the yaws evenly over the pose bounds.
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        emit_photo: bool,
        #[arg(long)]
        emit_mask: bool,
    },
    /// Apply semantic mask edits (JSON list of edit ops) and re-translate.
    Edit {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, allow_hyphen_values = true)]
        yaw: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        pitch: Option<f64>,
        #[arg(long)]
        edits: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Content from one checkpoint, drawing style from another.
    Transfer {
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        style: PathBuf,
        #[arg(long)]
        content_seed: u64,
        #[arg(long)]
        style_seed: u64,
        #[arg(long, allow_hyphen_values = true)]
        yaw: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        pitch: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Frames between two identities and poses.
    Interpolate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, num_args = 2, value_names = ["SEED1", "SEED2"])]
        seeds: Vec<u64>,
        /// Start pose as yaw pitch.
        #[arg(long, num_args = 2, allow_hyphen_values = true, default_values_t = [0.0, 0.0])]
        from: Vec<f64>,
        /// End pose as yaw pitch.
        #[arg(long, num_args = 2, allow_hyphen_values = true, default_values_t = [0.0, 0.0])]
        to: Vec<f64>,
        #[arg(long, default_value_t = 16)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two image directories; prints a JSON report.
    Metrics {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        real: PathBuf,
        #[arg(long, value_enum)]
        metric: MetricKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report path; defaults to metrics_{metric}.json inside --gen.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// SIFID of generated drawings at evenly spaced yaws, as CSV.
    Curve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        real: PathBuf,
        #[arg(long, default_value_t = 7)]
        views: usize,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn photos with masks into drawings with masks.
    Augment {
        #[arg(long)]
        photos: Option<PathBuf>,
        /// Synthetic photos to generate when --photos is absent.
        #[arg(long, default_value_t = 0)]
        synthetic: usize,
        #[arg(long, default_value_t = 128)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "edge")]
        stylizer: Stylizer,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP studio service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long, default_value_t = service::DEFAULT_MAX_SESSIONS)]
        max_sessions: usize,
        /// Allowed CORS origin; any origin when omitted.
        #[arg(long)]
        cors_origin: Option<String>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Stylizer {
    Edge,
    Identity,
}

fn run(cli: Cli, argv: Vec<String>) -> Result<(), Error> {
    if cli.device != "cpu" {
        return Err(Error::Config(format!("unsupported device `{}` (only `cpu`)", cli.device)));
    }
    match cli.command {
        Command::Train {
            config,
            stage,
            resume,
            ablation,
        } => {
            let out = commands::train(
                &commands::TrainArgs {
                    config,
                    stage,
                    resume,
                    ablation,
                },
                argv,
            )?;
            println!("{}", out.checkpoint.display());
        }
        Command::Generate {
            ckpt,
            seed,
            yaw,
            pitch,
            count,
            out,
            emit_photo,
            emit_mask,
        } => {
            let files = commands::generate(
                &commands::GenerateArgs {
                    ckpt,
                    seed,
                    yaw,
                    pitch,
                    count,
                    out,
                    emit_photo,
                    emit_mask,
                },
                argv,
            )?;
            files.iter().for_each(|f| println!("{}", f.display()));
        }
        Command::Edit {
            ckpt,
            seed,
            yaw,
            pitch,
            edits,
            out,
        } => {
            let files = commands::edit(
                &commands::EditArgs {
                    ckpt,
                    seed,
                    yaw,
                    pitch,
                    edits,
                    out,
                },
                argv,
            )?;
            files.iter().for_each(|f| println!("{}", f.display()));
        }
        Command::Transfer {
            content,
            style,
            content_seed,
            style_seed,
            yaw,
            pitch,
            out,
        } => {
            let files = commands::transfer(
                &commands::TransferArgs {
                    content,
                    style,
                    content_seed,
                    style_seed,
                    yaw,
                    pitch,
                    out,
                },
                argv,
            )?;
            files.iter().for_each(|f| println!("{}", f.display()));
        }
        Command::Interpolate {
            ckpt,
            seeds,
            from,
            to,
            steps,
            out,
        } => {
            let files = commands::interpolate(
                &commands::InterpolateArgs {
                    ckpt,
                    seeds: (seeds[0], seeds[1]),
                    from: (from[0], from[1]),
                    to: (to[0], to[1]),
                    steps,
                    out,
                },
                argv,
            )?;
            files.iter().for_each(|f| println!("{}", f.display()));
        }
        Command::Metrics {
            gen,
            real,
            metric,
            seed,
            out,
        } => {
            let report = commands::metrics(&commands::MetricsArgs {
                gen,
                real,
                metric,
                seed,
                out,
            })?;
            println!("{}", report.to_json());
        }
        Command::Curve {
            ckpt,
            real,
            views,
            samples,
            seed,
            out,
        } => {
            let rows = commands::curve(&commands::CurveArgs {
                ckpt,
                real,
                views,
                samples,
                seed,
                out,
            })?;
            println!("pose_index,yaw,pitch,sifid");
            for r in rows {
                println!("{},{},{},{}", r.pose_index, r.yaw, r.pitch, r.sifid);
            }
        }
        Command::Augment {
            photos,
            synthetic,
            resolution,
            seed,
            stylizer,
            out,
        } => {
            let stylizer = match stylizer {
                Stylizer::Edge => StylizerKind::Edge,
                Stylizer::Identity => StylizerKind::Identity,
            };
            let m = commands::augment(
                &commands::AugmentArgs {
                    photos,
                    synthetic,
                    resolution,
                    seed,
                    stylizer,
                    out,
                },
                argv,
            )?;
            println!("{}", serde_json::to_string_pretty(&m).expect("manifest serializes"));
        }
        Command::Serve {
            port,
            host,
            ckpt_dir,
            max_sessions,
            cors_origin,
        } => {
            let cfg = ServiceConfig {
                ckpt_dir,
                max_sessions,
                cors_origin,
            };
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Config(e.to_string()))?;
            eprintln!("listening on http://{host}:{port}");
            rt.block_on(service::serve(cfg, &host, port)).map_err(|e| Error::Config(e.to_string()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
