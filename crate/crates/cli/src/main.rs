use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fusionnet_client::Client;
use fusionnet_core::api::{AugmentRequest, EvaluateRequest, GradcheckRequest, PredictRequest, TrainRequest};
use fusionnet_core::metrics::{EvalConfig, ScoreReport};
use fusionnet_core::pipeline::synthetic::write_corpus;
use fusionnet_core::pipeline::{AugmentConfig, TrainConfig};
use tracing_subscriber::EnvFilter;

/// Membrane segmentation with a fully residual encoder-decoder network.
///
/// Every command runs through the HTTP service: the one given by --server,
/// or otherwise a private instance started inside this process.
#[derive(Debug, Parser)]
#[command(name = "fusionnet", version)]
struct Cli {
    /// Base URL of a running service, e.g. http://127.0.0.1:7878
    #[arg(long, global = true, env = "FUSIONNET_SERVER")]
    server: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network and write a checkpoint
    Train {
        /// TOML training config
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        /// Dataset manifest
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to write
        #[arg(long)]
        out: PathBuf,
        /// Continue training from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print only the summary, not every step
        #[arg(long, short)]
        quiet: bool,
    },
    /// Write probability maps for an image or every image of a manifest
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        /// Image file or manifest (.toml)
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Single forward pass instead of averaging the eight orientations
        #[arg(long)]
        no_tta: bool,
    },
    /// Score probability maps against the labels of a manifest
    Evaluate {
        /// Directory of probability maps named like the manifest images
        #[arg(long)]
        pred: PathBuf,
        /// Manifest with truth labels
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 2)]
        median_radius: usize,
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
        /// Skip the boundary thinning pass
        #[arg(long)]
        no_thinning: bool,
        /// Also write the full report as JSON
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Materialize the augmented training samples of a dataset
    Augment {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Take the augmentation settings from this training config
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic cell-membrane corpus with a manifest
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the HTTP service in the foreground
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: SocketAddr,
    },
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).with_context(|| format!("cannot resolve {}", p.display()))
}

fn scores(r: &ScoreReport) -> String {
    format!("v_rand={:.9} v_info={:.9} v_dice={:.9}", r.v_rand, r.v_info, r.v_dice)
}

async fn connect(server: Option<String>) -> Result<Client> {
    let base = match server {
        Some(url) => url,
        None => {
            let addr = fusionnet_server::spawn(([127, 0, 0, 1], 0).into())
                .await
                .context("cannot start the embedded service")?;
            format!("http://{addr}")
        }
    };
    let client = Client::new(base);
    client
        .health()
        .await
        .with_context(|| format!("service at {} is not reachable", client.base_url()))?;
    Ok(client)
}

async fn run(cli: Cli) -> Result<ExitCode> {
    if let Command::Serve { bind } = cli.command {
        let listener = tokio::net::TcpListener::bind(bind)
            .await
            .with_context(|| format!("cannot bind {bind}"))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        fusionnet_server::serve(listener).await?;
        return Ok(ExitCode::SUCCESS);
    }
    if let Command::Synth { out, count, size, seed } = cli.command {
        let manifest = write_corpus(&out, count, size, seed)?;
        println!("samples={} manifest={}", manifest.len(), out.join("manifest.toml").display());
        return Ok(ExitCode::SUCCESS);
    }
    let client = connect(cli.server).await?;
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            resume,
            quiet,
        } => {
            let config = match &config {
                Some(path) => TrainConfig::load(path)?,
                None => TrainConfig::default(),
            };
            let req = TrainRequest {
                config,
                data: absolute(&data)?,
                out: absolute(&out)?,
                resume: resume.as_deref().map(absolute).transpose()?,
            };
            let job = client.start_training(&req).await?.job;
            let outcome = client
                .wait_training(
                    job,
                    |phase, total| eprintln!("phase: {phase} ({total} steps)"),
                    |rec| {
                        if !quiet {
                            println!("step={} epoch={} loss={:.9}", rec.step, rec.epoch, rec.loss);
                        }
                    },
                )
                .await?;
            for f in &outcome.folds {
                println!("fold={} held_out={} {}", f.fold, f.validation.len(), scores(&f.mean));
            }
            if let Some(mean) = ScoreReport::mean(&outcome.folds.iter().map(|f| f.mean.clone()).collect::<Vec<_>>()) {
                println!("cross_validation {}", scores(&mean));
            }
            println!(
                "checkpoint={} steps={} final_loss={}",
                outcome.checkpoint.display(),
                outcome.steps,
                outcome.final_loss.map_or("none".into(), |l| format!("{l:.9}"))
            );
        }
        Command::Predict {
            ckpt,
            input,
            out,
            no_tta,
        } => {
            let resp = client
                .predict(&PredictRequest {
                    ckpt: absolute(&ckpt)?,
                    input: absolute(&input)?,
                    out: absolute(&out)?,
                    tta: !no_tta,
                })
                .await?;
            for f in &resp.files {
                println!("{} -> {}", f.input.display(), f.output.display());
            }
        }
        Command::Evaluate {
            pred,
            truth,
            median_radius,
            threshold,
            no_thinning,
            report,
        } => {
            let resp = client
                .evaluate(&EvaluateRequest {
                    pred: absolute(&pred)?,
                    truth: absolute(&truth)?,
                    config: EvalConfig {
                        threshold,
                        median_radius,
                        thinning: !no_thinning,
                    },
                })
                .await?;
            for img in &resp.images {
                println!("image={} {}", img.name, scores(&img.report));
            }
            println!("mean images={} {}", resp.images.len(), scores(&resp.mean));
            if let Some(path) = report {
                let text = serde_json::to_string_pretty(&resp)?;
                std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
            }
        }
        Command::Augment {
            data,
            out,
            seed,
            config,
        } => {
            let augmentation = match &config {
                Some(path) => TrainConfig::load(path)?.augmentation,
                None => AugmentConfig::default(),
            };
            let resp = client
                .augment(&AugmentRequest {
                    data: absolute(&data)?,
                    out: absolute(&out)?,
                    seed,
                    augmentation,
                })
                .await?;
            println!("samples={} manifest={}", resp.samples, resp.manifest.display());
        }
        Command::Gradcheck { trials, seed } => {
            let resp = client.gradcheck(&GradcheckRequest { trials, seed }).await?;
            for r in &resp.reports {
                println!(
                    "{} op={} trials={} max_rel_error={:.3e} tolerance={:.0e}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.op,
                    r.trials,
                    r.max_rel_error,
                    r.tolerance
                );
            }
            println!("seconds={:.2}", resp.seconds);
            if !resp.passed {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Serve { .. } | Command::Synth { .. } => unreachable!("handled above"),
    }
    Ok(ExitCode::SUCCESS)
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    let default = if matches!(cli.command, Command::Serve { .. }) { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default)))
        .with_writer(std::io::stderr)
        .init();
    match run(cli).await {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
