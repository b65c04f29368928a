use anyhow::Result;
use clap::{Parser, Subcommand};
use lsrl_cli::commands::{self, BenchRequest, RlRequest};
use lsrl_cli::serve::SessionLimits;
use lsrl_cli::{Driver, RlMode, RunConfig};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "lsrl", version, about = "Latent-space RL driving pipeline")]
struct Cli {
    /// JSON run config; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact root.
    #[arg(long, global = true, env = "LSRL_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Record a frame dataset with the scripted expert or a teleop client.
    Collect {
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, value_enum)]
        driver: Option<Driver>,
        /// Keep every k-th frame (scripted driver).
        #[arg(long)]
        every_k: Option<usize>,
    },
    /// Train one or more VAE configs on a dataset.
    TrainVae {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Comma separated config ids.
        #[arg(long, value_delimiter = ',')]
        configs: Option<Vec<u8>>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train a SAC agent on encoder latents or raw pixels.
    TrainRl {
        #[arg(long, value_enum)]
        mode: Option<RlMode>,
        /// Encoder checkpoint (latent mode only).
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        eval_every: Option<usize>,
        /// Artifact name stem.
        #[arg(long)]
        tag: Option<String>,
    },
    /// Deterministic rollouts of a trained agent.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
    },
    /// Encoder FLOPs, throughput and optional energy figures.
    Bench {
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long)]
        config_id: Option<u8>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        /// Externally measured power draw.
        #[arg(long, allow_negative_numbers = true)]
        watts: Option<f64>,
        /// CSV of power samples in watts.
        #[arg(long)]
        power_log: Option<PathBuf>,
        /// Skip timing and use this per-frame latency.
        #[arg(long)]
        time_ms: Option<f64>,
    },
    /// Host the simulator for a teleoperation client.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        max_ticks: Option<u64>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cli.out_dir.as_path();
    match cli.cmd {
        Cmd::Collect { frames, driver, every_k } => {
            if let Some(k) = every_k {
                cfg.collect.every_k = k;
            }
            cfg.validate()?;
            let r = commands::collect(&cfg, out, frames.unwrap_or(cfg.collect.n_frames), driver.unwrap_or(cfg.collect.driver))?;
            println!("wrote {} frames ({} episodes) to {}", r.count, r.episodes, r.dir.display());
            if let Some(f) = r.on_road_fraction {
                println!("on-road fraction {f:.4}");
            }
        }
        Cmd::TrainVae { dataset, configs, epochs } => {
            let dataset = dataset.unwrap_or_else(|| cfg.resolve(out, &cfg.paths.dataset));
            let configs = configs.unwrap_or_else(|| cfg.vae.configs.clone());
            let rows = commands::train_vae(&cfg, out, &dataset, &configs, epochs.unwrap_or(cfg.vae.epochs))?;
            for r in rows {
                println!(
                    "config {}: {} params, val MSE {:.3}, PSNR {:.2} dB (best epoch {})",
                    r.config_id, r.param_count, r.val_mse, r.val_psnr, r.best_epoch
                );
            }
        }
        Cmd::TrainRl {
            mode,
            vae,
            episodes,
            eval_every,
            tag,
        } => {
            let req = RlRequest {
                mode: mode.unwrap_or(cfg.rl.mode),
                vae,
                episodes: episodes.unwrap_or(cfg.rl.episodes),
                eval_every: eval_every.unwrap_or(cfg.rl.eval_every),
                tag,
            };
            let r = commands::train_rl(&cfg, out, &req)?;
            println!("curve {}", r.curve.display());
            println!("checkpoint {}", r.checkpoint.display());
            if let Some(e) = r.final_eval() {
                println!("final eval reward {e:.2}");
            }
        }
        Cmd::Eval { checkpoint, vae, episodes } => {
            let (s, _) = commands::eval(&cfg, out, &checkpoint, vae.as_deref(), episodes)?;
            println!(
                "{} episodes: mean reward {:.2} (min {:.2}, max {:.2}), mean length {:.1}",
                s.episodes, s.mean_reward, s.min_reward, s.max_reward, s.mean_length
            );
        }
        Cmd::Bench {
            vae,
            config_id,
            width,
            height,
            frames,
            watts,
            power_log,
            time_ms,
        } => {
            let b = &cfg.bench;
            let req = BenchRequest {
                vae,
                config_id: config_id.unwrap_or(b.config_id),
                width: width.unwrap_or(b.width),
                height: height.unwrap_or(b.height),
                frames: frames.unwrap_or(b.frames),
                watts,
                power_log,
                time_ms,
            };
            let r = commands::bench(&cfg, out, &req)?;
            println!(
                "config {} at {}x{}: {:.3} ms/frame ({:.1} FPS), {:.2} MFLOP/frame, {:.3} GFLOP/s, energy {} J, {} GFLOPS/W",
                r.config_id,
                r.width,
                r.height,
                r.time_per_frame_ms,
                r.frame_rate,
                r.mflops_per_frame,
                r.gflops_per_s,
                r.energy_j,
                r.gflops_per_w
            );
        }
        Cmd::Serve { port, max_ticks } => {
            let r = commands::serve(
                &cfg,
                out,
                port.unwrap_or(cfg.serve.port),
                SessionLimits {
                    max_ticks,
                    max_frames: None,
                },
            )?;
            println!("wrote {} frames to {}", r.count, r.dir.display());
        }
    }
    Ok(())
}
