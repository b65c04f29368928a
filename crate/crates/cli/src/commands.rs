//! One function per subcommand. Each takes the resolved run config and the
//! output directory, writes its artifacts and returns a summary.

use crate::config::{Driver, RlMode, RunConfig};
use crate::output::{read_csv, write_csv, write_grid, write_json};
use crate::serve::{Server, SessionLimits};
use anyhow::{Context, Result};
use lsrl_core::bench::{energy_accounting, flop_count, measure_throughput, BenchRow, ThroughputReport};
use lsrl_core::datastore::{self, FrameDataset, FrameSource};
use lsrl_core::sac::{self, EpisodeRecord, ObsMode, ObsSpec, Observer, TrainingOptions};
use lsrl_core::sim::{collect_expert, config_hash};
use lsrl_core::vae::{split_indices, train_vae as fit_vae};
use lsrl_core::{Error, Frame, Vae, VaeConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq)]
pub struct CollectReport {
    pub dir: PathBuf,
    pub count: usize,
    pub episodes: usize,
    /// Scripted runs only.
    pub on_road_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CteRow {
    pub frame: usize,
    pub abs_cte: f64,
}

pub fn collect(cfg: &RunConfig, out: &Path, n_frames: usize, driver: Driver) -> Result<CollectReport> {
    let dir = cfg.resolve(out, &cfg.paths.dataset);
    let spec = cfg.track_spec()?;
    let hash = config_hash(&spec, &cfg.sim);
    match driver {
        Driver::Scripted => {
            let mut env = cfg.env()?;
            let run = collect_expert(&mut env, &cfg.collect.expert, n_frames, cfg.collect.every_k, cfg.seed)?;
            let ds = FrameDataset::from_frames(&run.frames, FrameSource::Scripted, hash)?;
            datastore::write_dataset(&ds, &dir)?;
            let rows: Vec<CteRow> = run
                .abs_cte
                .iter()
                .enumerate()
                .map(|(frame, &abs_cte)| CteRow { frame, abs_cte })
                .collect();
            write_csv(&dir.join("cte.csv"), &rows)?;
            let frac = run.on_road_fraction(env.track().half_width());
            log::info!("collected {} frames over {} episodes, on-road {:.3}", ds.len(), run.episodes, frac);
            Ok(CollectReport {
                dir,
                count: ds.len(),
                episodes: run.episodes,
                on_road_fraction: Some(frac),
            })
        }
        Driver::Serve => {
            let server = Server::bind(cfg, cfg.serve.port)?;
            log::info!("waiting for a driver on ws://{}", server.local_addr());
            let outcome = server.run(SessionLimits {
                max_ticks: None,
                max_frames: Some(n_frames),
            })?;
            let ds = FrameDataset::from_frames(&outcome.frames, FrameSource::Human, hash)?;
            datastore::write_dataset(&ds, &dir)?;
            Ok(CollectReport {
                dir,
                count: ds.len(),
                episodes: outcome.episodes as usize,
                on_road_fraction: None,
            })
        }
    }
}

pub fn load_dataset(path: &Path) -> Result<FrameDataset> {
    if !path.join(datastore::MANIFEST_FILE).exists() {
        return Err(Error::Usage(format!("no dataset at {}", path.display())).into());
    }
    Ok(datastore::read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeSummaryRow {
    pub config_id: u8,
    pub base_channels: usize,
    pub latent_dim: usize,
    pub param_count: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub val_mse: f64,
    pub val_psnr: f64,
    pub train_frames: usize,
    pub val_frames: usize,
}

pub fn vae_checkpoint_path(cfg: &RunConfig, out: &Path, id: u8) -> PathBuf {
    cfg.resolve(out, &cfg.paths.vae_dir).join(format!("config{id}.lsrl"))
}

/// Train each requested config on one dataset. Writes per-config checkpoint,
/// history CSV and reconstruction grid, plus a summary CSV.
pub fn train_vae(cfg: &RunConfig, out: &Path, dataset: &Path, configs: &[u8], epochs: usize) -> Result<Vec<VaeSummaryRow>> {
    let ds = load_dataset(dataset)?;
    let frames = ds.frames();
    let (w, h) = (ds.manifest.width, ds.manifest.height);
    let vae_dir = cfg.resolve(out, &cfg.paths.vae_dir);
    let (_, val_idx) = split_indices(frames.len(), cfg.seed);
    let grid_src: Vec<&Frame> = val_idx.iter().take(cfg.vae.grid_samples).map(|&i| &frames[i]).collect();
    let mut summary = Vec::new();
    for &id in configs {
        let run = || -> Result<VaeSummaryRow> {
            let vc = VaeConfig {
                epochs,
                ..cfg.vae.vae_config(id, w, h)?
            };
            let trained = fit_vae(&frames, vc, cfg.seed, |m| {
                log::info!(
                    "config {id} epoch {}: recon {:.2} kl {:.2} val_mse {:.2}",
                    m.epoch,
                    m.recon_loss,
                    m.kl_loss,
                    m.val_mse
                )
            })?;
            datastore::save_vae(&trained.vae, cfg.seed, vae_checkpoint_path(cfg, out, id))?;
            write_csv(&vae_dir.join(format!("config{id}_history.csv")), &trained.history)?;
            if !grid_src.is_empty() {
                let recon = trained.vae.reconstruct(&grid_src)?;
                let originals = grid_src.iter().map(|f| (*f).clone()).collect();
                write_grid(&vae_dir.join(format!("config{id}_recon.png")), &[originals, recon])?;
            }
            let best = trained.best();
            Ok(VaeSummaryRow {
                config_id: id,
                base_channels: vc.base_channels,
                latent_dim: vc.latent_dim,
                param_count: trained.vae.param_count(),
                epochs,
                best_epoch: trained.best_epoch,
                val_mse: best.val_mse,
                val_psnr: best.val_psnr,
                train_frames: trained.train_len,
                val_frames: trained.val_len,
            })
        };
        summary.push(run().with_context(|| format!("training VAE config {id}"))?);
    }
    write_csv(&vae_dir.join("summary.csv"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RlRequest {
    pub mode: RlMode,
    pub vae: Option<PathBuf>,
    pub episodes: usize,
    pub eval_every: usize,
    /// Artifact name stem; derived from mode and seed when absent.
    pub tag: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub episode: usize,
    pub steps: usize,
    pub train_reward: f64,
    pub eval_reward: Option<f64>,
    pub q1_loss: f64,
    pub q2_loss: f64,
    pub policy_loss: f64,
    pub alpha: f64,
}

impl From<&EpisodeRecord> for CurveRow {
    fn from(r: &EpisodeRecord) -> Self {
        Self {
            episode: r.episode,
            steps: r.steps,
            train_reward: r.train_reward,
            eval_reward: r.eval_reward,
            q1_loss: r.q1_loss,
            q2_loss: r.q2_loss,
            policy_loss: r.policy_loss,
            alpha: r.alpha,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RlReport {
    pub curve: PathBuf,
    pub checkpoint: PathBuf,
    pub rows: Vec<CurveRow>,
}

impl RlReport {
    pub fn final_eval(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.eval_reward)
    }
}

fn resolve_encoder(cfg: &RunConfig, out: &Path, mode: RlMode, given: Option<&Path>) -> Result<Option<(PathBuf, Vae)>> {
    match (mode, given) {
        (RlMode::Baseline, Some(p)) => Err(Error::Config(format!(
            "baseline mode trains on raw pixels and takes no encoder, got {}",
            p.display()
        ))
        .into()),
        (RlMode::Baseline, None) => Ok(None),
        (RlMode::Latent, p) => {
            let path = p.map_or_else(|| vae_checkpoint_path(cfg, out, cfg.rl.vae_config), Path::to_path_buf);
            if !path.exists() {
                return Err(Error::Config(format!("latent mode needs an encoder checkpoint, {} not found", path.display())).into());
            }
            let vae = datastore::load_vae(&path).with_context(|| format!("loading encoder {}", path.display()))?;
            Ok(Some((path, vae)))
        }
    }
}

pub fn default_tag(cfg: &RunConfig, mode: RlMode, vae: Option<&Vae>) -> String {
    match (mode, vae) {
        (RlMode::Latent, Some(v)) => format!("latent_c{}_s{}", v.config().config_id, cfg.seed),
        (RlMode::Latent, None) => format!("latent_s{}", cfg.seed),
        (RlMode::Baseline, _) => format!("baseline_s{}", cfg.seed),
    }
}

fn obs_mode(mode: RlMode) -> ObsMode {
    match mode {
        RlMode::Latent => ObsMode::Latent,
        RlMode::Baseline => ObsMode::Pixels,
    }
}

pub fn train_rl(cfg: &RunConfig, out: &Path, req: &RlRequest) -> Result<RlReport> {
    let encoder = resolve_encoder(cfg, out, req.mode, req.vae.as_deref())?;
    let vae = encoder.as_ref().map(|(_, v)| v);
    let mut env = cfg.env()?;
    let tag = req.tag.clone().unwrap_or_else(|| default_tag(cfg, req.mode, vae));
    let rl_dir = cfg.resolve(out, &cfg.paths.rl_dir);
    let options = TrainingOptions {
        episodes: req.episodes,
        eval_every: req.eval_every,
        seed: cfg.seed,
        stop_at_eval_reward: None,
    };
    let (agent, records) = sac::run_training(&mut env, vae, obs_mode(req.mode), &cfg.sac, &options, |r| {
        log::info!(
            "{tag} episode {}: steps {} reward {:.1}{}",
            r.episode,
            r.steps,
            r.train_reward,
            r.eval_reward.map_or(String::new(), |e| format!(" eval {e:.1}"))
        )
    })?;
    let rows: Vec<CurveRow> = records.iter().map(CurveRow::from).collect();
    let curve = rl_dir.join(format!("{tag}_curve.csv"));
    let checkpoint = rl_dir.join(format!("{tag}.lsrl"));
    write_csv(&curve, &rows)?;
    write_json(&rl_dir.join(format!("{tag}_sac.json")), &cfg.sac)?;
    datastore::save_sac(&agent, cfg.seed, &checkpoint)?;
    // written last so a run that died midway has no manifest
    write_json(&rl_dir.join(format!("{tag}_run.json")), &run_manifest(cfg, req, encoder.as_ref().map(|(p, _)| p.as_path()))?)?;
    Ok(RlReport { curve, checkpoint, rows })
}

/// Everything that determines a training run's artifacts.
pub fn run_manifest(cfg: &RunConfig, req: &RlRequest, encoder: Option<&Path>) -> Result<serde_json::Value> {
    let encoder_sha256 = match encoder {
        Some(p) => {
            let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            Some(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect::<String>())
        }
        None => None,
    };
    Ok(serde_json::json!({
        "config": cfg,
        "mode": req.mode,
        "episodes": req.episodes,
        "eval_every": req.eval_every,
        "encoder_sha256": encoder_sha256,
    }))
}

pub fn read_curve(path: &Path) -> Result<Vec<CurveRow>> {
    read_csv(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub episode: usize,
    pub seed: u64,
    pub steps: usize,
    pub reward: f64,
    pub final_cte: f64,
    pub on_track: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_reward: f64,
    pub min_reward: f64,
    pub max_reward: f64,
    pub mean_length: f64,
}

/// Deterministic-policy rollouts of a saved agent.
pub fn eval(cfg: &RunConfig, out: &Path, checkpoint: &Path, vae: Option<&Path>, episodes: usize) -> Result<(EvalSummary, Vec<EvalRow>)> {
    if episodes == 0 {
        return Err(Error::Usage("eval needs at least one episode".into()).into());
    }
    let mut agent = datastore::load_sac(checkpoint).with_context(|| format!("loading agent {}", checkpoint.display()))?;
    let mode = match agent.spec() {
        ObsSpec::Latent { .. } => RlMode::Latent,
        ObsSpec::Pixels { .. } => RlMode::Baseline,
    };
    let encoder = resolve_encoder(cfg, out, mode, vae)?;
    let vae = encoder.as_ref().map(|(_, v)| v);
    let mut env = cfg.env()?;
    let expected = sac::observation_spec(obs_mode(mode), vae, &env)?;
    if expected != agent.spec() {
        return Err(Error::Config(format!(
            "agent expects {:?} observations, this setup produces {expected:?}",
            agent.spec()
        ))
        .into());
    }
    let observer = match vae {
        Some(v) => Observer::Latent(v),
        None => Observer::Pixels,
    };
    let mut rows = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let seed = cfg.seed.wrapping_mul(7919).wrapping_add(2_000_000 + ep as u64);
        let o = sac::evaluate_episode(&mut env, &mut agent, observer, seed)?;
        rows.push(EvalRow {
            episode: ep + 1,
            seed,
            steps: o.steps,
            reward: o.reward,
            final_cte: o.last.cte,
            on_track: o.last.on_track,
        });
    }
    let rewards = rows.iter().map(|r| r.reward);
    let summary = EvalSummary {
        episodes,
        mean_reward: rewards.clone().sum::<f64>() / episodes as f64,
        min_reward: rewards.clone().fold(f64::INFINITY, f64::min),
        max_reward: rewards.fold(f64::NEG_INFINITY, f64::max),
        mean_length: rows.iter().map(|r| r.steps as f64).sum::<f64>() / episodes as f64,
    };
    let stem = checkpoint.file_stem().map_or("agent".into(), |s| s.to_string_lossy().into_owned());
    let eval_dir = cfg.resolve(out, &cfg.paths.eval_dir);
    write_csv(&eval_dir.join(format!("{stem}_episodes.csv")), &rows)?;
    write_csv(&eval_dir.join(format!("{stem}_summary.csv")), std::slice::from_ref(&summary))?;
    Ok((summary, rows))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchRequest {
    /// Trained encoder; an untrained preset of `config_id` is timed otherwise.
    pub vae: Option<PathBuf>,
    pub config_id: u8,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub watts: Option<f64>,
    /// CSV of power samples in watts, averaged into the power figure.
    pub power_log: Option<PathBuf>,
    /// Use this per-frame time instead of measuring.
    pub time_ms: Option<f64>,
}

/// Bench CSV row with the energy columns spelled `n/a` when no power is known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchCsvRow {
    pub config_id: u8,
    pub width: usize,
    pub height: usize,
    pub cpu_freq: String,
    pub gpu_freq: String,
    pub power_mw: String,
    pub time_per_frame_ms: f64,
    pub p95_ms: f64,
    pub frame_rate: f64,
    pub mflops_per_frame: f64,
    pub gflops_per_s: f64,
    pub energy_j: String,
    pub gflops_per_w: String,
}

fn or_na(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| x.to_string())
}

impl From<&BenchRow> for BenchCsvRow {
    fn from(r: &BenchRow) -> Self {
        Self {
            config_id: r.config_id,
            width: r.width,
            height: r.height,
            cpu_freq: r.cpu_freq.clone(),
            gpu_freq: r.gpu_freq.clone(),
            power_mw: or_na(r.power_mw),
            time_per_frame_ms: r.time_per_frame_ms,
            p95_ms: r.p95_ms,
            frame_rate: r.frame_rate,
            mflops_per_frame: r.mflops_per_frame,
            gflops_per_s: r.gflops_per_s,
            energy_j: or_na(r.energy_j),
            gflops_per_w: or_na(r.gflops_per_w),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer: String,
    pub flops: u64,
}

/// Mean of a power log: a `watts` column if present, else the first column.
pub fn mean_power(path: &Path) -> Result<f64> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading power log {}", path.display()))?;
    let col = r.headers()?.iter().position(|h| h.trim() == "watts").unwrap_or(0);
    let mut sum = 0.0;
    let mut n = 0usize;
    for rec in r.records() {
        let rec = rec?;
        let field = rec.get(col).unwrap_or("").trim();
        let v: f64 = field
            .parse()
            .map_err(|_| Error::Domain(format!("power log value `{field}` is not a number")))?;
        sum += v;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Usage(format!("power log {} has no samples", path.display())).into());
    }
    Ok(sum / n as f64)
}

pub fn bench(cfg: &RunConfig, out: &Path, req: &BenchRequest) -> Result<BenchCsvRow> {
    let watts = match (req.watts, &req.power_log) {
        (Some(_), Some(_)) => return Err(Error::Usage("give either --watts or --power-log, not both".into()).into()),
        (Some(w), None) => Some(w),
        (None, Some(p)) => Some(mean_power(p)?),
        (None, None) => None,
    };
    if let Some(w) = watts {
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::Domain(format!("power must be positive, got {w} W")).into());
        }
    }
    let vae = match &req.vae {
        Some(p) => datastore::load_vae(p).with_context(|| format!("loading encoder {}", p.display()))?,
        None => {
            let mut c = VaeConfig::preset(req.config_id, req.width, req.height)?;
            c.latent_dim = cfg.vae.latent_dim;
            Vae::new(c, cfg.seed)?
        }
    };
    let vc = *vae.config();
    let (w, h) = (vc.input_width, vc.input_height);
    let flops = flop_count(&vc, w, h);
    let t = match req.time_ms {
        Some(ms) => ThroughputReport::from_samples(&[ms], flops.total)?,
        None => measure_throughput(&vae, w, h, req.frames, cfg.seed)?,
    };
    let energy = watts.map(|w| energy_accounting(&t, w)).transpose()?;
    let row = BenchCsvRow::from(&BenchRow::new(&flops, &t, energy.as_ref()));
    let dir = cfg.resolve(out, &cfg.paths.bench_dir);
    let stem = format!("config{}_{w}x{h}", vc.config_id);
    write_csv(&dir.join(format!("{stem}.csv")), std::slice::from_ref(&row))?;
    let layers: Vec<LayerRow> = flops
        .layers
        .iter()
        .map(|l| LayerRow {
            layer: l.name.clone(),
            flops: l.flops,
        })
        .collect();
    write_csv(&dir.join(format!("{stem}_flops.csv")), &layers)?;
    Ok(row)
}

/// Host a teleoperation session and write what was recorded.
pub fn serve(cfg: &RunConfig, out: &Path, port: u16, limits: SessionLimits) -> Result<CollectReport> {
    let server = Server::bind(cfg, port)?;
    log::info!("serving on ws://{}", server.local_addr());
    let outcome = server.run(limits)?;
    let dir = cfg.resolve(out, &cfg.paths.dataset);
    let ds = FrameDataset::from_frames(&outcome.frames, FrameSource::Human, config_hash(&cfg.track_spec()?, &cfg.sim))?;
    datastore::write_dataset(&ds, &dir)?;
    log::info!(
        "session over: {} ticks, {} frames recorded, tick jitter p95 {:.2} ms",
        outcome.ticks,
        ds.len(),
        outcome.jitter_p95_ms
    );
    Ok(CollectReport {
        dir,
        count: ds.len(),
        episodes: outcome.episodes as usize,
        on_road_fraction: None,
    })
}
