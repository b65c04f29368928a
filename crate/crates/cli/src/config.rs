use anyhow::{bail, Context, Result};
use lsrl_core::sac::SacConfig;
use lsrl_core::sim::{PurePursuit, RewardParams, SimConfig};
use lsrl_core::{Env, TrackSpec, VaeConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Driver {
    Scripted,
    Serve,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RlMode {
    Latent,
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Relative paths resolve against the output directory.
    pub dataset: PathBuf,
    pub vae_dir: PathBuf,
    pub rl_dir: PathBuf,
    pub eval_dir: PathBuf,
    pub bench_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "dataset".into(),
            vae_dir: "vae".into(),
            rl_dir: "rl".into(),
            eval_dir: "eval".into(),
            bench_dir: "bench".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectSettings {
    pub n_frames: usize,
    pub every_k: usize,
    pub driver: Driver,
    pub expert: PurePursuit,
}

impl Default for CollectSettings {
    fn default() -> Self {
        Self {
            n_frames: 2000,
            every_k: 2,
            driver: Driver::Scripted,
            expert: PurePursuit::default(),
        }
    }
}

/// Shared VAE hyperparameters; per-config channel widths come from the presets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeSettings {
    pub configs: Vec<u8>,
    pub latent_dim: usize,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Validation frames shown in each reconstruction grid.
    pub grid_samples: usize,
}

impl Default for VaeSettings {
    fn default() -> Self {
        Self {
            configs: vec![1, 2, 3],
            latent_dim: 64,
            beta: 1.0,
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            grid_samples: 8,
        }
    }
}

impl VaeSettings {
    pub fn vae_config(&self, id: u8, width: usize, height: usize) -> Result<VaeConfig> {
        let mut c = VaeConfig::preset(id, width, height)?;
        c.latent_dim = self.latent_dim;
        c.beta = self.beta;
        c.epochs = self.epochs;
        c.batch_size = self.batch_size;
        c.lr = self.lr;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlSettings {
    pub mode: RlMode,
    pub episodes: usize,
    pub eval_every: usize,
    /// Config id of the encoder checkpoint picked from `vae_dir` when none is given.
    pub vae_config: u8,
}

impl Default for RlSettings {
    fn default() -> Self {
        Self {
            mode: RlMode::Latent,
            episodes: 150,
            eval_every: 5,
            vae_config: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSettings {
    pub config_id: u8,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            config_id: 2,
            width: 160,
            height: 120,
            frames: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeSettings {
    pub port: u16,
    pub tick_hz: f64,
    /// Keep every k-th tick's frame while recording.
    pub record_every: usize,
    /// Give up if no client connects within this many seconds.
    pub connect_timeout_s: f64,
    /// End the session after the client has been gone this long.
    pub idle_timeout_s: f64,
    /// Outgoing messages buffered per client before the oldest are dropped.
    pub send_queue: usize,
}

impl Default for ServeSettings {
    fn default() -> Self {
        Self {
            port: 8765,
            tick_hz: 20.0,
            record_every: 2,
            connect_timeout_s: 120.0,
            idle_timeout_s: 60.0,
            send_queue: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Built-in track name or path to a track JSON file.
    pub track: String,
    pub sim: SimConfig,
    pub reward: RewardParams,
    pub seed: u64,
    pub paths: Paths,
    pub collect: CollectSettings,
    pub vae: VaeSettings,
    pub sac: SacConfig,
    pub rl: RlSettings,
    pub bench: BenchSettings,
    pub serve: ServeSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            track: "oval".into(),
            sim: SimConfig::default(),
            reward: RewardParams::default(),
            seed: 0,
            paths: Paths::default(),
            collect: CollectSettings::default(),
            vae: VaeSettings::default(),
            sac: SacConfig::default(),
            rl: RlSettings::default(),
            bench: BenchSettings::default(),
            serve: ServeSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.reward.validate()?;
        self.sac.validate()?;
        if self.collect.every_k == 0 || self.serve.record_every == 0 {
            bail!("frame strides must be at least 1");
        }
        if !(self.serve.tick_hz > 0.0) {
            bail!("serve tick rate must be positive");
        }
        Ok(())
    }

    pub fn track_spec(&self) -> Result<TrackSpec> {
        if let Some(spec) = TrackSpec::builtin(&self.track) {
            return Ok(spec);
        }
        let path = Path::new(&self.track);
        if !path.exists() {
            bail!(
                "track `{}` is neither a built-in ({}) nor an existing file",
                self.track,
                TrackSpec::BUILTINS.join(", ")
            );
        }
        Ok(TrackSpec::load(path)?)
    }

    pub fn env(&self) -> Result<Env> {
        Ok(Env::new(self.track_spec()?, self.sim, self.reward)?)
    }

    pub fn resolve(&self, out_dir: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            out_dir.join(p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_json_is_the_default() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn round_trips_through_json() {
        let mut cfg = RunConfig::default();
        cfg.sac.gamma = 0.95;
        cfg.rl.mode = RlMode::Baseline;
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_track_is_rejected() {
        let cfg = RunConfig {
            track: "/nonexistent/track.json".into(),
            ..RunConfig::default()
        };
        assert!(cfg.track_spec().is_err());
    }
}
