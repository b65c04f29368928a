//! Shared fixtures for the criterion benchmarks.

use lsrl_core::sim::SimConfig;
use lsrl_core::{Env, Frame, Result, TrackSpec, Vae, VaeConfig};

/// Frames rendered by driving straight from the start line.
pub fn sample_frames(width: usize, height: usize, n: usize) -> Result<Vec<Frame>> {
    let cfg = SimConfig {
        width,
        height,
        ..SimConfig::default()
    };
    let mut env = Env::new(TrackSpec::oval(), cfg, Default::default())?;
    let mut frames = vec![env.reset(0).observation];
    while frames.len() < n {
        let r = env.step(lsrl_core::Action::new(0.0, 0.5))?;
        if r.done {
            frames.push(env.reset(frames.len() as u64).observation);
        } else {
            frames.push(r.observation);
        }
    }
    Ok(frames)
}

pub fn preset_vae(id: u8, width: usize, height: usize) -> Result<Vae> {
    Vae::new(VaeConfig::preset(id, width, height)?, 0)
}
