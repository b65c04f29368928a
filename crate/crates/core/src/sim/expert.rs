use super::track::{cross_track_error, Track};
use super::{Action, CarParams, CarState, Env, Frame};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Scripted driver: steers toward a lookahead point on the centerline and
/// holds a fixed fraction of top speed with a proportional throttle.
///
/// A slow sinusoidal lateral offset on the target point (`weave_amplitude`)
/// makes the recorded views cover more of the road than dead-centre driving.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PurePursuit {
    pub lookahead: f64,
    pub speed_fraction: f64,
    pub throttle_gain: f64,
    pub weave_amplitude: f64,
    pub weave_period: f64,
    pub weave_phase: f64,
}

impl Default for PurePursuit {
    fn default() -> Self {
        Self {
            lookahead: 3.0,
            speed_fraction: 0.6,
            throttle_gain: 0.5,
            weave_amplitude: 0.8,
            weave_period: 9.0,
            weave_phase: 0.0,
        }
    }
}

impl PurePursuit {
    pub fn act(&self, state: &CarState, track: &Track, car: &CarParams, time: f64) -> Action {
        let proj = track.project(state.position);
        let s = track.arc_length(&proj) + self.lookahead;
        let centre = track.point_at(s);
        let tan = track.tangent_at(s);
        let offset = self.weave_amplitude * (2.0 * PI * time / self.weave_period + self.weave_phase).sin();
        let target = [centre[0] - tan[1] * offset, centre[1] + tan[0] * offset];

        let (sin, cos) = state.heading.sin_cos();
        let (dx, dy) = (target[0] - state.position[0], target[1] - state.position[1]);
        let local_x = cos * dx + sin * dy;
        let local_y = -sin * dx + cos * dy;
        let dist = (local_x * local_x + local_y * local_y).sqrt().max(1e-6);
        let alpha = local_y.atan2(local_x);
        let curvature = 2.0 * alpha.sin() / dist;
        let delta = (car.wheelbase * curvature).atan();
        let steering = delta / car.max_steer_deg.to_radians();

        let target_speed = self.speed_fraction * car.v_max;
        let throttle = self.speed_fraction + self.throttle_gain * (target_speed - state.speed) / car.v_max;
        Action::new(steering, throttle)
    }
}

/// Frames recorded by [`collect_expert`] with the |cte| at each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExpertRun {
    pub frames: Vec<Frame>,
    pub abs_cte: Vec<f64>,
    pub episodes: usize,
}

impl ExpertRun {
    /// Fraction of recorded frames taken with the car on the road surface.
    pub fn on_road_fraction(&self, half_width: f64) -> f64 {
        if self.abs_cte.is_empty() {
            return 1.0;
        }
        self.abs_cte.iter().filter(|&&c| c <= half_width).count() as f64 / self.abs_cte.len() as f64
    }
}

/// Drive `expert` and keep every `every_k`-th frame until `n_frames` are
/// recorded. Episodes restart with a fresh reset seed and weave phase.
pub fn collect_expert(env: &mut Env, expert: &PurePursuit, n_frames: usize, every_k: usize, seed: u64) -> Result<ExpertRun> {
    if every_k == 0 {
        return Err(Error::Config("frame stride must be at least 1".into()));
    }
    let car = env.config().car;
    let dt = env.config().dt;
    let mut run = ExpertRun::default();
    while run.frames.len() < n_frames {
        let mut drv = *expert;
        drv.weave_phase += run.episodes as f64 * 2.399;
        env.reset(seed.wrapping_add(run.episodes as u64));
        run.episodes += 1;
        let mut i = 0usize;
        loop {
            if i % every_k == 0 {
                run.frames.push(env.observe());
                run.abs_cte.push(cross_track_error(env.state().position, env.track()).abs());
                if run.frames.len() == n_frames {
                    break;
                }
            }
            if env.is_done() {
                break;
            }
            let a = drv.act(env.state(), env.track(), &car, i as f64 * dt);
            env.advance(a)?;
            i += 1;
        }
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{Env, RewardParams, SimConfig, TrackSpec};

    #[test]
    fn collection_keeps_every_kth_frame() {
        let cfg = SimConfig { step_cap: 30, ..SimConfig::default() };
        let mut env = Env::new(TrackSpec::oval(), cfg, RewardParams::default()).unwrap();
        let run = collect_expert(&mut env, &PurePursuit::default(), 40, 2, 0).unwrap();
        assert_eq!(run.frames.len(), 40);
        // 31 frame slots per episode (reset + 30 steps): 16 kept at k = 2
        assert_eq!(run.episodes, 3);
        assert!(run.on_road_fraction(2.0) == 1.0);
        assert!(collect_expert(&mut env, &PurePursuit::default(), 0, 2, 0).unwrap().frames.is_empty());
        assert!(collect_expert(&mut env, &PurePursuit::default(), 5, 0, 0).is_err());
        let again = collect_expert(&mut env, &PurePursuit::default(), 40, 2, 0).unwrap();
        assert_eq!(again, run);
    }

    #[test]
    fn expert_laps_every_builtin_track() {
        for name in TrackSpec::BUILTINS {
            let cfg = SimConfig::default();
            let mut env = Env::new(TrackSpec::builtin(name).unwrap(), cfg, RewardParams::default()).unwrap();
            env.reset(3);
            let expert = PurePursuit::default();
            let mut worst: f64 = 0.0;
            let mut steps = 0;
            while !env.is_done() {
                let a = expert.act(env.state(), env.track(), &cfg.car, steps as f64 * cfg.dt);
                let (info, _) = env.advance(a).unwrap();
                worst = worst.max(info.cte.abs());
                steps += 1;
            }
            assert_eq!(steps, cfg.step_cap, "{name}: left the track");
            assert!(worst < env.track().half_width(), "{name}: worst cte {worst}");
        }
    }
}
