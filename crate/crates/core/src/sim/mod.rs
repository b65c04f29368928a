//! Deterministic 2D closed-track driving environment.
//!
//! The car follows a kinematic bicycle model; observations come from a
//! synthetic forward camera rendered against the track's ground plane.

mod expert;
mod render;
mod reward;
mod track;

pub use expert::{collect_expert, ExpertRun, PurePursuit};
pub use render::{ground_color, render_camera, Camera, Frame, GRASS, LANE_EDGE, ROAD, SKY};
pub use reward::{reward_cte_shaped, reward_throttle_shaped, RewardMode, RewardParams};
pub use track::{cross_track_error, Projection, Track, TrackSpec};

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::PI;

/// Continuous control input; components are clamped on construction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Action {
    /// `[-1, 1]`, positive steers left.
    pub steering: f64,
    /// `[0, 1]`.
    pub throttle: f64,
}

impl Action {
    pub fn new(steering: f64, throttle: f64) -> Self {
        let clean = |v: f64| if v.is_nan() { 0.0 } else { v };
        Self {
            steering: clean(steering).clamp(-1.0, 1.0),
            throttle: clean(throttle).clamp(0.0, 1.0),
        }
    }

    pub fn clamped(self) -> Self {
        Self::new(self.steering, self.throttle)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CarParams {
    pub wheelbase: f64,
    pub max_steer_deg: f64,
    pub v_max: f64,
    /// First-order speed response rate (1/s).
    pub k_acc: f64,
}

impl Default for CarParams {
    fn default() -> Self {
        Self {
            wheelbase: 0.3,
            max_steer_deg: 30.0,
            v_max: 5.0,
            k_acc: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CarState {
    pub position: [f64; 2],
    /// Radians in `(-π, π]`.
    pub heading: f64,
    pub speed: f64,
    pub wheelbase: f64,
}

impl Default for CarState {
    fn default() -> Self {
        Self {
            position: [0.0, 0.0],
            heading: 0.0,
            speed: 0.0,
            wheelbase: CarParams::default().wheelbase,
        }
    }
}

pub fn normalize_angle(a: f64) -> f64 {
    let mut a = a.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

impl CarState {
    /// One explicit-Euler step of the kinematic bicycle model.
    pub fn advance(&self, action: Action, car: &CarParams, dt: f64) -> CarState {
        let a = action.clamped();
        let (s, c) = self.heading.sin_cos();
        let steer = (a.steering * car.max_steer_deg.to_radians()).tan();
        let position = [
            self.position[0] + self.speed * dt * c,
            self.position[1] + self.speed * dt * s,
        ];
        let heading = normalize_angle(self.heading + self.speed / self.wheelbase * steer * dt);
        let speed = (self.speed + car.k_acc * (a.throttle * car.v_max - self.speed) * dt).clamp(0.0, car.v_max);
        CarState {
            position,
            heading,
            speed,
            wheelbase: self.wheelbase,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub car: CarParams,
    pub dt: f64,
    pub step_cap: usize,
    pub width: usize,
    pub height: usize,
    /// Lateral start offset up to `0.1·road_half_width` drawn from the reset seed.
    pub reset_jitter: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            car: CarParams::default(),
            dt: 0.05,
            step_cap: 1000,
            width: 64,
            height: 48,
            reset_jitter: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        let c = &self.car;
        if !(c.wheelbase > 0.0 && c.v_max > 0.0 && c.k_acc >= 0.0 && c.max_steer_deg > 0.0 && c.max_steer_deg < 90.0) {
            return Err(Error::Config(format!("invalid car parameters {c:?}")));
        }
        if self.step_cap == 0 {
            return Err(Error::Config("step_cap must be positive".into()));
        }
        Camera::new(self.width, self.height).map(|_| ())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub cte: f64,
    pub speed: f64,
    pub on_track: bool,
    pub step_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Frame,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

impl StepResult {
    /// Episode ended by leaving the track rather than by the step cap.
    pub fn terminal(&self) -> bool {
        self.done && !self.info.on_track
    }
}

/// Stable hash of the simulator setup, recorded in dataset manifests.
pub fn config_hash(track: &TrackSpec, sim: &SimConfig) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(track).expect("track serializes"));
    h.update(serde_json::to_vec(sim).expect("sim config serializes"));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// A single car on a single track.
#[derive(Clone, Debug)]
pub struct Env {
    track: Track,
    config: SimConfig,
    reward: RewardParams,
    state: CarState,
    step_index: usize,
    done: bool,
    started: bool,
}

impl Env {
    pub fn new(spec: TrackSpec, config: SimConfig, reward: RewardParams) -> Result<Self> {
        config.validate()?;
        reward.validate()?;
        let track = Track::new(spec)?;
        Ok(Self {
            track,
            config,
            reward,
            state: CarState {
                wheelbase: config.car.wheelbase,
                ..CarState::default()
            },
            step_index: 0,
            done: true,
            started: false,
        })
    }

    pub fn track(&self) -> &Track {
        &self.track
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn reward_params(&self) -> &RewardParams {
        &self.reward
    }

    pub fn state(&self) -> &CarState {
        &self.state
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Place the car on waypoint 0 facing along the track, at rest.
    pub fn reset(&mut self, seed: u64) -> StepResult {
        let hw = self.track.half_width();
        let jitter = if self.config.reset_jitter {
            ChaCha8Rng::seed_from_u64(seed).gen_range(-0.1 * hw..=0.1 * hw)
        } else {
            0.0
        };
        let start = self.track.waypoint(0);
        let dir = self.track.direction(0);
        self.state = CarState {
            position: [start[0] - dir[1] * jitter, start[1] + dir[0] * jitter],
            heading: normalize_angle(dir[1].atan2(dir[0])),
            speed: 0.0,
            wheelbase: self.config.car.wheelbase,
        };
        self.step_index = 0;
        self.done = false;
        self.started = true;
        let cte = cross_track_error(self.state.position, &self.track);
        StepResult {
            observation: self.observe(),
            reward: 0.0,
            done: false,
            info: StepInfo {
                cte,
                speed: 0.0,
                on_track: cte.abs() <= self.track.max_cte(),
                step_index: 0,
            },
        }
    }

    pub fn observe(&self) -> Frame {
        render_camera(&self.state, &self.track, self.config.width, self.config.height).expect("resolution validated")
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        let (info, reward) = self.advance(action)?;
        Ok(StepResult {
            observation: self.observe(),
            reward,
            done: self.done,
            info,
        })
    }

    /// Advance the dynamics without rendering; returns the step info and reward.
    pub fn advance(&mut self, action: Action) -> Result<(StepInfo, f64)> {
        if !self.started {
            return Err(Error::Protocol("step before reset".into()));
        }
        if self.done {
            return Err(Error::Protocol("step after episode end without reset".into()));
        }
        let action = action.clamped();
        self.state = self.state.advance(action, &self.config.car, self.config.dt);
        self.step_index += 1;
        let cte = cross_track_error(self.state.position, &self.track);
        let on_track = cte.abs() <= self.track.max_cte();
        self.done = !on_track || self.step_index >= self.config.step_cap;
        let reward = match self.reward.mode {
            RewardMode::CteShaped => reward_cte_shaped(cte, self.reward.max_cte, self.state.speed)?,
            RewardMode::ThrottleShaped => reward_throttle_shaped(on_track, action.throttle, &self.reward),
        };
        Ok((
            StepInfo {
                cte,
                speed: self.state.speed,
                on_track,
                step_index: self.step_index,
            },
            reward,
        ))
    }
}
