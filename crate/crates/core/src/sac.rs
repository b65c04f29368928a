//! Soft Actor-Critic over latent vectors or raw camera frames.
//!
//! Twin critics with polyak-averaged targets, a squashed-Gaussian actor and
//! optional automatic entropy tuning. In pixel mode the critics share a
//! convolutional trunk that the critic loss trains end to end; the actor
//! reads the trunk's features without back-propagating into it.

use crate::error::{Error, Result};
use crate::nn::{ConvTrunk, Linear, Mlp};
use crate::sim::{Action, Env, Frame, StepInfo};
use crate::tensor::{Adam, AdamConfig, Bound, NamedTensor, ParamId, ParamStore, Real, Tape, Var};
use crate::vae::{padded_input, padded_len, Vae, DOWNSAMPLE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;

pub const ACTION_DIM: usize = 2;
pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Keeps `log(1 − tanh²)` finite at saturation.
pub const SQUASH_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SacConfig {
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub hidden: Vec<usize>,
    pub initial_alpha: f64,
    pub auto_alpha: bool,
    pub target_entropy: f64,
    /// Uniform random actions for this many environment steps before the policy acts.
    pub warmup_steps: usize,
    /// Gradient steps per collected environment step, run at episode end.
    pub updates_per_step: f64,
    /// Base conv width of the pixel-mode trunk.
    pub trunk_base_channels: usize,
    /// Width of the dense layer after the pixel-mode trunk.
    pub trunk_features: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            alpha_lr: 3e-4,
            batch_size: 64,
            buffer_capacity: 50_000,
            hidden: vec![64, 64],
            initial_alpha: 0.1,
            auto_alpha: true,
            target_entropy: -(ACTION_DIM as f64),
            warmup_steps: 300,
            updates_per_step: 1.0,
            trunk_base_channels: 8,
            trunk_features: 64,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        for (name, lr) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr), ("alpha_lr", self.alpha_lr)] {
            if !(lr > 0.0) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return bad("batch_size and buffer_capacity must be positive".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad(format!("hidden widths must be non-empty and positive, got {:?}", self.hidden));
        }
        if !(self.initial_alpha >= 0.0) || (self.auto_alpha && self.initial_alpha <= 0.0) {
            return bad(format!("invalid initial alpha {}", self.initial_alpha));
        }
        if !(self.updates_per_step >= 0.0) {
            return bad(format!("updates_per_step must be non-negative, got {}", self.updates_per_step));
        }
        if self.trunk_base_channels == 0 || self.trunk_features == 0 {
            return bad("pixel trunk widths must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsMode {
    Latent,
    Pixels,
}

/// Shape of the agent's input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ObsSpec {
    Latent { dim: usize },
    Pixels { width: usize, height: usize },
}

impl ObsSpec {
    pub fn mode(&self) -> ObsMode {
        match self {
            ObsSpec::Latent { .. } => ObsMode::Latent,
            ObsSpec::Pixels { .. } => ObsMode::Pixels,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Observation {
    Latent(Vec<f32>),
    Pixels(Arc<Frame>),
}

impl Observation {
    fn check(&self, spec: &ObsSpec) -> Result<()> {
        match (self, spec) {
            (Observation::Latent(v), ObsSpec::Latent { dim }) if v.len() == *dim => Ok(()),
            (Observation::Latent(v), ObsSpec::Latent { dim }) => Err(Error::shape("latent observation", &[v.len()], &[*dim])),
            (Observation::Pixels(f), ObsSpec::Pixels { width, height }) if f.width() == *width && f.height() == *height => Ok(()),
            (Observation::Pixels(f), ObsSpec::Pixels { width, height }) => {
                Err(Error::shape("pixel observation", &[f.height(), f.width()], &[*height, *width]))
            }
            (Observation::Latent(v), ObsSpec::Pixels { width, height }) => {
                Err(Error::shape("observation kind", &[v.len()], &[*height, *width, 3]))
            }
            (Observation::Pixels(f), ObsSpec::Latent { dim }) => {
                Err(Error::shape("observation kind", &[f.height(), f.width(), 3], &[*dim]))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub action: Action,
    pub reward: f64,
    pub next_obs: Observation,
    /// Terminal (off track). Reaching the step cap is not terminal.
    pub done: bool,
}

/// Fixed-capacity FIFO ring sampled uniformly with replacement.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    storage: Vec<Transition>,
    head: usize,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            capacity: capacity.max(1),
            storage: Vec::new(),
            head: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.storage.len() < self.capacity {
            self.storage.push(t);
        } else {
            self.storage[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    /// Entry at storage slot `i` (as returned by [`Self::sample_indices`]).
    pub fn get(&self, i: usize) -> &Transition {
        &self.storage[i]
    }

    /// Entries from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let (a, b) = self.storage.split_at(self.head);
        b.iter().chain(a)
    }

    pub fn sample_indices(&mut self, batch_size: usize) -> Result<Vec<usize>> {
        if self.storage.len() < batch_size || batch_size == 0 {
            return Err(Error::Usage(format!(
                "cannot sample {batch_size} transitions from a buffer of {}",
                self.storage.len()
            )));
        }
        let n = self.storage.len();
        Ok((0..batch_size).map(|_| self.rng.gen_range(0..n)).collect())
    }

    pub fn sample(&mut self, batch_size: usize) -> Result<Vec<&Transition>> {
        let idx = self.sample_indices(batch_size)?;
        Ok(idx.into_iter().map(|i| &self.storage[i]).collect())
    }
}

/// `(tanh u₀, (tanh u₁ + 1) / 2)`.
pub fn squash(u: [f64; 2]) -> Action {
    Action::new(u[0].tanh(), (u[1].tanh() + 1.0) / 2.0)
}

/// `Σ_d [log N(u_d; mean_d, std_d) − log(1 − tanh(u_d)² + 1e-6)]`.
pub fn log_prob(u: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    u.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((&u, &m), &ls)| {
            let ls = ls.clamp(LOG_STD_MIN, LOG_STD_MAX);
            let z = (u - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * (2.0 * PI).ln() - (1.0 - u.tanh().powi(2) + SQUASH_EPS).ln()
        })
        .sum()
}

/// Graph form of [`log_prob`] over `[B, D]` inputs; returns `[B, 1]`.
pub fn log_prob_graph<T: Real>(tape: &mut Tape<T>, u: Var, mean: Var, log_std: Var) -> Result<Var> {
    let d = tape.sub(u, mean)?;
    let neg = tape.neg(log_std);
    let inv_std = tape.exp(neg);
    let z = tape.mul(d, inv_std)?;
    let z2 = tape.square(z);
    let gauss = tape.scale(z2, T::lit(-0.5));
    let gauss = tape.sub(gauss, log_std)?;
    let gauss = tape.add_scalar(gauss, T::lit(-0.5 * (2.0 * PI).ln()));
    let t = tape.tanh(u);
    let t2 = tape.square(t);
    let one_minus = tape.neg(t2);
    let one_minus = tape.add_scalar(one_minus, T::lit(1.0 + SQUASH_EPS));
    let corr = tape.log(one_minus);
    let per_dim = tape.sub(gauss, corr)?;
    tape.sum_rows(per_dim)
}

/// `r + γ·(1 − done)·(min(q1, q2) − α·log π)`.
pub fn bellman_target(reward: f64, done: bool, q1: f64, q2: f64, log_pi: f64, alpha: f64, gamma: f64) -> f64 {
    if done {
        reward
    } else {
        reward + gamma * (q1.min(q2) - alpha * log_pi)
    }
}

/// `θ′ ← (1 − τ)·θ′ + τ·θ` for every parameter.
pub fn polyak_update(target: &mut ParamStore, online: &ParamStore, tau: f64) -> Result<()> {
    if target.len() != online.len() {
        return Err(Error::shape("polyak_update", &[target.len()], &[online.len()]));
    }
    if let Some((t, o)) = target.iter().zip(online.iter()).find(|(t, o)| t.shape != o.shape || t.name != o.name) {
        return Err(Error::shape("polyak_update", &t.shape, &o.shape));
    }
    let tau = tau as f32;
    for (t, o) in target.iter_mut().zip(online.iter()) {
        for (a, &b) in t.value.iter_mut().zip(&o.value) {
            *a = (1.0 - tau) * *a + tau * b;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub updates: usize,
    pub q1_loss: f64,
    pub q2_loss: f64,
    pub policy_loss: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug)]
struct PixelTrunk {
    convs: ConvTrunk,
    fc: Linear,
}

#[derive(Clone, Debug)]
struct Critic {
    trunk: Option<PixelTrunk>,
    q1: Mlp,
    q2: Mlp,
}

/// Squashed action `[B, 2]` and its log-density `[B, 1]`.
struct PolicyVars {
    action: Var,
    log_pi: Var,
}

#[derive(Clone, Debug)]
pub struct SacAgent {
    config: SacConfig,
    spec: ObsSpec,
    actor_params: ParamStore,
    actor: Mlp,
    critic_params: ParamStore,
    critic: Critic,
    target_params: ParamStore,
    alpha_params: ParamStore,
    log_alpha: ParamId,
    actor_opt: Adam,
    critic_opt: Adam,
    alpha_opt: Adam,
    rng: ChaCha8Rng,
}

impl SacAgent {
    pub fn new(config: SacConfig, spec: ObsSpec, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut critic_params = ParamStore::new();
        let (trunk, features) = match spec {
            ObsSpec::Latent { dim } => {
                if dim == 0 {
                    return Err(Error::Config("latent dimension must be positive".into()));
                }
                (None, dim)
            }
            ObsSpec::Pixels { width, height } => {
                let convs = ConvTrunk::new(&mut critic_params, "critic.trunk", config.trunk_base_channels, &mut rng)?;
                let flat = convs.out_channels() * (padded_len(width) / DOWNSAMPLE) * (padded_len(height) / DOWNSAMPLE);
                let fc = Linear::new(&mut critic_params, "critic.trunk.fc", flat, config.trunk_features, &mut rng)?;
                (Some(PixelTrunk { convs, fc }), config.trunk_features)
            }
        };
        let sizes = |input: usize, output: usize| {
            let mut s = vec![input];
            s.extend(&config.hidden);
            s.push(output);
            s
        };
        let q1 = Mlp::new(&mut critic_params, "critic.q1", &sizes(features + ACTION_DIM, 1), &mut rng)?;
        let q2 = Mlp::new(&mut critic_params, "critic.q2", &sizes(features + ACTION_DIM, 1), &mut rng)?;
        let mut actor_params = ParamStore::new();
        let actor = Mlp::new(&mut actor_params, "actor", &sizes(features, 2 * ACTION_DIM), &mut rng)?;
        let mut alpha_params = ParamStore::new();
        let log_alpha = alpha_params.add("log_alpha", &[1], vec![config.initial_alpha.max(f64::MIN_POSITIVE).ln() as f32])?;
        let target_params = critic_params.clone();
        Ok(Self {
            actor_opt: Adam::new(&actor_params, AdamConfig::with_lr(config.actor_lr)),
            critic_opt: Adam::new(&critic_params, AdamConfig::with_lr(config.critic_lr)),
            alpha_opt: Adam::new(&alpha_params, AdamConfig::with_lr(config.alpha_lr)),
            config,
            spec,
            actor_params,
            actor,
            critic_params,
            critic: Critic { trunk, q1, q2 },
            target_params,
            alpha_params,
            log_alpha,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5ac),
        })
    }

    pub fn config(&self) -> &SacConfig {
        &self.config
    }

    pub fn spec(&self) -> ObsSpec {
        self.spec
    }

    pub fn alpha(&self) -> f64 {
        if self.config.auto_alpha {
            (self.alpha_params.get(self.log_alpha).value[0] as f64).exp()
        } else {
            self.config.initial_alpha
        }
    }

    pub fn actor_params(&self) -> &ParamStore {
        &self.actor_params
    }

    pub fn actor_params_mut(&mut self) -> &mut ParamStore {
        &mut self.actor_params
    }

    pub fn critic_params(&self) -> &ParamStore {
        &self.critic_params
    }

    pub fn critic_params_mut(&mut self) -> &mut ParamStore {
        &mut self.critic_params
    }

    pub fn target_params(&self) -> &ParamStore {
        &self.target_params
    }

    pub fn target_params_mut(&mut self) -> &mut ParamStore {
        &mut self.target_params
    }

    fn obs_tensor<T: Real>(&self, tape: &mut Tape<T>, obs: &[Observation]) -> Result<Var> {
        for o in obs {
            o.check(&self.spec)?;
        }
        match self.spec {
            ObsSpec::Latent { dim } => {
                let mut v = Vec::with_capacity(obs.len() * dim);
                for o in obs {
                    if let Observation::Latent(z) = o {
                        v.extend(z.iter().map(|&x| T::lit(x as f64)));
                    }
                }
                tape.constant(v, &[obs.len(), dim])
            }
            ObsSpec::Pixels { width, height } => {
                let frames: Vec<&Frame> = obs
                    .iter()
                    .filter_map(|o| match o {
                        Observation::Pixels(f) => Some(f.as_ref()),
                        Observation::Latent(_) => None,
                    })
                    .collect();
                let x = padded_input(&frames, width, height)?;
                tape.constant(x, &[obs.len(), 3, padded_len(height), padded_len(width)])
            }
        }
    }

    /// Observation → features, using critic parameters bound as `p`.
    fn features<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, obs: &[Observation]) -> Result<Var> {
        let x = self.obs_tensor(tape, obs)?;
        match &self.critic.trunk {
            None => Ok(x),
            Some(t) => {
                let h = t.convs.forward(tape, p, x)?;
                let flat = tape.reshape(h, &[obs.len(), t.fc.inputs])?;
                let f = t.fc.forward(tape, p, flat)?;
                Ok(tape.tanh(f))
            }
        }
    }

    fn q_pair<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, features: Var, actions: Var) -> Result<(Var, Var)> {
        let x = tape.concat(&[features, actions])?;
        Ok((self.critic.q1.forward(tape, p, x)?, self.critic.q2.forward(tape, p, x)?))
    }

    /// Reparameterized policy sample on `features`; `eps` is `[B, 2]`
    /// standard normal noise (all zeros gives the mean action).
    fn policy<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, features: Var, eps: Vec<T>) -> Result<PolicyVars> {
        let b = tape.shape(features)[0];
        let out = self.actor.forward(tape, p, features)?;
        let mean = tape.slice_cols(out, 0, ACTION_DIM)?;
        let log_std = tape.slice_cols(out, ACTION_DIM, ACTION_DIM)?;
        let log_std = tape.clamp(log_std, T::lit(LOG_STD_MIN), T::lit(LOG_STD_MAX));
        let std = tape.exp(log_std);
        let eps = tape.constant(eps, &[b, ACTION_DIM])?;
        let noise = tape.mul(std, eps)?;
        let u = tape.add(mean, noise)?;
        let log_pi = log_prob_graph(tape, u, mean, log_std)?;
        // steering = tanh(u0), throttle = (tanh(u1) + 1) / 2
        let t = tape.tanh(u);
        let steer = tape.slice_cols(t, 0, 1)?;
        let th = tape.slice_cols(t, 1, 1)?;
        let th = tape.add_scalar(th, T::one());
        let th = tape.scale(th, T::lit(0.5));
        let action = tape.concat(&[steer, th])?;
        Ok(PolicyVars { action, log_pi })
    }

    /// `(MSE(Q1, y), MSE(Q2, y))` with critic parameters bound as `critic`.
    pub fn critic_loss_graph<T: Real>(
        &self,
        tape: &mut Tape<T>,
        critic: &Bound,
        transitions: &[&Transition],
        targets: &[f64],
    ) -> Result<(Var, Var)> {
        if targets.len() != transitions.len() {
            return Err(Error::shape("critic targets", &[targets.len()], &[transitions.len()]));
        }
        let b = transitions.len();
        let obs: Vec<Observation> = transitions.iter().map(|t| t.obs.clone()).collect();
        let f = self.features(tape, critic, &obs)?;
        let acts = transitions
            .iter()
            .flat_map(|t| [T::lit(t.action.steering), T::lit(t.action.throttle)])
            .collect();
        let a = tape.constant(acts, &[b, ACTION_DIM])?;
        let y = tape.constant(targets.iter().map(|&v| T::lit(v)).collect(), &[b, 1])?;
        let (q1, q2) = self.q_pair(tape, critic, f, a)?;
        let d1 = tape.sub(q1, y)?;
        let d1 = tape.square(d1);
        let l1 = tape.mean(d1);
        let d2 = tape.sub(q2, y)?;
        let d2 = tape.square(d2);
        let l2 = tape.mean(d2);
        Ok((l1, l2))
    }

    /// `mean(α·log π(ã|s) − min(Q1, Q2)(s, ã))` with `ã` reparameterized by
    /// `eps`. Critic parameters are read only; in pixel mode the trunk is
    /// not trained through this loss.
    pub fn policy_loss_graph<T: Real>(
        &self,
        tape: &mut Tape<T>,
        actor: &Bound,
        critic: &Bound,
        obs: &[Observation],
        eps: Vec<T>,
        alpha: f64,
    ) -> Result<(Var, Var)> {
        let f = self.features(tape, critic, obs)?;
        let f = tape.detach(f);
        let pol = self.policy(tape, actor, f, eps)?;
        let (q1, q2) = self.q_pair(tape, critic, f, pol.action)?;
        let q = tape.min2(q1, q2)?;
        let ent = tape.scale(pol.log_pi, T::lit(alpha));
        let per = tape.sub(ent, q)?;
        Ok((tape.mean(per), pol.log_pi))
    }

    fn noise(&mut self, n: usize) -> Vec<f32> {
        (0..n).map(|_| self.rng.sample(StandardNormal)).collect()
    }

    /// Pre-squash mean and clamped log-std for one observation.
    pub fn policy_params(&self, obs: &Observation) -> Result<([f64; 2], [f64; 2])> {
        let mut tape = Tape::new();
        let cp = self.critic_params.bind(&mut tape, false);
        let ap = self.actor_params.bind(&mut tape, false);
        let f = self.features(&mut tape, &cp, std::slice::from_ref(obs))?;
        let out = self.actor.forward(&mut tape, &ap, f)?;
        let v = tape.value(out);
        let ls = |x: f32| (x as f64).clamp(LOG_STD_MIN, LOG_STD_MAX);
        Ok(([v[0] as f64, v[1] as f64], [ls(v[2]), ls(v[3])]))
    }

    /// Deterministic: `squash(mean)`; stochastic: `squash(mean + std·ε)`.
    pub fn select_action(&mut self, obs: &Observation, deterministic: bool) -> Result<Action> {
        let (mean, log_std) = self.policy_params(obs)?;
        if deterministic {
            return Ok(squash(mean));
        }
        let e0: f64 = self.rng.sample(StandardNormal);
        let e1: f64 = self.rng.sample(StandardNormal);
        Ok(squash([mean[0] + log_std[0].exp() * e0, mean[1] + log_std[1].exp() * e1]))
    }

    /// Online critic values `(Q1, Q2)` for one observation and action.
    pub fn q_values(&self, obs: &Observation, action: Action) -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let cp = self.critic_params.bind(&mut tape, false);
        let f = self.features(&mut tape, &cp, std::slice::from_ref(obs))?;
        let a = tape.constant(vec![action.steering as f32, action.throttle as f32], &[1, ACTION_DIM])?;
        let (q1, q2) = self.q_pair(&mut tape, &cp, f, a)?;
        Ok((tape.scalar(q1) as f64, tape.scalar(q2) as f64))
    }

    /// Soft Bellman targets with `a′ ~ π(·|s′)` from the target critics.
    /// Also returns the `(min Q′, log π)` pair behind each target.
    fn critic_targets(&mut self, batch: &[&Transition]) -> Result<(Vec<f64>, Vec<(f64, f64)>)> {
        let eps = self.noise(batch.len() * ACTION_DIM);
        let next: Vec<Observation> = batch.iter().map(|t| t.next_obs.clone()).collect();
        let mut tape = Tape::new();
        let tp = self.target_params.bind(&mut tape, false);
        let ap = self.actor_params.bind(&mut tape, false);
        let f = self.features(&mut tape, &tp, &next)?;
        let pol = self.policy(&mut tape, &ap, f, eps)?;
        let (q1, q2) = self.q_pair(&mut tape, &tp, f, pol.action)?;
        let alpha = self.alpha();
        let mut ys = Vec::with_capacity(batch.len());
        let mut parts = Vec::with_capacity(batch.len());
        for (i, t) in batch.iter().enumerate() {
            let (a, b, lp) = (tape.value(q1)[i] as f64, tape.value(q2)[i] as f64, tape.value(pol.log_pi)[i] as f64);
            ys.push(bellman_target(t.reward, t.done, a, b, lp, alpha, self.config.gamma));
            parts.push((a.min(b), lp));
        }
        Ok((ys, parts))
    }

    pub fn critic_target(&mut self, transitions: &[&Transition]) -> Result<Vec<f64>> {
        Ok(self.critic_targets(transitions)?.0)
    }

    /// Targets along with the `(min Q′, log π)` terms they combine.
    pub fn critic_target_parts(&mut self, transitions: &[&Transition]) -> Result<(Vec<f64>, Vec<(f64, f64)>)> {
        self.critic_targets(transitions)
    }

    /// One critic gradient step; returns `(q1_loss, q2_loss)`.
    fn critic_step(&mut self, batch: &[&Transition]) -> Result<(f64, f64)> {
        let (ys, _) = self.critic_targets(batch)?;
        let mut tape = Tape::new();
        let cp = self.critic_params.bind(&mut tape, true);
        let (l1, l2) = self.critic_loss_graph(&mut tape, &cp, batch, &ys)?;
        let (l1v, l2v) = (tape.scalar(l1) as f64, tape.scalar(l2) as f64);
        if !(l1v.is_finite() && l2v.is_finite()) {
            return Err(Error::Numeric(format!("critic loss diverged: {l1v}, {l2v}")));
        }
        let loss = tape.add(l1, l2)?;
        tape.backward(loss)?;
        self.critic_params.absorb_grads(&tape, &cp);
        self.critic_opt.step(&mut self.critic_params)?;
        Ok((l1v, l2v))
    }

    /// One actor step, then the temperature step; returns the policy loss.
    fn actor_step(&mut self, batch: &[&Transition]) -> Result<f64> {
        let b = batch.len();
        let eps = self.noise(b * ACTION_DIM);
        let alpha = self.alpha();
        let obs: Vec<Observation> = batch.iter().map(|t| t.obs.clone()).collect();
        let mut tape = Tape::new();
        let ap = self.actor_params.bind(&mut tape, true);
        let cp = self.critic_params.bind(&mut tape, false);
        let (loss, log_pi) = self.policy_loss_graph(&mut tape, &ap, &cp, &obs, eps, alpha)?;
        let lv = tape.scalar(loss) as f64;
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("policy loss diverged: {lv}")));
        }
        tape.backward(loss)?;
        self.actor_params.absorb_grads(&tape, &ap);
        self.actor_opt.step(&mut self.actor_params)?;

        if self.config.auto_alpha {
            // gradient of −log α·(log π + target entropy), batch mean
            let mean_lp = tape.value(log_pi).iter().map(|&v| v as f64).sum::<f64>() / b as f64;
            let grad = -(mean_lp + self.config.target_entropy);
            self.alpha_params.get_mut(self.log_alpha).grad = Some(vec![grad as f32]);
            self.alpha_opt.step(&mut self.alpha_params)?;
        }
        Ok(lv)
    }

    /// `n_updates` SAC gradient steps on minibatches from `buffer`. Skipped
    /// (with `updates = 0`) when the buffer holds fewer than `batch_size`.
    pub fn update(&mut self, buffer: &mut ReplayBuffer, n_updates: usize) -> Result<LossReport> {
        let mut report = LossReport {
            alpha: self.alpha(),
            ..LossReport::default()
        };
        if buffer.len() < self.config.batch_size {
            return Ok(report);
        }
        for _ in 0..n_updates {
            let idx = buffer.sample_indices(self.config.batch_size)?;
            let batch: Vec<&Transition> = idx.iter().map(|&i| buffer.get(i)).collect();
            let (l1, l2) = self.critic_step(&batch)?;
            let pl = self.actor_step(&batch)?;
            polyak_update(&mut self.target_params, &self.critic_params, self.config.tau)?;
            report.q1_loss += l1;
            report.q2_loss += l2;
            report.policy_loss += pl;
            report.updates += 1;
        }
        if report.updates > 0 {
            let n = report.updates as f64;
            report.q1_loss /= n;
            report.q2_loss /= n;
            report.policy_loss /= n;
        }
        report.alpha = self.alpha();
        Ok(report)
    }

    /// Policy loss on `transitions` with zero exploration noise, without updating anything.
    pub fn deterministic_policy_loss(&self, transitions: &[&Transition]) -> Result<f64> {
        let obs: Vec<Observation> = transitions.iter().map(|t| t.obs.clone()).collect();
        let mut tape = Tape::new();
        let ap = self.actor_params.bind(&mut tape, false);
        let cp = self.critic_params.bind(&mut tape, false);
        let (loss, _) = self.policy_loss_graph(&mut tape, &ap, &cp, &obs, vec![0.0; obs.len() * ACTION_DIM], self.alpha())?;
        Ok(tape.scalar(loss) as f64)
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut t = self.actor_params.to_named();
        t.extend(self.critic_params.to_named());
        t.extend(self.alpha_params.to_named());
        t
    }

    /// Restore actor, critic and temperature; targets are reset to the critic.
    pub fn load_tensors(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let mut actor = self.actor_params.clone();
        let mut critic = self.critic_params.clone();
        let mut alpha = self.alpha_params.clone();
        actor.load_named(tensors)?;
        critic.load_named(tensors)?;
        alpha.load_named(tensors)?;
        self.target_params = critic.clone();
        self.actor_params = actor;
        self.critic_params = critic;
        self.alpha_params = alpha;
        Ok(())
    }
}

/// Converts environment frames into agent observations.
#[derive(Clone, Copy, Debug)]
pub enum Observer<'a> {
    Latent(&'a Vae),
    Pixels,
}

impl Observer<'_> {
    pub fn observe(&self, frame: Frame) -> Result<Observation> {
        match self {
            Observer::Latent(vae) => Ok(Observation::Latent(vae.encode(&frame)?.mu)),
            Observer::Pixels => Ok(Observation::Pixels(Arc::new(frame))),
        }
    }
}

/// Check that the encoder (if any) matches the requested mode and camera.
pub fn observation_spec(mode: ObsMode, encoder: Option<&Vae>, env: &Env) -> Result<ObsSpec> {
    let (w, h) = (env.config().width, env.config().height);
    match (mode, encoder) {
        (ObsMode::Latent, Some(vae)) => {
            let c = vae.config();
            if (c.input_width, c.input_height) != (w, h) {
                return Err(Error::Config(format!(
                    "encoder expects {}x{} frames, camera renders {w}x{h}",
                    c.input_width, c.input_height
                )));
            }
            Ok(ObsSpec::Latent { dim: c.latent_dim })
        }
        (ObsMode::Pixels, None) => Ok(ObsSpec::Pixels { width: w, height: h }),
        (ObsMode::Latent, None) => Err(Error::Config("latent mode needs an encoder".into())),
        (ObsMode::Pixels, Some(_)) => Err(Error::Config("pixel mode takes no encoder".into())),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub steps: usize,
    pub train_reward: f64,
    pub eval_reward: Option<f64>,
    pub q1_loss: f64,
    pub q2_loss: f64,
    pub policy_loss: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug)]
pub struct TrainingOptions {
    pub episodes: usize,
    pub eval_every: usize,
    pub seed: u64,
    /// Stop after the first evaluation whose reward reaches this value.
    pub stop_at_eval_reward: Option<f64>,
}

impl Default for TrainingOptions {
    fn default() -> Self {
        Self {
            episodes: 150,
            eval_every: 5,
            seed: 0,
            stop_at_eval_reward: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub steps: usize,
    pub reward: f64,
    pub last: StepInfo,
}

/// Roll out one deterministic-policy episode.
pub fn evaluate_episode(env: &mut Env, agent: &mut SacAgent, observer: Observer<'_>, seed: u64) -> Result<EpisodeOutcome> {
    let mut obs = observer.observe(env.reset(seed).observation)?;
    let mut total = 0.0;
    let mut steps = 0;
    loop {
        let a = agent.select_action(&obs, true)?;
        let r = env.step(a)?;
        total += r.reward;
        steps += 1;
        if r.done {
            return Ok(EpisodeOutcome {
                steps,
                reward: total,
                last: r.info,
            });
        }
        obs = observer.observe(r.observation)?;
    }
}

/// Train from scratch; calls `on_episode` after every episode with its record.
pub fn run_training<F>(
    env: &mut Env,
    encoder: Option<&Vae>,
    mode: ObsMode,
    config: &SacConfig,
    options: &TrainingOptions,
    mut on_episode: F,
) -> Result<(SacAgent, Vec<EpisodeRecord>)>
where
    F: FnMut(&EpisodeRecord),
{
    let spec = observation_spec(mode, encoder, env)?;
    let observer = match encoder {
        Some(v) => Observer::Latent(v),
        None => Observer::Pixels,
    };
    let mut agent = SacAgent::new(config.clone(), spec, options.seed)?;
    let mut buffer = ReplayBuffer::new(config.buffer_capacity, options.seed ^ 0xb0f);
    let mut explore = ChaCha8Rng::seed_from_u64(options.seed ^ 0xe4);
    let mut records = Vec::with_capacity(options.episodes);
    let mut total_steps = 0usize;
    let mut owed = 0.0f64;

    for episode in 1..=options.episodes {
        let reset_seed = options.seed.wrapping_mul(1_000_003).wrapping_add(episode as u64);
        let mut obs = observer.observe(env.reset(reset_seed).observation)?;
        let (mut steps, mut reward) = (0usize, 0.0f64);
        loop {
            let action = if total_steps < config.warmup_steps {
                Action::new(explore.gen_range(-1.0..=1.0), explore.gen_range(0.0..=1.0))
            } else {
                agent.select_action(&obs, false)?
            };
            let r = env.step(action)?;
            let next = observer.observe(r.observation.clone())?;
            let terminal = r.terminal();
            buffer.push(Transition {
                obs,
                action,
                reward: r.reward,
                next_obs: next.clone(),
                done: terminal,
            });
            obs = next;
            reward += r.reward;
            steps += 1;
            total_steps += 1;
            if r.done {
                break;
            }
        }
        owed += steps as f64 * config.updates_per_step;
        let n_updates = owed.floor() as usize;
        owed -= n_updates as f64;
        let losses = agent.update(&mut buffer, n_updates)?;

        let eval_reward = if options.eval_every > 0 && episode % options.eval_every == 0 {
            let seed = options.seed.wrapping_mul(7_919).wrapping_add(1_000_000 + episode as u64);
            Some(evaluate_episode(env, &mut agent, observer, seed)?.reward)
        } else {
            None
        };
        let rec = EpisodeRecord {
            episode,
            steps,
            train_reward: reward,
            eval_reward,
            q1_loss: losses.q1_loss,
            q2_loss: losses.q2_loss,
            policy_loss: losses.policy_loss,
            alpha: losses.alpha,
        };
        on_episode(&rec);
        records.push(rec);
        if let (Some(goal), Some(r)) = (options.stop_at_eval_reward, eval_reward) {
            if r >= goal {
                break;
            }
        }
    }
    Ok((agent, records))
}
