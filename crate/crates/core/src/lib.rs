//! Latent-space reinforcement learning for a 2D driving task.
//!
//! The crate bundles everything the pipeline needs: a deterministic
//! closed-track simulator with a forward camera ([`sim`]), a small
//! reverse-mode autodiff engine ([`tensor`]), a convolutional VAE family
//! ([`vae`]), a Soft Actor-Critic agent ([`sac`]), on-disk formats
//! ([`datastore`]) and compute accounting ([`bench`]).

pub mod bench;
pub mod datastore;
pub mod error;
pub mod nn;
pub mod sac;
pub mod sim;
pub mod tensor;
pub mod vae;

pub use error::{Error, Result};
pub use sim::{Action, CarState, Env, Frame, StepResult, TrackSpec};
pub use tensor::{Adam, AdamConfig, ParamStore, Real, Tape, Var};
pub use vae::{LatentCode, Vae, VaeConfig};
