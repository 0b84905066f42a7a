//! Sequential-picking learning stack.
//!
//! - [`tabular`] and [`divergence`]: exact finite-MDP occupancies and the
//!   closed-form certification of the imitation bound chain.
//! - [`env`]: the parcel-wall depalletizing simulator and its scripted expert.
//! - [`nn`]: small convolutional approximators with hand-written gradients.
//! - [`agents`]: behavioral cloning, double deep Q-learning and evaluation.
//! - [`ursfo`]: observation-only adversarial reward shaping on top of DQL.
//! - [`harness`]: experiment configuration and the command-line workflows.

pub mod agents;
pub mod divergence;
pub mod env;
pub mod harness;
pub mod nn;
pub mod seed;
pub mod tabular;
pub mod ursfo;
