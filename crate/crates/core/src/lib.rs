//! Maximum-entropy model rollouts (MEMR).
//!
//! A Dyna-style model-based learner: a probabilistic ensemble generates
//! single-step rollouts from real states, and those states are chosen by a
//! prioritized replay whose priority is the entropy gain the new
//! state-action pair would bring to the model dataset. A soft actor-critic
//! agent is trained on the rollouts with importance-sampling corrections.
//!
//! Module map:
//! - [`gaussian`]: diagonal Gaussian math, the priority criterion and the
//!   entropy-gain oracle.
//! - [`entropy`]: k-nearest-neighbour entropy estimate used as a diagnostic.
//! - [`net`]: small dense networks with hand-written reverse mode and Adam.
//! - [`replay`]: sum tree, prioritized environment buffer, segmented model buffer.
//! - [`dynamics`]: probabilistic ensemble dynamics model.
//! - [`model_policy`]: the model-data policy density used to score priorities.
//! - [`sac`]: soft actor-critic.
//! - [`env`]: deterministic pendulum and point-mass environments.
//! - [`trainer`]: the end-to-end training loop, metrics and checkpoints.
//! - [`verify`]: brute-force oracle suites runnable on demand.

pub mod codec;
pub mod dynamics;
pub mod entropy;
pub mod env;
pub mod error;
pub mod gaussian;
pub mod model_policy;
pub mod net;
pub mod replay;
pub mod rng;
pub mod sac;
pub mod trainer;
pub mod verify;

pub use error::{MemrError, Result};
pub use rng::MemrRng;
