//! Agentic boundary learning for a conversational music recommender, at desk
//! scale: a synthetic catalog world, structured response templates, hybrid
//! rewards, a feature-linear policy with a tool head, GRPO, self-distillation,
//! boundary curriculum training, a toy continual-pretraining lab and an
//! evaluation bench.

pub mod env;
pub mod error;
pub mod grpo;
pub mod policy;
pub mod rewards;
pub mod rng;
pub mod template;
pub mod bench;
pub mod boundary;
pub mod config;
pub mod cptlab;
pub mod distill;
pub mod io;
pub mod pipeline;
pub mod repro;
pub mod sft;
pub mod world;

pub use env::{Env, World, WorldConfig};
pub use error::{Error, Result};
pub use policy::{Mode, ModeControl, PolicyParams, Tool, Trajectory};
pub use rewards::{RewardBreakdown, RewardKind, RolloutGroup};
pub use template::{Intention, SongRef, StructuredResponse};
pub use world::{BenchQuery, Catalog, Constraint, Dim, Song, SongId, UserProfile};
