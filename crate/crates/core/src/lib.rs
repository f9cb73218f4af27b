//! Preference alignment for sequential generative policies with a discounted
//! dense-reward objective.
//!
//! The crate has two tiers:
//!
//! * an **exact tier** over finite discrete MDPs ([`mdp`], [`preference`],
//!   [`verify`]) where the regularized optimal policy, its partition
//!   functions, reward shaping, and the Bradley-Terry bound can all be
//!   brute-forced and checked against closed forms;
//! * a **trainable tier** ([`nn`], [`diffusion`], [`trainer`]) where a toy
//!   conditional Gaussian diffusion policy with low-rank adapters is aligned
//!   off-policy against a synthetic preference scorer using the discounted
//!   pairwise loss in [`loss`].

pub mod container;
pub mod diffusion;
pub mod loss;
pub mod mdp;
pub mod policy;
pub mod preference;
pub mod rngutil;
pub mod trainer;
pub mod verify;

pub mod nn;

pub use diffusion::{
    DiffusionPolicy, DiffusionSchedule, DiffusionTrajectory, MixtureComponent, Prompt, PromptSet,
};
pub use loss::{EstimatorMode, LossConfig};
pub use mdp::{DiscreteMdp, RegularizedSolution, ShapingFunction, Trajectory};
pub use nn::{Activation, AdamWState, DenseNet, LowRankAdapter};
pub use policy::{DifferentiableRatioPolicy, RatioPolicy, TabularSoftmaxPolicy};
pub use preference::PreferencePair;
pub use trainer::{MetricsRecord, PromptDist, TrainerConfig, TrajectoryStore};
pub use verify::{CheckResult, VerificationReport};
