//! Simulator and training engine for the signaling-bandits teaching game.
//!
//! A teacher who knows the feature rewards of a world state instructs a
//! student, either with a fixed-length message of discrete tokens or with a
//! handful of demonstrations (contexts paired with the teacher's choice).
//! Both agents are trained jointly by gradient ascent on expected reward,
//! differentiating through the discrete channel with the straight-through
//! Gumbel-Softmax estimator.

pub mod autodiff;
pub mod env;
pub mod agents;
pub mod training;
pub mod experiments;
