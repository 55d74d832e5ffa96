//! Dense associative memories built from energy functions.
//!
//! The crate covers binary dense associative memories and their storage
//! capacity, continuous energies with analytic gradients, clamped gradient
//! descent, hierarchical neuron/synapse graphs with an energy-based
//! transformer block, the memorization to generalization picture of
//! diffusion-like energies, clustering with associative memories, and
//! random-feature approximations of kernel-sum energies.

pub mod capacity;
pub mod clustering;
pub mod dynamics;
pub mod energies;
pub mod error;
pub mod format;
pub mod gradcheck;
pub mod hamux;
pub mod kernels;
pub mod memgen;
pub mod neurons;
pub mod numeric;
pub mod patterns;
pub mod transformer;

pub use energies::{Energy, EnergySpec, GradientReport, Scaling, Separation, Similarity};
pub use error::{AmError, Result};
pub use patterns::{ClampMask, PatternKind, PatternMatrix, StateVector};
