//! Learned initialisation of residual image classifiers.
//!
//! Local models ([`localinit`]) learn a distribution over 3×3 kernel slices
//! of one layer; global models ([`globalinit`]) map a whole computational
//! graph ([`archspace`]) to its parameters. [`harvest`] builds the weight
//! corpora the local models train on and [`evalkit`] compares
//! initialisations.

pub mod archspace;
pub mod autograd;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod harvest;
pub mod io;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod weights;
pub mod globalinit;
pub mod localinit;
