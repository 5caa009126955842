//! Bayesian neural networks trained and certified with interval bound
//! propagation.
//!
//! The crate covers the whole pipeline: a small reverse-mode autodiff
//! engine, feed-forward networks, interval bounds, IBP- and PGD-robust
//! likelihoods, approximate inference (natural-gradient VI, Bayes by
//! backprop, SWAG, HMC), adversarial attacks, certification of the
//! predictive mean, and uncertainty statistics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod autodiff;
pub mod certification;
pub mod data;
pub mod error;
pub mod inference;
pub mod interval_bound;
pub mod network;
pub mod robust_likelihood;
pub mod tensor;
pub mod training;
pub mod uncertainty;

pub use error::{Error, Result};
pub use network::{Dataset, Ensemble, Example, Network, NetworkArchitecture, WeightVector};
pub use tensor::Tensor;

/// Order-preserving map, parallel when the `parallel` feature is enabled.
pub(crate) mod par {
    /// Examples per work unit. Fixed so results do not depend on thread count.
    pub const CHUNK: usize = 8;

    #[cfg(feature = "parallel")]
    pub fn map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }

    #[cfg(not(feature = "parallel"))]
    pub fn map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
        items.iter().map(f).collect()
    }
}
