//! Time-varying parameters of scalar SDEs, estimated by clustering a path
//! into a few stationary models with smooth, finite-element regularized
//! affiliations.
//!
//! The usual flow: pick or define a model ([`models`]), cluster a series
//! ([`subspace::run_subspace`]), choose `ε²` and `K` ([`hyperselect`]), and
//! optionally regress the cluster parameters on an auxiliary series to get
//! a closed model ([`closure`]). The guide in `book/` walks through each
//! step with runnable examples.

// `!(a < b)` is used on purpose so that NaN falls on the rejecting side.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod closure;
pub mod error;
pub mod gamma_solver;
pub mod hermite;
pub mod hyperselect;
pub mod io;
pub mod likelihood;
pub mod models;
pub mod optim;
pub mod series;
pub mod sim;
pub mod subspace;
pub mod synth;
pub mod theta_solver;

pub use error::{Error, Result};

// The guide's snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/likelihood.md")]
    mod likelihood {}
    #[doc = include_str!("../../../book/src/clustering.md")]
    mod clustering {}
    #[doc = include_str!("../../../book/src/hyperparameters.md")]
    mod hyperparameters {}
    #[doc = include_str!("../../../book/src/closure.md")]
    mod closure {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
