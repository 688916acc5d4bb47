//! Hierarchical shape parsing of labeled images.
//!
//! A parser decomposes a `+1/-1` label grid into axis-aligned segments by
//! recursively applying binary split and assignment rules. Parsers are learned
//! by imitating an information-gain-maximizing expert ([`oracle`]) with the
//! mixed stochastic/deterministic actor-critic update in [`drag`], or with one
//! of the comparison learners in [`baselines`].

pub mod approximator;
pub mod baselines;
pub mod drag;
pub mod env;
pub mod error;
pub mod eval;
pub mod grammar;
pub mod oracle;
pub mod raster;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
