//! Hidden Markov models of arbitrary order.
//!
//! The central piece is a backward recursion that produces, for every time
//! occasion `t`, the posterior distribution of the latent state given the
//! previous `h` states and the whole observed series. Because every quantity
//! carried through the recursion is a conditional probability, the pass never
//! rescales anything, yet it stays in range for series of any length.
//!
//! On top of the recursion the crate provides:
//!
//! * smoothed window posteriors and state marginals ([`recursion`]),
//! * the model log-likelihood from a single reference path,
//! * local decoding and one-step-ahead prediction,
//! * EM estimation for a zero-mean Gaussian volatility-regime emission model,
//!   BIC and `(h, k)` grid selection ([`em`]),
//! * independent reference implementations used to cross-check the above
//!   ([`oracle`]).
//!
//! States are 0-based everywhere in the library API. The command line tool
//! and the JSON/CSV files it writes use 1-based state labels.

pub mod em;
pub mod error;
pub mod io;
pub mod model;
pub mod oracle;
pub mod recursion;
pub mod tensor;

pub use em::{bic, e_step, fit, grid_search, m_step, EmSettings, ExpectedCounts, FitResult, GridReport};
pub use error::{HmmError, Result};
pub use model::{
    emission_density, param_count, simulate, EmissionFamily, ModelConfig, ObservationSeries,
    ParameterSet, Violation,
};
pub use recursion::{
    backward_pass, forward_joint_pass, local_decode, log_likelihood, peel, predict,
    state_marginals, terminal_posterior, windowed_full_conditional, PosteriorSlice,
    Prediction, RecursionOptions, SmoothedJoint, smooth, Smoothing,
};
