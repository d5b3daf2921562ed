//! Reference implementations used to cross-check the recursion engine:
//! scaled Baum-Welch recursions for first-order models and exhaustive
//! enumeration of state paths for any order on short series.

mod baum_welch;
mod brute_force;

pub use baum_welch::{bw_backward, bw_forward, bw_posteriors, ForwardBackwardTables};
pub use brute_force::{brute_force_joint, BruteForce, MAX_PATHS};
