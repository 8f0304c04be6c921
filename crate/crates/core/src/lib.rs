//! Truncated Lipschitz binary regression under log loss.
//!
//! Fits values `w_i in [theta, 1 - theta]` on a labeled metric sample subject
//! to `|w_i - w_j| <= L rho(x_i, x_j)` by a short-step path-following
//! interior-point method with a certified suboptimality bound, and extends
//! them to new points by Lipschitz extension.

pub mod barrier;
pub mod cli;
pub mod data;
pub mod experiments;
pub mod linalg;
pub mod objective;
pub mod oracle;
pub mod predictor;
pub mod solver;
