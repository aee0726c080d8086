//! Empirical Bayes estimation of a spatial field over a sensor network.
//!
//! Sensors at fixed locations take repeated noisy samples of an unknown
//! field. The field carries a Gaussian-process prior whose covariance is a
//! compactly supported kernel (so covariance matrices are sparse) and
//! whose mean solves a parametrized system of spatial dynamics - either a
//! discretized heat/Poisson equation or a natural cubic spline. The mean
//! hyperparameters are fitted by maximum likelihood, and the field is then
//! regressed by its posterior (MAP) at arbitrary points.
//!
//! Everything can run twice: centrally, or on a simulated synchronous
//! network where each node holds only its own samples and kernel row and
//! the estimate emerges from neighbor exchanges plus spanning-tree
//! reductions. The two routes agree to tight tolerances, which the test
//! suite pins down.

pub mod distnet;
pub mod dynamics;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod kernel;
pub mod model;
pub mod sparse;

pub use error::{Error, Result};
