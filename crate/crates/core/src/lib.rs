//! Differentially private fine-tuning by sampling from the exponential
//! mechanism of a quadratic (Gauss-Newton) surrogate of the fine-tuning loss.
//!
//! The pieces, bottom-up:
//!
//! * [`linalg`]: dense SPD/eigen/QR kernels.
//! * [`model`]: MLPs with exact Jacobians, JVPs and VJPs.
//! * [`loss`], [`curvature`]: losses, per-point gradients, Gauss-Newton
//!   matrices and the (optionally projected) curvature bundle.
//! * [`privacy`]: empirical global bounds, closed-form sensitivity, the
//!   radius heuristic and the rejection-probability bound.
//! * [`mechanism`]: the ball-truncated Gaussian mechanism with rejection and
//!   Gibbs samplers and the random-subspace variant.
//! * [`baselines`]: SGD and a conservatively accounted DP-SGD.
//! * [`datasets`]: sinusoidal generator, IDX loader, tabular CSV.
//! * [`audit`]: Monte-Carlo checks of the privacy and accuracy guarantees.

pub mod audit;
pub mod baselines;
pub mod curvature;
pub mod datasets;
pub mod error;
pub mod linalg;
pub mod loss;
pub mod mechanism;
pub mod model;
pub mod par;
pub mod privacy;
pub mod stats;
pub mod truncnorm;

pub use error::{Error, Result};
