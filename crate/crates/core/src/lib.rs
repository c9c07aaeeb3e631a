//! Neural ODE classifiers whose dynamics are built from Cayley-orthogonalized
//! circular convolutions, plus the tooling to check what those dynamics
//! promise: Lipschitz bounds, Grönwall trajectory-divergence certificates,
//! contraction rates, and accuracy under FGSM / PGD / Gaussian perturbations.
//!
//! Module map:
//!
//! * [`numerics`]: tensors, FFTs, small complex linear algebra, circular convolution.
//! * [`layers`]: differentiable layers with hand-written backward passes.
//! * [`odeint`]: Euler / RK4 / Dormand–Prince integrators and the NODE block.
//! * [`lipschitz`]: spectral norms, Lipschitz bounds, Grönwall and contraction reports.
//! * [`adversary`]: FGSM, PGD and Gaussian perturbations.
//! * [`dataio`]: IDX loading, downscaling, synthetic data, augmentation.
//! * [`trainer`]: model assembly, loss, SGD, evaluation, checkpoints.
//! * [`selftest`]: the quick property suite run by the `selftest` command.
//! * [`reference`]: slow, independent reference implementations used as test oracles.

pub mod adversary;
pub mod dataio;
pub mod error;
pub mod layers;
pub mod lipschitz;
pub mod numerics;
pub mod odeint;
pub mod reference;
pub mod rng;
pub mod selftest;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{ComplexMatrix, FreqBlockOperator, Real, Tensor};
