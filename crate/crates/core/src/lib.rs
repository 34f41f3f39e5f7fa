//! Deep heteroscedastic regression toolkit.
//!
//! Dense symmetric linear algebra, closed-form divergences between Gaussians,
//! Mahalanobis-neighbourhood covariance pseudo-labels, a small reverse-mode
//! autodiff engine with mean/covariance MLPs, the training objectives built on
//! top of it, and the synthetic benchmark generators.
//!
//! The numerical core (`linalg`, `gaussian`, `pseudolabel`) is generic over
//! [`Real`] (`f32` or `f64`); the autodiff and training stack runs in `f64`.

pub mod autodiff;
pub mod datasets;
pub mod error;
pub mod gaussian;
pub mod linalg;
pub mod losses;
pub mod mlp;
pub mod optim;
pub mod pseudolabel;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use gaussian::{Gaussian, SqrtGaussian};
pub use linalg::{Matrix, SpdMatrix};
pub use scalar::Real;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Spd64 = SpdMatrix<f64>;
pub type Spd32 = SpdMatrix<f32>;
pub type Gaussian64 = Gaussian<f64>;
pub type Gaussian32 = Gaussian<f32>;
pub type Dataset64 = datasets::RegressionDataset<f64>;
pub type Dataset32 = datasets::RegressionDataset<f32>;
