//! Coarse-to-fine 3D scene flow estimation on point clouds.
//!
//! The crate is generic over the scalar type through [`Real`]; the `*64`
//! aliases below fix it to `f64`, which is what training and the gradient
//! checks use.

pub mod ablation;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod points;
pub mod scalar;
pub mod training;

pub use autodiff::{grad_check, grad_check_params, GradCheckReport, Graph, Tensor, Var};
pub use error::{Error, Result};
pub use optim::{AdamConfig, ParamStore};
pub use points::PointCloud;
pub use scalar::{Point3, Real};

pub type Graph64 = Graph<f64>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore64 = ParamStore<f64>;
pub type PointCloud64 = PointCloud<f64>;
