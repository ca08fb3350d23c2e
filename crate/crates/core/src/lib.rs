pub mod autodiff;
pub mod cdu;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod models;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod solayers;
pub mod tensor;
pub mod train;

pub use autodiff::{finite_diff_check, finite_diff_check_many, Graph, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};
