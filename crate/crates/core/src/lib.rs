pub mod adapters;
pub mod autodiff;
pub mod container;
pub mod data;
pub mod error;
pub mod foundation;
pub mod heads;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tasks;
pub mod trainer;
pub mod verify;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
