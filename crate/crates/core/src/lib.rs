pub mod accel;
pub mod data;
pub mod error;
pub mod inference;
pub mod linalg;
pub mod mc;
pub mod models;
pub mod nls;
pub mod ode;
pub mod preliminary;
pub mod quadrature;
pub mod sensitivity;
pub mod smoothing;

pub use data::Dataset;
pub use error::{Error, Result, Stage};
pub use ode::{OdeModel, ParameterVector, Tolerances, Trajectory};
