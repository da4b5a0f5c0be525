pub mod atlas;
pub mod controller;
pub mod ellipsoid;
pub mod error;
pub mod model;
pub mod ocp;
pub mod qp;
pub mod sqp;
pub mod store;

pub use error::{Error, Result};
