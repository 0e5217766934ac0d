pub mod behavior;
pub mod cli;
pub mod control;
pub mod error;
pub mod io;
pub mod linalg;
pub mod plant;
pub mod qp;
pub mod recursive;
pub mod soft_projection;

pub use error::{Error, Result};
