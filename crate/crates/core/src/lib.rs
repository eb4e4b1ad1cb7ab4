//! Surface reconstruction from unoriented point clouds with a
//! dictionary-conditioned neural distance field and robust implicit MLS
//! refinement.

pub mod autodiff;
pub mod error;
pub mod extraction;
pub mod field;
pub mod geometry;
pub mod metrics;
pub mod pipeline;
pub mod rimls;
pub mod training;

pub use error::{Error, Result};
