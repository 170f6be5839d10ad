//! Active domain adaptation at desk scale.
//!
//! Label acquisition by clustering uncertainty-weighted embeddings, the
//! baseline acquisition strategies it is compared against, and a small
//! two-part network trained with cross-entropy and minimax entropy.

pub mod clustering;
pub mod data;
pub mod driver;
pub mod error;
pub mod model;
pub mod numerics;
pub mod sampling;
pub mod uncertainty;

pub use error::{Error, Result};
pub use numerics::{Matrix, Vector};
