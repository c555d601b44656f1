//! Appearance-based gaze estimation for tablet front cameras.
//!
//! The pipeline runs frame → eye localization → 30x100 crops per eye →
//! appearance descriptor → PCA+LDA reduction → one regressor per screen axis.
//! Evaluation protocols and a temporal filter for continuous tracking sit on
//! top of it.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod eyes;
pub mod features;
pub mod imaging;
pub mod pipeline;
pub mod reduction;
pub mod regress;
pub mod seed;
pub mod tracking;

pub use error::{GazeError, Result};
