//! Automatic CAD-RADS scoring from coronary centerline trees and CT volumes.

pub mod centerline;
pub mod error;
pub mod inference;
pub mod labeler;
pub mod metrics;
pub mod mpr;
pub mod ordinal;
pub mod phantom;
pub mod pipeline;
pub mod volume;

pub use error::{Error, Result};
