pub mod bridge;
pub mod error;
pub mod harness;
pub mod image;
pub mod padm;
pub mod phantom;
pub mod projector;
pub mod trainer;

pub use error::{PadmError, Result};
