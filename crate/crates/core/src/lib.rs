pub mod cli;
pub mod error;
pub mod footprint;
pub mod lockfree;
pub mod pagemem;
pub mod presets;
pub mod report;
pub mod scheduler;
pub mod simengine;
pub mod tracer;

pub use error::{Error, Result};
