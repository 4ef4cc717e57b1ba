pub mod bench;
pub mod blob;
pub mod casg;
pub mod error;
pub mod gradcheck;
pub mod oracle;
pub mod pipeline;
pub mod s2rm;
pub mod suites;
pub mod tensor;

pub use error::{Error, Result};
