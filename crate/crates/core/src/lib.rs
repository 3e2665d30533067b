pub mod channel;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod linalg;
pub mod net;
pub mod oracle;
pub mod pf;
pub mod train;
pub mod wmmse;
pub mod wsr;

pub use error::{Error, Result};
