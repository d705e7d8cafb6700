pub mod assignment;
pub mod autodiff;
pub mod error;
pub mod harness;
pub mod ordering;
pub mod perm_optim;
pub mod sinkhorn;

pub use error::{Error, Result};
