pub mod arena;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod losses;
pub mod tensor;
pub mod tournament;
pub mod verify;

pub use error::{Error, Result};
