pub mod alerts;
pub mod bundle;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod explain;
pub mod features;
pub mod forest;
pub mod gnb;
pub mod impact;
pub mod record;
pub mod serving;
pub mod train;

pub use error::{Error, Result};
