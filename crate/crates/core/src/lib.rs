//! Lane detection with decomposed image/lane/BEV cross-attention.

pub mod error;
pub mod attention;
pub mod bench;
pub mod geometry;
pub mod head;
pub mod layers;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod posembed;
pub mod synthlane;
pub mod train;
pub mod numerics;

pub use error::{Error, Result};
