#![allow(clippy::needless_range_loop)]

pub mod attention;
pub mod doc;
pub mod embedder;
pub mod error;
pub mod harness;
pub mod heads;
pub mod numerics;
pub mod pretrain;
pub mod serializer;

pub use error::{Error, Result};
