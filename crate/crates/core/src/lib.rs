pub mod checkpoint;
pub mod config;
pub mod diffengine;
pub mod error;
pub mod gapnet;
pub mod headmodel;
pub mod losses;
pub mod pipeline;
pub mod raster;
pub mod splatcore;
pub mod synthdata;
pub use error::{Error, Result};
