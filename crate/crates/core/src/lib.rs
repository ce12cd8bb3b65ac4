pub mod color;
pub mod digest;
pub mod eas;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod image_io;
pub mod infer;
pub mod isp;
pub mod model;
pub mod nn;
pub mod resample;
pub mod scene;
pub mod train;
pub mod weights;

pub use color::{ColorSpace, IlluminantRgb, Image};
pub use error::{Error, Result};
