pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datamodel;
pub mod error;
pub mod evaluation;
pub mod face_backbone;
pub mod fusion_head;
pub mod model;
pub mod nn;
pub mod preprocessing;
pub mod seed;
pub mod synthetic;
pub mod training;
pub mod video_backbone;

pub use error::{Error, Result};
