//! Region-disentangled fusion of style codes.
//!
//! The crate trains small networks that blend several style codes of a
//! frozen generator so that each input code controls one semantic region of
//! the output image, and composes codes through a binary hierarchy of such
//! networks.

pub mod api;
pub mod blender;
pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod fusion_net;
pub mod generator;
pub mod hierarchy;
pub mod image_io;
pub mod losses;
pub mod objective;
pub mod segmentation;
pub mod style_space;
pub mod training;

pub use error::{Error, Result};
