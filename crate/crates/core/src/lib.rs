//! Metamorphic testing of black-box image captioning systems.
//!
//! Source images are reduced by cropping, stretching or rotating; caption
//! objects are located in the source image and their fate under each
//! reduction decides what the follow-up caption must (not) mention.

pub mod adapters;
pub mod alignment;
pub mod caption;
pub mod error;
pub mod harness;
pub mod imagery;
pub mod oracle;
pub mod selection;
pub mod transforms;

pub use error::{Error, Result};
