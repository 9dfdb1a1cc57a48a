//! Caption-to-action generation.
//!
//! A transformer encoder-decoder maps a tokenized caption plus a noise vector
//! to a sequence of two-actor pose frames. It is trained against three
//! critics (caption-action consistency, single-pose realism, pose-transition
//! realism) together with a nearest-target regression loss.

pub mod critics;
pub mod diffcore;
pub mod error;
pub mod generator;
pub mod motiondata;
pub mod nn;
pub mod selfcheck;
pub mod textproc;
pub mod training;

pub use error::{Error, Result};
