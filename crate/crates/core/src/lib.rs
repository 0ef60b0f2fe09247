pub mod attack;
pub mod codec;
pub mod data;
pub mod detector;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod sweep;

pub use codec::{CodecConfig, Frame, FrameKind, LandmarkSet, MapStack, Point};
pub use detector::{DetectorModel, Image};
pub use error::{Error, Result};
