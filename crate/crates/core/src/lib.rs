//! Volumetric mitochondria instance segmentation with split spatio-temporal
//! attention.
//!
//! The network ([`model::SttUnet`]) is a four-level 3D encoder-decoder whose
//! levels pair an anisotropic convolution block with an attention block
//! ([`sst::Sst`]) that attends within slices and across slices separately and
//! fuses the two maps. It predicts a semantic mask and an instance boundary
//! map; [`post`] turns those into instances and [`metrics`] scores them.
//! Training ([`train`]) adds an adversarial term from a small discriminator
//! that judges image-mask pairs.

mod error;

pub mod config;
pub mod data;
pub mod infer;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod post;
pub mod selftest;
pub mod sst;
pub mod train;

pub use error::{Error, Result};
pub use labels::LabelVolume;
