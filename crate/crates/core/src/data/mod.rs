//! Volume files, patch sampling, augmentation and synthetic volumes.

pub mod augment;
pub mod patch;
pub mod synth;
pub mod volume;
