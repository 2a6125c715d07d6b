//! Classifier abstraction: feature extractor φ, affine head, head surgery and checkpoints.

mod arch;
pub mod checkpoint;
mod classifier;

pub use arch::{Activation, ArchDescriptor, FeatureExtractor, Tape};
pub use classifier::{argmax, logit_margin, Classifier, ForwardPass};
