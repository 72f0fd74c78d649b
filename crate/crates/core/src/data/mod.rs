//! Dataset I/O, augmentation, pair sampling and synthetic sequences.

pub mod augment;
pub mod config;
pub mod frame;
pub mod mot;
pub mod pairs;
pub mod synth;

pub use augment::{augment_pair, AnnotatedFrame, AugmentParams, AugmentTrace};
pub use frame::Frame;
pub use mot::{BBox, Detection};
pub use pairs::{sample_pair, PairSample};
pub use synth::{generate_synthetic, SceneSequence, SynthConfig};
