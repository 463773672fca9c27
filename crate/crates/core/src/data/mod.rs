//! Synthetic training and evaluation clips.

pub mod dataset;
pub mod pnm;
pub mod synth;

pub use dataset::{read_dataset, write_dataset, Manifest, ManifestEntry};
pub use synth::{synthesize_snippet, Profile, Snippet, SynthConfig};
