//! Synthetic marine dataset: scene generation, rendering, augmentation
//! and the on-disk format.

pub mod augment;
pub mod container;
pub mod io;
pub mod render;
pub mod rig;
pub mod sample;
pub mod scene;

pub use augment::{augment, AugmentConfig};
pub use container::{TenFile, TenPayload};
pub use io::{read_dataset, read_sample, write_dataset, write_sample};
pub use render::Image;
pub use rig::SensorRig;
pub use sample::{generate_dataset, render_sample, to_model_input, DatasetSample, InputOptions, SynthConfig};
pub use scene::{generate_scene, Scene, SceneSpec};
