//! Configuration, file formats and the end-to-end commands behind the CLI.

pub mod commands;
pub mod config;
pub mod formats;

pub use commands::{
    cmd_ablate, cmd_calibrate, cmd_detect, cmd_eval, cmd_gallery, cmd_synth, cmd_train, default_images, EvalSummary,
    Layout,
};
pub use config::RunConfig;
pub use formats::GalleryFile;
