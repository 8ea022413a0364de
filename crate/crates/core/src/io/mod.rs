//! Image files, metrics, run configuration and diagnostic plots.

mod config;
mod image_io;
mod metrics;
mod plot;

pub use config::{CameraSettings, ConfigError, Paths, RunConfig, ZeroShotSettings};
pub use image_io::{
    load_image, load_image_native, load_mask, save_bitmap1, save_gray16, save_layer_map, save_mask8, save_png,
};
pub use metrics::{boundary_f1, mse, psnr, psnr_from_mse, ImageMetrics, MetricsReport};
pub use plot::Scatter;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {message}")]
    Decode { path: String, message: String },
    #[error("cannot encode {path}: {message}")]
    Encode { path: String, message: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
}
