//! File formats: landmark manifests, prediction exports, model archives and
//! raster plots.

mod archive;
mod manifest;
mod plot;

pub use archive::{decode_model, encode_model, load_model, save_model, ModelArchive, ARCHIVE_VERSION};
pub use manifest::{
    export_predictions, load_manifest, parse_manifest, write_manifest, Manifest, ManifestEntry, Prediction,
};
pub use plot::{draw_line, draw_marker, error_chart, overlay_landmarks, Series};
