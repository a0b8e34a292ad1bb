#![allow(dead_code)]

use spine_cascade::cascade::{CascadeModel, FrameGeometry, TrainConfig};
use spine_cascade::imaging::{synth_generate, PatchSpec, SynthConfig};
use spine_cascade::nn::EncoderPreset;
use spine_cascade::pipeline::{
    train_full, FullModel, FullTrainConfig, LabeledImage, PreprocessConfig, ROI_HEIGHT, ROI_WIDTH,
};
use spine_cascade::shape::{normalize_shape, NormalizedShape, Point, Shape, ShapeKind};

pub fn synthetic(count: usize, seed: u64) -> Vec<LabeledImage> {
    synth_generate(&SynthConfig { count, ..Default::default() }, seed)
        .unwrap()
        .into_iter()
        .map(|s| LabeledImage { image: s.image, landmarks: s.corners })
        .collect()
}

/// A corner mean shape: an axis-aligned 40×24 box in the middle of the RoI.
pub fn corner_mean() -> NormalizedShape {
    let (cx, cy) = (ROI_WIDTH as f64 / 2.0, ROI_HEIGHT as f64 / 2.0);
    let pts = vec![
        Point::new(cx - 20.0, cy - 12.0),
        Point::new(cx + 20.0, cy - 12.0),
        Point::new(cx - 20.0, cy + 12.0),
        Point::new(cx + 20.0, cy + 12.0),
    ];
    let shape = Shape::new(ShapeKind::Corners4, pts).unwrap();
    normalize_shape(&shape, ROI_WIDTH as f64, ROI_HEIGHT as f64).unwrap()
}

/// Center mean shape: a vertical column down the middle of the frame.
pub fn center_mean() -> NormalizedShape {
    let coords = (0..17).flat_map(|i| [0.5, 0.1 + 0.05 * i as f64]).collect();
    NormalizedShape::new(ShapeKind::Centers17, coords).unwrap()
}

/// Zero-stage model: inference returns the mean shapes.
pub fn identity_model() -> FullModel {
    let preprocess = PreprocessConfig::default();
    FullModel {
        center_model: CascadeModel {
            kind: ShapeKind::Centers17,
            mean_shape: center_mean(),
            stages: Vec::new(),
            geometry: FrameGeometry::WorkingHeight(preprocess.height),
            patch: PatchSpec::CENTER,
        },
        corner_model: CascadeModel {
            kind: ShapeKind::Corners4,
            mean_shape: corner_mean(),
            stages: Vec::new(),
            geometry: FrameGeometry::Roi { height: ROI_HEIGHT, width: ROI_WIDTH },
            patch: PatchSpec::CORNER,
        },
        preprocess,
    }
}

pub fn tiny_train_config(seed: u64) -> FullTrainConfig {
    let tiny = |t: TrainConfig| TrainConfig { stages: 1, epochs: 1, encoder: EncoderPreset::Tiny, ..t };
    FullTrainConfig {
        centers: tiny(TrainConfig::centers()),
        corners: tiny(TrainConfig::corners()),
        ..FullTrainConfig::default()
    }
    .with_seed(seed)
}

/// One-stage tiny-encoder model trained on a handful of synthetic images.
pub fn tiny_trained_model(seed: u64) -> FullModel {
    let data = synthetic(3, 11);
    train_full(&data, &[], &tiny_train_config(seed)).unwrap().0
}
