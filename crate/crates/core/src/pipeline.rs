//! The two-step system: vertebra centers on the resized whole image, then
//! four corners inside a fixed-size region around every predicted center.

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::{
    predict, predict_from, predict_stages, stage_errors, train_cascade, CascadeModel, FrameGeometry, Sample, TrainConfig,
    TrainReport,
};
use crate::error::{invalid, Result};
use crate::imaging::{clahe, hflip, resize_to_height, window_origin, ClaheParams, GrayImage, PatchSpec};
use crate::metrics::normalized_mse;
use crate::shape::{denormalize_shape, NormalizedShape, Point, Shape, ShapeKind};

pub const WORKING_HEIGHT: usize = 680;
pub const ROI_HEIGHT: usize = 80;
pub const ROI_WIDTH: usize = 96;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Contrast enhancement applied before resizing; `None` skips it.
    pub clahe: Option<ClaheParams>,
    pub height: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { clahe: Some(ClaheParams::default()), height: WORKING_HEIGHT }
    }
}

/// Working-frame size over raw-frame size, per axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScale {
    pub sx: f64,
    pub sy: f64,
}

impl FrameScale {
    pub fn to_working(&self, raw: &Shape) -> Shape {
        raw.scaled(self.sx, self.sy)
    }

    pub fn to_raw(&self, working: &Shape) -> Shape {
        working.scaled(1.0 / self.sx, 1.0 / self.sy)
    }
}

/// Enhances and resizes a raw image into the working frame.
pub fn preprocess(raw: &GrayImage, cfg: &PreprocessConfig) -> Result<(GrayImage, FrameScale)> {
    if raw.is_empty() || cfg.height == 0 {
        return Err(invalid("cannot preprocess an empty image"));
    }
    let enhanced = match &cfg.clahe {
        Some(p) => clahe(raw, p),
        None => raw.clone(),
    };
    let working = resize_to_height(&enhanced, cfg.height);
    let scale = FrameScale {
        sx: working.width() as f64 / raw.width() as f64,
        sy: working.height() as f64 / raw.height() as f64,
    };
    Ok((working, scale))
}

/// A fixed-size window of the working image around one vertebra center.
#[derive(Clone, Debug, PartialEq)]
pub struct Roi {
    /// Working-frame pixel of the window's top-left corner.
    pub origin: (isize, isize),
    pub image: GrayImage,
}

impl Roi {
    /// Shifts a shape from RoI pixels into working-frame pixels.
    pub fn to_working(&self, shape: &Shape) -> Shape {
        shape.translated(self.origin.0 as f64, self.origin.1 as f64)
    }

    pub fn to_roi(&self, shape: &Shape) -> Shape {
        shape.translated(-self.origin.0 as f64, -self.origin.1 as f64)
    }
}

/// Copies the `ROI_HEIGHT × ROI_WIDTH` window centered on the rounded
/// `center`, zero outside the image.
pub fn extract_roi(working: &GrayImage, center: Point) -> Roi {
    let (ox, oy) = window_origin(center, ROI_HEIGHT, ROI_WIDTH);
    let image = GrayImage::from_fn(ROI_WIDTH, ROI_HEIGHT, |x, y| {
        working.get_padded(ox + x as isize, oy + y as isize)
    });
    Roi { origin: (ox, oy), image }
}

pub fn extract_rois(working: &GrayImage, centers: &Shape) -> Result<Vec<Roi>> {
    if centers.kind() != ShapeKind::Centers17 {
        return Err(invalid(format!("RoIs are cut at 17 centers, got {:?}", centers.kind())));
    }
    Ok(centers.points().iter().map(|&c| extract_roi(working, c)).collect())
}

/// Corner cascade inside one RoI, returned in working-frame pixels.
pub fn localize_corners(roi: &Roi, corner_model: &CascadeModel) -> Result<Shape> {
    Ok(roi.to_working(&predict(&roi.image, corner_model)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullModel {
    pub center_model: CascadeModel,
    pub corner_model: CascadeModel,
    pub preprocess: PreprocessConfig,
}

impl FullModel {
    pub fn validate(&self) -> Result<()> {
        if self.center_model.kind != ShapeKind::Centers17 || self.corner_model.kind != ShapeKind::Corners4 {
            return Err(invalid("full model needs a center cascade and a corner cascade"));
        }
        if self.center_model.geometry != FrameGeometry::WorkingHeight(self.preprocess.height) {
            return Err(invalid("center cascade geometry does not match the working height"));
        }
        if self.corner_model.geometry != (FrameGeometry::Roi { height: ROI_HEIGHT, width: ROI_WIDTH }) {
            return Err(invalid("corner cascade geometry does not match the RoI size"));
        }
        Ok(())
    }
}

/// Intermediate results of one two-step inference.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceTrace {
    pub scale: FrameScale,
    /// Center shapes after every step-1 stage, working frame.
    pub center_stages: Vec<Shape>,
    /// 68 corners in the working frame.
    pub working: Shape,
    /// 68 corners in the raw frame.
    pub landmarks: Shape,
}

/// Two-step inference. `init` replaces the normalized step-1 mean shape.
pub fn full_inference_trace(
    raw: &GrayImage,
    model: &FullModel,
    init: Option<&NormalizedShape>,
) -> Result<InferenceTrace> {
    model.validate()?;
    let (working, scale) = preprocess(raw, &model.preprocess)?;
    trace_working(&working, scale, model, init)
}

fn trace_working(
    working: &GrayImage,
    scale: FrameScale,
    model: &FullModel,
    init: Option<&NormalizedShape>,
) -> Result<InferenceTrace> {
    let norm = init.unwrap_or(&model.center_model.mean_shape);
    let s0 = denormalize_shape(norm, working.width() as f64, working.height() as f64)?;
    let center_stages = predict_from(working, &model.center_model, s0)?;
    let centers = center_stages.last().expect("at least S0");
    let rois = extract_rois(working, centers)?;
    let corners: Vec<Shape> =
        rois.par_iter().map(|roi| localize_corners(roi, &model.corner_model)).collect::<Result<_>>()?;
    let working_shape = Shape::from_vertebrae(&corners)?;
    let landmarks = scale.to_raw(&working_shape);
    Ok(InferenceTrace { scale, center_stages, working: working_shape, landmarks })
}

/// 68 corner landmarks in raw-image pixels.
pub fn full_inference(raw: &GrayImage, model: &FullModel) -> Result<Shape> {
    Ok(full_inference_trace(raw, model, None)?.landmarks)
}

/// A raw image with its 68 annotated corners in raw pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: GrayImage,
    pub landmarks: Shape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullTrainConfig {
    pub centers: TrainConfig,
    pub corners: TrainConfig,
    pub preprocess: PreprocessConfig,
    /// Add a mirrored copy of every training image.
    pub flip: bool,
    /// Uniform jitter, in pixels, of the training RoI centers around the GT
    /// centers.
    pub roi_jitter: f64,
    pub seed: u64,
}

impl Default for FullTrainConfig {
    fn default() -> Self {
        FullTrainConfig {
            centers: TrainConfig::centers(),
            corners: TrainConfig::corners(),
            preprocess: PreprocessConfig::default(),
            flip: true,
            roi_jitter: 8.0,
            seed: 0,
        }
    }
}

impl FullTrainConfig {
    /// Propagates one seed into both cascades.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.centers.seed = seed;
        self.corners.seed = seed.wrapping_add(1);
        self
    }
}

/// Working-frame images with their 68 corners, plus mirrored copies.
pub fn prepare_working(images: &[LabeledImage], cfg: &PreprocessConfig, flip: bool) -> Result<Vec<(GrayImage, Shape)>> {
    let per_image: Vec<Vec<(GrayImage, Shape)>> = images
        .par_iter()
        .map(|li| {
            if li.landmarks.kind() != ShapeKind::Full68 {
                return Err(invalid("training images need 68 corner landmarks"));
            }
            let (working, scale) = preprocess(&li.image, cfg)?;
            let gt = scale.to_working(&li.landmarks);
            let mut out = Vec::with_capacity(2);
            if flip {
                let mirrored = hflip(&working, &gt)?;
                out.push((working, gt));
                out.push(mirrored);
            } else {
                out.push((working, gt));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

/// Step-1 samples: working images with GT centers.
pub fn center_samples(working: &[(GrayImage, Shape)]) -> Result<Vec<Sample>> {
    working.iter().map(|(img, gt)| Ok(Sample { frame: img.clone(), gt: gt.centers()? })).collect()
}

/// Step-2 samples: one RoI per vertebra around its GT center shifted by
/// uniform jitter in `[-jitter, jitter]`, with the vertebra's corners in RoI
/// pixels.
pub fn corner_samples(working: &[(GrayImage, Shape)], jitter: f64, rng: &mut impl Rng) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(working.len() * 17);
    for (img, gt) in working {
        let centers = gt.centers()?;
        for (v, c) in centers.points().iter().enumerate() {
            let shift = if jitter > 0.0 {
                Point::new(rng.gen_range(-jitter..=jitter), rng.gen_range(-jitter..=jitter))
            } else {
                Point::default()
            };
            let roi = extract_roi(img, Point::new(c.x + shift.x, c.y + shift.y));
            let corners = roi.to_roi(&gt.vertebra(v)?);
            out.push(Sample { frame: roi.image, gt: corners });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FullTrainReport {
    pub centers: TrainReport,
    pub corners: TrainReport,
    /// Per-stage validation error of the center cascade (stage 0..N).
    pub center_validation: Vec<f64>,
    /// Per-stage validation error of the corner cascade on RoIs at GT
    /// centers (stage 0..N).
    pub corner_validation: Vec<f64>,
}

/// Trains both cascades independently; step 2 uses RoIs at (jittered) GT
/// centers.
pub fn train_full(train: &[LabeledImage], val: &[LabeledImage], cfg: &FullTrainConfig) -> Result<(FullModel, FullTrainReport)> {
    if train.is_empty() {
        return Err(invalid("cannot train on an empty dataset"));
    }
    let working = prepare_working(train, &cfg.preprocess, cfg.flip)?;
    let geometry = FrameGeometry::WorkingHeight(cfg.preprocess.height);
    let roi_geometry = FrameGeometry::Roi { height: ROI_HEIGHT, width: ROI_WIDTH };

    let (center_model, center_report) = {
        let samples = center_samples(&working)?;
        info!("training center cascade on {} images", samples.len());
        train_cascade(&samples, geometry, PatchSpec::CENTER, &cfg.centers)?
    };
    let (corner_model, corner_report) = {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let samples = corner_samples(&working, cfg.roi_jitter, &mut rng)?;
        drop(working);
        info!("training corner cascade on {} RoIs", samples.len());
        train_cascade(&samples, roi_geometry, PatchSpec::CORNER, &cfg.corners)?
    };

    let mut report =
        FullTrainReport { centers: center_report, corners: corner_report, ..Default::default() };
    if !val.is_empty() {
        let val_working = prepare_working(val, &cfg.preprocess, false)?;
        report.center_validation = stage_errors(&center_model, &center_samples(&val_working)?)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        report.corner_validation = stage_errors(&corner_model, &corner_samples(&val_working, 0.0, &mut rng)?)?;
    }
    let model = FullModel { center_model, corner_model, preprocess: cfg.preprocess };
    Ok((model, report))
}

/// Mean initial and final error at one perturbation level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub sigma: f64,
    /// Normalized MSE of the perturbed step-1 initialization against the GT
    /// centers.
    pub initial_mse: f64,
    /// Normalized MSE of the final 68 corners.
    pub final_mse: f64,
    /// `final_mse` per noise draw, averaged over images.
    pub final_per_draw: Vec<f64>,
}

/// Perturbs every normalized coordinate of the step-1 initial shape with
/// `N(0, σ²)` noise and records initial and final errors, averaged over
/// images and `draws` noise draws per σ.
pub fn init_sensitivity_experiment(
    model: &FullModel,
    test: &[LabeledImage],
    sigmas: &[f64],
    draws: usize,
    seed: u64,
) -> Result<Vec<SensitivityRow>> {
    if test.is_empty() || draws == 0 {
        return Err(invalid("sensitivity experiment needs images and at least one draw"));
    }
    if sigmas.iter().any(|s| !(*s >= 0.0)) {
        return Err(invalid("noise levels must be non-negative"));
    }
    model.validate()?;
    let prepared: Vec<(GrayImage, FrameScale)> =
        test.par_iter().map(|li| preprocess(&li.image, &model.preprocess)).collect::<Result<_>>()?;
    let mean = &model.center_model.mean_shape;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let noise = Normal::new(0.0, sigma).map_err(|e| invalid(e.to_string()))?;
        let mut jobs = Vec::with_capacity(draws * test.len());
        for d in 0..draws {
            for i in 0..test.len() {
                jobs.push((d, i, master.gen::<u64>()));
            }
        }
        let results: Vec<(usize, f64, f64)> = jobs
            .par_iter()
            .map(|&(d, i, s)| {
                let li = &test[i];
                let (w, h) = (li.image.width() as f64, li.image.height() as f64);
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let coords = mean.coords().iter().map(|c| c + noise.sample(&mut rng)).collect();
                let perturbed = NormalizedShape::new(mean.kind(), coords)?;
                let (working, scale) = &prepared[i];
                let trace = trace_working(working, *scale, model, Some(&perturbed))?;
                let init_raw = trace.scale.to_raw(&trace.center_stages[0]);
                let initial = normalized_mse(&init_raw, &li.landmarks.centers()?, w, h)?;
                let fin = normalized_mse(&trace.landmarks, &li.landmarks, w, h)?;
                Ok((d, initial, fin))
            })
            .collect::<Result<_>>()?;
        let n = results.len() as f64;
        let mut per_draw = vec![0.0; draws];
        for &(d, _, f) in &results {
            per_draw[d] += f / test.len() as f64;
        }
        let row = SensitivityRow {
            sigma,
            initial_mse: results.iter().map(|r| r.1).sum::<f64>() / n,
            final_mse: results.iter().map(|r| r.2).sum::<f64>() / n,
            final_per_draw: per_draw,
        };
        info!("sigma {sigma}: initial {:.3e} final {:.3e}", row.initial_mse, row.final_mse);
        rows.push(row);
    }
    Ok(rows)
}

/// Stage-indexed errors of a full model on labeled images, raw frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageEvaluation {
    /// Mean normalized MSE of the 17 centers after step-1 stage 0..N.
    pub centers: Vec<f64>,
    /// Mean normalized MSE of the 68 corners when step 2 stops after stage
    /// 0..M; the last entry is the full model's error.
    pub corners: Vec<f64>,
    /// Final per-image MSE, in input order.
    pub per_image: Vec<f64>,
    /// Final predictions in the raw frame, in input order.
    pub predictions: Vec<Shape>,
}

/// Runs both steps once per image and scores every intermediate stage.
pub fn evaluate_stages(model: &FullModel, images: &[LabeledImage]) -> Result<StageEvaluation> {
    if images.is_empty() {
        return Err(invalid("cannot evaluate on an empty dataset"));
    }
    model.validate()?;
    let per_image: Vec<(Vec<f64>, Vec<f64>, Shape)> = images
        .par_iter()
        .map(|li| {
            let (w, h) = (li.image.width() as f64, li.image.height() as f64);
            let (working, scale) = preprocess(&li.image, &model.preprocess)?;
            let s0 = denormalize_shape(&model.center_model.mean_shape, working.width() as f64, working.height() as f64)?;
            let center_stages = predict_from(&working, &model.center_model, s0)?;
            let gt_centers = li.landmarks.centers()?;
            let center_err = center_stages
                .iter()
                .map(|s| normalized_mse(&scale.to_raw(s), &gt_centers, w, h))
                .collect::<Result<Vec<_>>>()?;
            let rois = extract_rois(&working, center_stages.last().expect("at least S0"))?;
            let per_roi: Vec<Vec<Shape>> = rois
                .iter()
                .map(|roi| Ok(predict_stages(&roi.image, &model.corner_model)?.iter().map(|s| roi.to_working(s)).collect()))
                .collect::<Result<_>>()?;
            let mut corner_err = Vec::with_capacity(model.corner_model.stages.len() + 1);
            let mut last = None;
            for k in 0..=model.corner_model.stages.len() {
                let parts: Vec<Shape> = per_roi.iter().map(|s| s[k].clone()).collect();
                let raw = scale.to_raw(&Shape::from_vertebrae(&parts)?);
                corner_err.push(normalized_mse(&raw, &li.landmarks, w, h)?);
                last = Some(raw);
            }
            Ok((center_err, corner_err, last.expect("at least S0")))
        })
        .collect::<Result<_>>()?;
    let n = images.len() as f64;
    let mut centers = vec![0.0; model.center_model.stages.len() + 1];
    let mut corners = vec![0.0; model.corner_model.stages.len() + 1];
    for (c, k, _) in &per_image {
        centers.iter_mut().zip(c).for_each(|(acc, e)| *acc += e / n);
        corners.iter_mut().zip(k).for_each(|(acc, e)| *acc += e / n);
    }
    Ok(StageEvaluation {
        centers,
        corners,
        per_image: per_image.iter().map(|r| *r.1.last().expect("at least S0")).collect(),
        predictions: per_image.into_iter().map(|r| r.2).collect(),
    })
}

/// Per-image normalized MSE of predicted 68 corners in the raw frame.
pub fn evaluate(model: &FullModel, images: &[LabeledImage]) -> Result<Vec<f64>> {
    images
        .par_iter()
        .map(|li| {
            let pred = full_inference(&li.image, model)?;
            normalized_mse(&pred, &li.landmarks, li.image.width() as f64, li.image.height() as f64)
        })
        .collect()
}
