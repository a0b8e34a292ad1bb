//! Cascaded shape regression: every stage crops patches at the current
//! landmarks, regresses PCA coefficients of the remaining offset, and adds
//! the reconstructed offset back onto the shape.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::imaging::{crop_patch_into, GrayImage, PatchSpec};
use crate::metrics::normalized_mse;
use crate::nn::{lr_decay, AdamState, EncoderPreset, Regressor, Tensor, ADAM_LR};
use crate::shape::{
    compute_offsets, denormalize_shape, fit_transition, mean_shape, normalize_shape, project_offsets,
    reconstruct_offsets, NormalizedShape, Shape, ShapeKind, TransitionMatrix,
};

/// The frame a cascade operates in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameGeometry {
    /// Whole images resized to a fixed height; widths vary.
    WorkingHeight(usize),
    /// Fixed-size regions of interest.
    Roi { height: usize, width: usize },
}

impl FrameGeometry {
    pub fn check(&self, frame: &GrayImage) -> Result<()> {
        let ok = match *self {
            FrameGeometry::WorkingHeight(h) => frame.height() == h && frame.width() > 0,
            FrameGeometry::Roi { height, width } => frame.height() == height && frame.width() == width,
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("frame {}x{} does not match {self:?}", frame.width(), frame.height())))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stages: usize,
    /// Retained eigenvectors per stage; ignored without PCA.
    pub q: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub encoder: EncoderPreset,
    /// Regress PCA coefficients (`true`) or raw coordinate offsets.
    pub pca: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults for the 17-center cascade.
    pub fn centers() -> Self {
        TrainConfig {
            stages: 3,
            q: 8,
            epochs: 8,
            batch_size: 2,
            lr: ADAM_LR,
            encoder: EncoderPreset::Full,
            pca: true,
            seed: 0,
        }
    }

    /// Defaults for the per-vertebra corner cascade.
    pub fn corners() -> Self {
        TrainConfig { q: 5, ..Self::centers() }
    }

    pub fn validate(&self, kind: ShapeKind) -> Result<()> {
        let p = kind.coords();
        if self.pca && (self.q == 0 || self.q >= p) {
            return Err(invalid(format!("Q must satisfy 1 <= Q < {p}, got {}", self.q)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("epochs and batch size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    fn outputs(&self, kind: ShapeKind) -> usize {
        if self.pca {
            self.q
        } else {
            kind.coords()
        }
    }
}

/// One trained stage: encoder and head plus the basis its outputs live in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRegressor {
    pub regressor: Regressor,
    pub transition: TransitionMatrix,
    pub patch: PatchSpec,
}

impl StageRegressor {
    /// Eigen-coefficients predicted from patches around `prev`.
    pub fn coefficients(&self, frame: &GrayImage, prev: &Shape) -> Result<Vec<f64>> {
        if prev.len() != self.regressor.patches() || 2 * prev.len() != self.transition.p() {
            return Err(invalid(format!(
                "stage expects {} landmarks, shape has {}",
                self.regressor.patches(),
                prev.len()
            )));
        }
        self.regressor.predict(patch_tensor(&[(frame, prev)], &self.patch)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeModel {
    pub kind: ShapeKind,
    pub mean_shape: NormalizedShape,
    pub stages: Vec<StageRegressor>,
    pub geometry: FrameGeometry,
    pub patch: PatchSpec,
}

/// A frame with its ground-truth landmarks in frame pixels.
#[derive(Clone, Debug)]
pub struct Sample {
    pub frame: GrayImage,
    pub gt: Shape,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    /// Mean mini-batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean normalized MSE over the training set after this stage.
    pub train_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_error: f64,
    pub stages: Vec<StageReport>,
}

impl TrainReport {
    /// Training error at stage 0 (mean shape) through stage N.
    pub fn errors(&self) -> Vec<f64> {
        std::iter::once(self.initial_error).chain(self.stages.iter().map(|s| s.train_error)).collect()
    }
}

/// De-normalizes the mean shape into a frame of the given size.
pub fn init_shape(mean: &NormalizedShape, wid: f64, hei: f64) -> Result<Shape> {
    denormalize_shape(mean, wid, hei)
}

fn frame_init(mean: &NormalizedShape, frame: &GrayImage) -> Result<Shape> {
    init_shape(mean, frame.width() as f64, frame.height() as f64)
}

/// Stacks patches for `(frame, shape)` pairs into a `[B·K, 1, h, w]` tensor,
/// sample-major and landmark order within a sample.
pub fn patch_tensor(items: &[(&GrayImage, &Shape)], spec: &PatchSpec) -> Result<Tensor> {
    let k = items.first().map(|(_, s)| s.len()).unwrap_or(0);
    if k == 0 || items.iter().any(|(_, s)| s.len() != k) {
        return Err(invalid("patch batch needs non-empty shapes of equal size"));
    }
    let len = spec.out_len();
    let mut buf = vec![0f32; len];
    let mut data = Vec::with_capacity(items.len() * k * len);
    for (frame, shape) in items {
        for p in shape.points() {
            crop_patch_into(frame, *p, spec, &mut buf);
            data.extend(buf.iter().map(|&v| v as f64));
        }
    }
    Tensor::from_vec([items.len() * k, 1, spec.out_h, spec.out_w], data)
}

/// `prev + Wᵀ·R(prev)` for one stage.
pub fn run_stage(frame: &GrayImage, prev: &Shape, stage: &StageRegressor) -> Result<Shape> {
    let coeffs = stage.coefficients(frame, prev)?;
    prev.offset_by(&reconstruct_offsets(&stage.transition, &coeffs)?)
}

/// Shapes after every stage, starting from `s0`: `[S0, S1, ..., SN]`.
pub fn predict_from(frame: &GrayImage, model: &CascadeModel, s0: Shape) -> Result<Vec<Shape>> {
    model.geometry.check(frame)?;
    if s0.kind() != model.kind {
        return Err(invalid(format!("initial shape is {:?}, model is {:?}", s0.kind(), model.kind)));
    }
    let mut out = Vec::with_capacity(model.stages.len() + 1);
    out.push(s0);
    for stage in &model.stages {
        let next = run_stage(frame, out.last().expect("non-empty"), stage)?;
        out.push(next);
    }
    Ok(out)
}

/// Shapes after every stage from the mean-shape initialization.
pub fn predict_stages(frame: &GrayImage, model: &CascadeModel) -> Result<Vec<Shape>> {
    predict_from(frame, model, frame_init(&model.mean_shape, frame)?)
}

/// Final shape of the cascade. A model without stages returns `S0`.
pub fn predict(frame: &GrayImage, model: &CascadeModel) -> Result<Shape> {
    Ok(predict_stages(frame, model)?.pop().expect("at least S0"))
}

/// Mean normalized MSE over `samples` at every stage, `[stage 0, ..., N]`.
pub fn stage_errors(model: &CascadeModel, samples: &[Sample]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(invalid("no samples to evaluate"));
    }
    let per_sample: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| {
            let (w, h) = (s.frame.width() as f64, s.frame.height() as f64);
            predict_stages(&s.frame, model)?.iter().map(|p| normalized_mse(p, &s.gt, w, h)).collect()
        })
        .collect::<Result<_>>()?;
    let n = samples.len() as f64;
    Ok((0..=model.stages.len()).map(|k| per_sample.iter().map(|e| e[k]).sum::<f64>() / n).collect())
}

fn mean_error(shapes: &[Shape], samples: &[Sample]) -> Result<f64> {
    let total = shapes.iter().zip(samples).try_fold(0.0, |acc, (s, x)| {
        Ok::<_, Error>(acc + normalized_mse(s, &x.gt, x.frame.width() as f64, x.frame.height() as f64)?)
    })?;
    Ok(total / samples.len() as f64)
}

fn check_samples(samples: &[Sample], geometry: FrameGeometry) -> Result<ShapeKind> {
    let first = samples.first().ok_or_else(|| invalid("cannot train on an empty dataset"))?;
    let kind = first.gt.kind();
    for s in samples {
        geometry.check(&s.frame)?;
        if s.gt.kind() != kind {
            return Err(invalid("training samples mix landmark kinds"));
        }
    }
    Ok(kind)
}

fn train_stage(
    samples: &[Sample],
    current: &[Shape],
    targets: &[Vec<f64>],
    regressor: &mut Regressor,
    patch: &PatchSpec,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut opt = AdamState::new(cfg.lr);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let items: Vec<(&GrayImage, &Shape)> = batch.iter().map(|&i| (&samples[i].frame, &current[i])).collect();
            let x = patch_tensor(&items, patch)?;
            let y: Vec<f64> = batch.iter().flat_map(|&i| targets[i].iter().copied()).collect();
            total += regressor.train_step(x, &y, &mut opt)?;
            batches += 1;
        }
        let mean = total / batches as f64;
        debug!("epoch {epoch}: loss {mean:.4} lr {:.3e}", opt.lr);
        epoch_losses.push(mean);
        opt = lr_decay(opt);
    }
    Ok(epoch_losses)
}

/// Trains a cascade: mean-shape initialization, then per stage a fresh
/// transition matrix from the current offsets, a regressor fitted to the
/// projected offsets, and an update of every training shape.
pub fn train_cascade(
    samples: &[Sample],
    geometry: FrameGeometry,
    patch: PatchSpec,
    cfg: &TrainConfig,
) -> Result<(CascadeModel, TrainReport)> {
    let kind = check_samples(samples, geometry)?;
    cfg.validate(kind)?;
    patch.validate()?;
    let normalized: Vec<NormalizedShape> = samples
        .iter()
        .map(|s| normalize_shape(&s.gt, s.frame.width() as f64, s.frame.height() as f64))
        .collect::<Result<_>>()?;
    let mean = mean_shape(&normalized)?;
    let mut current: Vec<Shape> = samples.iter().map(|s| frame_init(&mean, &s.frame)).collect::<Result<_>>()?;
    let gt: Vec<Shape> = samples.iter().map(|s| s.gt.clone()).collect();
    let mut report = TrainReport { initial_error: mean_error(&current, samples)?, stages: Vec::new() };
    info!("{kind:?} cascade: stage 0 training error {:.4e}", report.initial_error);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let enc_cfg = cfg.encoder.build(patch.out_h, patch.out_w);
    let mut stages = Vec::with_capacity(cfg.stages);
    for n in 0..cfg.stages {
        let offsets = compute_offsets(&gt, &current)?;
        let transition =
            if cfg.pca { fit_transition(&offsets, cfg.q)? } else { TransitionMatrix::identity(kind.coords()) };
        let targets: Vec<Vec<f64>> =
            offsets.columns().map(|d| project_offsets(&transition, d)).collect::<Result<_>>()?;
        let mut regressor = Regressor::new(enc_cfg.clone(), kind.landmarks(), cfg.outputs(kind), &mut rng)?;
        let epoch_losses = train_stage(samples, &current, &targets, &mut regressor, &patch, cfg, &mut rng)?;
        let stage = StageRegressor { regressor, transition, patch };
        current = samples
            .par_iter()
            .zip(current.par_iter())
            .map(|(s, prev)| run_stage(&s.frame, prev, &stage))
            .collect::<Result<_>>()?;
        let train_error = mean_error(&current, samples)?;
        if !train_error.is_finite() {
            return Err(Error::TrainingDiverged(format!("stage {} produced non-finite shapes", n + 1)));
        }
        info!("{kind:?} cascade: stage {} training error {train_error:.4e}", n + 1);
        report.stages.push(StageReport { epoch_losses, train_error });
        stages.push(stage);
    }
    Ok((CascadeModel { kind, mean_shape: mean, stages, geometry, patch }, report))
}

/// The ablation that regresses raw coordinate offsets (identity transition).
pub fn train_cascade_nopca(
    samples: &[Sample],
    geometry: FrameGeometry,
    patch: PatchSpec,
    cfg: &TrainConfig,
) -> Result<(CascadeModel, TrainReport)> {
    train_cascade(samples, geometry, patch, &TrainConfig { pca: false, ..cfg.clone() })
}
