//! Patch encoder, regression head, loss and optimizer for one cascade stage.

mod adam;
mod encoder;
mod gradcheck;
mod head;
mod layers;
mod loss;
mod tensor;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, lr_decay, AdamState, ADAM_LR, LR_DECAY};
pub use encoder::{BlockSpec, Encoder, EncoderCache, EncoderConfig, EncoderPreset, FULL_BLOCKS};
pub use gradcheck::{gradient_suite, GRADCHECK_STEP, GRADCHECK_TOL};
pub use head::Head;
pub use layers::{BatchNorm, Conv2d, DepthwiseConv, Op, BN_EPS, BN_MOMENTUM};
pub use loss::{smooth_l1, SMOOTH_L1_BETA};
pub use tensor::Tensor;

use crate::error::{invalid, Result};

/// Whether normalization layers use batch statistics (and record caches for
/// backward) or their running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

/// Shared encoder applied to `K` patches per sample, followed by a linear
/// head over the concatenated features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regressor {
    pub encoder: Encoder,
    pub head: Head,
}

/// Everything `Regressor::backward` needs from a training forward pass.
pub struct RegressorCache {
    encoder: EncoderCache,
    features: Tensor,
}

impl Regressor {
    pub fn new(config: EncoderConfig, patches: usize, outputs: usize, rng: &mut impl Rng) -> Result<Self> {
        let encoder = Encoder::new(config, rng)?;
        let head = Head::new(patches, encoder.feature_dim(), outputs, rng);
        Ok(Regressor { encoder, head })
    }

    pub fn patches(&self) -> usize {
        self.head.patches
    }

    pub fn outputs(&self) -> usize {
        self.head.outputs
    }

    /// `patches` is `[B·K, 1, h, w]`, sample-major. Returns a `B × Q`
    /// row-major matrix.
    pub fn predict(&self, patches: Tensor) -> Result<Vec<f64>> {
        let (features, _) = self.encoder.forward(patches, Mode::Infer)?;
        self.head.forward(&features)
    }

    pub fn forward_train(&self, patches: Tensor) -> Result<(Vec<f64>, RegressorCache)> {
        let (features, cache) = self.encoder.forward(patches, Mode::Train)?;
        let out = self.head.forward(&features)?;
        let encoder = cache.ok_or_else(|| invalid("encoder returned no training cache"))?;
        Ok((out, RegressorCache { encoder, features }))
    }

    /// Gradients for `params()` order given `dL/dout`.
    pub fn backward(&self, cache: &RegressorCache, dout: &[f64]) -> Result<Vec<Vec<f64>>> {
        let (dfeat, head_grads) = self.head.backward(&cache.features, dout)?;
        let mut grads = self.encoder.backward(&cache.encoder, &dfeat)?;
        grads.extend(head_grads);
        Ok(grads)
    }

    pub fn update_running_stats(&mut self, cache: &RegressorCache) {
        self.encoder.update_running_stats(&cache.encoder);
    }

    pub fn params(&self) -> Vec<&Vec<f64>> {
        let mut p = self.encoder.params();
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut p = self.encoder.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// One optimizer step on a mini-batch; returns the batch loss
    /// (summed over outputs, averaged over samples).
    pub fn train_step(&mut self, patches: Tensor, targets: &[f64], opt: &mut AdamState) -> Result<f64> {
        let (pred, cache) = self.forward_train(patches)?;
        if targets.len() != pred.len() {
            return Err(invalid(format!("{} targets for {} predictions", targets.len(), pred.len())));
        }
        let batch = pred.len() / self.outputs();
        let (loss, mut grad) = smooth_l1(&pred, targets, SMOOTH_L1_BETA)?;
        let loss = loss / batch as f64;
        if !loss.is_finite() {
            return Err(crate::error::Error::TrainingDiverged(format!("stage loss became {loss}")));
        }
        grad.iter_mut().for_each(|g| *g /= batch as f64);
        let grads = self.backward(&cache, &grad)?;
        adam_step(&mut self.params_mut(), &grads, opt)?;
        self.update_running_stats(&cache);
        if self.params().iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(crate::error::Error::TrainingDiverged("parameters became non-finite".into()));
        }
        Ok(loss)
    }
}
