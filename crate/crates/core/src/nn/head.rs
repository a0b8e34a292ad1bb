use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Tensor};
use crate::error::{invalid, Result};

/// Fully connected layer over the concatenated per-landmark features.
///
/// Features for sample `b` are the `patches` rows `b·K .. (b+1)·K` of the
/// encoder output, concatenated in landmark order into one
/// `K · feature_dim` vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub patches: usize,
    pub feature_dim: usize,
    pub outputs: usize,
    /// `outputs × (patches · feature_dim)`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Head {
    pub fn new(patches: usize, feature_dim: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let fan_in = patches * feature_dim;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Head {
            patches,
            feature_dim,
            outputs,
            weight: (0..outputs * fan_in).map(|_| rng.gen_range(-bound..bound)).collect(),
            bias: (0..outputs).map(|_| rng.gen_range(-bound..bound)).collect(),
        }
    }

    pub fn zeros(patches: usize, feature_dim: usize, outputs: usize) -> Self {
        Head {
            patches,
            feature_dim,
            outputs,
            weight: vec![0.0; outputs * patches * feature_dim],
            bias: vec![0.0; outputs],
        }
    }

    pub fn input_len(&self) -> usize {
        self.patches * self.feature_dim
    }

    fn batch_of(&self, features: &Tensor) -> Result<usize> {
        let [n, f, h, w] = features.dims();
        if f != self.feature_dim || h != 1 || w != 1 || n % self.patches != 0 || n == 0 {
            return Err(invalid(format!(
                "head expects a multiple of {} feature rows of width {}, got {:?}",
                self.patches,
                self.feature_dim,
                features.dims()
            )));
        }
        Ok(n / self.patches)
    }

    /// Returns a `batch × outputs` row-major matrix.
    pub fn forward(&self, features: &Tensor) -> Result<Vec<f64>> {
        let batch = self.batch_of(features)?;
        let mut out: Vec<f64> = (0..batch).flat_map(|_| self.bias.iter().copied()).collect();
        gemm(batch, self.input_len(), self.outputs, features.data(), false, &self.weight, true, &mut out, true);
        Ok(out)
    }

    /// Feature gradient and `[dweight, dbias]` for an upstream `batch ×
    /// outputs` gradient.
    pub fn backward(&self, features: &Tensor, dout: &[f64]) -> Result<(Tensor, Vec<Vec<f64>>)> {
        let batch = self.batch_of(features)?;
        if dout.len() != batch * self.outputs {
            return Err(invalid("head output gradient has the wrong length"));
        }
        let k = self.input_len();
        let mut dw = vec![0.0; self.weight.len()];
        gemm(self.outputs, batch, k, dout, true, features.data(), false, &mut dw, false);
        let mut db = vec![0.0; self.outputs];
        for row in dout.chunks_exact(self.outputs) {
            db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        let mut dx = vec![0.0; batch * k];
        gemm(batch, self.outputs, k, dout, false, &self.weight, false, &mut dx, false);
        Ok((Tensor::from_vec(features.dims(), dx)?, vec![dw, db]))
    }

    pub fn params(&self) -> Vec<&Vec<f64>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_features_zero_bias_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut head = Head::new(17, 64, 8, &mut rng);
        head.bias.fill(0.0);
        let out = head.forward(&Tensor::zeros([17, 64, 1, 1])).unwrap();
        assert_eq!(out, vec![0.0; 8]);
    }

    #[test]
    fn step_one_input_is_1088_wide() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = Head::new(17, 64, 8, &mut rng);
        assert_eq!(head.input_len(), 1088);
        assert_eq!(head.weight.len(), 8 * 1088);
    }

    #[test]
    fn unit_probe_reads_weight_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = Head::new(4, 5, 3, &mut rng);
        // patch 2, feature 3 -> concatenated index 13
        let mut x = Tensor::zeros([4, 5, 1, 1]);
        x.data_mut()[2 * 5 + 3] = 2.5;
        let out = head.forward(&x).unwrap();
        for q in 0..3 {
            let want = head.bias[q] + 2.5 * head.weight[q * 20 + 13];
            assert!((out[q] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_wrong_patch_count() {
        let head = Head::zeros(17, 8, 2);
        assert!(head.forward(&Tensor::zeros([16, 8, 1, 1])).is_err());
        assert!(head.forward(&Tensor::zeros([17, 7, 1, 1])).is_err());
        assert_eq!(head.forward(&Tensor::zeros([34, 8, 1, 1])).unwrap().len(), 4);
    }
}
