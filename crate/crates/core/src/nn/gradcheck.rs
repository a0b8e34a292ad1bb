//! Central finite-difference checks of every hand-written reverse pass on
//! small random inputs and the tiny encoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{BatchNorm, Conv2d, DepthwiseConv, Op};
use super::*;

/// Probe step of the central differences.
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const GRADCHECK_TOL: f64 = 1e-6;
const H: f64 = GRADCHECK_STEP;

fn random_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, dims: [usize; 4], scale: f64) -> Tensor {
    Tensor::from_vec(dims, random_vec(rng, dims.iter().product(), scale)).expect("dims match length")
}

/// `|a − n| / max(|a|, |n|, floor)` with `floor = 1e-4 · (1 + |L|)`.
///
/// A central difference at `h = 1e-5` carries a round-off of roughly
/// `1e-11 · |L|`, so gradient entries below the floor cannot be resolved
/// and are compared on an absolute scale instead. This matters for weights
/// feeding a normalization layer, whose true gradient is close to zero.
fn max_rel_error(analytic: &[f64], numeric: &[f64], loss: f64) -> f64 {
    if analytic.len() != numeric.len() {
        return f64::INFINITY;
    }
    let floor = 1e-4 * (1.0 + loss.abs());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn numeric_grad(len: usize, mut eval: impl FnMut(usize, f64) -> f64) -> Vec<f64> {
    (0..len).map(|i| (eval(i, H) - eval(i, -H)) / (2.0 * H)).collect()
}

/// Probes an op with `L = Σ r·y` and checks the input gradient and every
/// parameter gradient.
fn check_op(op: Op, x: Tensor, rng: &mut ChaCha8Rng) -> f64 {
    let (y, cache) = op.forward(x.clone(), Mode::Train).expect("consistent shapes");
    let r = random_vec(rng, y.len(), 1.0);
    let dy = Tensor::from_vec(y.dims(), r.clone()).expect("output dims");
    let (dx, grads) = op.backward(cache.as_ref().expect("training cache"), dy).expect("consistent shapes");
    let l0 = dot(y.data(), &r);

    let loss = |op: &Op, x: Tensor| dot(op.forward(x, Mode::Train).expect("consistent shapes").0.data(), &r);
    let num_dx = numeric_grad(x.len(), |i, h| {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        loss(&op, xp)
    });
    let mut worst = max_rel_error(dx.data(), &num_dx, l0);

    let np = op.params().len();
    if grads.len() != np {
        return f64::INFINITY;
    }
    for k in 0..np {
        let len = op.params()[k].len();
        let num = numeric_grad(len, |i, h| {
            let mut o = op.clone();
            o.params_mut()[k][i] += h;
            loss(&o, x.clone())
        });
        worst = worst.max(max_rel_error(&grads[k], &num, l0));
    }
    worst
}

fn dense_conv_3x3_stride_2() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let op = Op::Conv(Conv2d::new(3, 4, 3, 2, &mut rng));
    let x = random_tensor(&mut rng, [2, 3, 7, 6], 1.0);
    check_op(op, x, &mut rng)
}

fn dense_conv_1x1_stride_2() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut conv = Conv2d::new(1, 3, 1, 2, &mut rng);
    conv.bias = random_vec(&mut rng, 3, 0.5);
    check_op(Op::Conv(conv), random_tensor(&mut rng, [2, 1, 5, 8], 1.0), &mut rng)
}

fn pointwise_conv() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let op = Op::Conv(Conv2d::new(5, 3, 1, 1, &mut rng));
    check_op(op, random_tensor(&mut rng, [3, 5, 4, 3], 1.0), &mut rng)
}

fn depthwise_conv(stride: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(4 + stride as u64);
    let op = Op::Depthwise(DepthwiseConv::new(3, stride, &mut rng));
    check_op(op, random_tensor(&mut rng, [2, 3, 7, 5], 1.0), &mut rng)
}

fn batch_norm_training_mode() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut bn = BatchNorm::new(3);
    bn.gamma = random_vec(&mut rng, 3, 2.0);
    bn.beta = random_vec(&mut rng, 3, 1.0);
    check_op(Op::Norm(bn), random_tensor(&mut rng, [3, 3, 3, 2], 2.0), &mut rng)
}

fn relu6_away_from_kinks() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // values spread over (-3, 9) with none within 1e-3 of 0 or 6
    let data: Vec<f64> = (0..60)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-3.0..9.0);
            if v.abs() > 1e-3 && (v - 6.0).abs() > 1e-3 {
                break v;
            }
        })
        .collect();
    let x = Tensor::from_vec([2, 3, 5, 2], data).expect("60 values");
    check_op(Op::Relu6, x, &mut rng)
}

fn head_gradients() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let head = Head::new(3, 4, 5, &mut rng);
    let x = random_tensor(&mut rng, [6, 4, 1, 1], 1.0);
    let r = random_vec(&mut rng, 10, 1.0);
    let (dx, grads) = head.backward(&x, &r).expect("consistent shapes");
    let loss = |h: &Head, x: &Tensor| dot(&h.forward(x).expect("consistent shapes"), &r);
    let l0 = loss(&head, &x);
    let num_dx = numeric_grad(x.len(), |i, h| {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        loss(&head, &xp)
    });
    let mut worst = max_rel_error(dx.data(), &num_dx, l0);
    for k in 0..2 {
        let num = numeric_grad(head.params()[k].len(), |i, h| {
            let mut hd = head.clone();
            hd.params_mut()[k][i] += h;
            loss(&hd, &x)
        });
        worst = worst.max(max_rel_error(&grads[k], &num, l0));
    }
    worst
}

fn check_encoder(config: EncoderConfig, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enc = Encoder::new(config.clone(), &mut rng).expect("valid config");
    for p in enc.params_mut() {
        for v in p.iter_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let x = random_tensor(&mut rng, [3, 1, config.in_h, config.in_w], 1.0);
    let forward = |e: &Encoder| e.forward(x.clone(), Mode::Train).expect("consistent shapes");
    let (feat, cache) = forward(&enc);
    let r = random_vec(&mut rng, feat.len(), 1.0);
    let upstream = Tensor::from_vec(feat.dims(), r.clone()).expect("feature dims");
    let grads = enc.backward(cache.as_ref().expect("training cache"), &upstream).expect("consistent shapes");
    let loss = |e: &Encoder| dot(forward(e).0.data(), &r);
    let l0 = dot(feat.data(), &r);
    let n = enc.params().len();
    if grads.len() != n {
        return f64::INFINITY;
    }
    (0..n)
        .map(|k| {
            let num = numeric_grad(enc.params()[k].len(), |i, h| {
                let mut e = enc.clone();
                e.params_mut()[k][i] += h;
                loss(&e)
            });
            max_rel_error(&grads[k], &num, l0)
        })
        .fold(0.0, f64::max)
}

fn dense_stem_encoder() -> f64 {
    let mut cfg = EncoderConfig::tiny(9, 8);
    cfg.stem_kernel = 3;
    check_encoder(cfg, 11)
}

fn stage_loss(reg: &Regressor, x: &Tensor, targets: &[f64]) -> f64 {
    let (pred, _) = reg.forward_train(x.clone()).expect("consistent shapes");
    smooth_l1(&pred, targets, SMOOTH_L1_BETA).expect("matching lengths").0 / 2.0
}

/// Batch-averaged smooth-L1 loss of a tiny-encoder regressor, differentiated
/// with respect to every parameter.
fn end_to_end_stage_loss() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let reg = Regressor::new(EncoderConfig::tiny(8, 10), 3, 4, &mut rng).expect("valid config");
    let x = random_tensor(&mut rng, [6, 1, 8, 10], 1.0);
    let (pred, cache) = reg.forward_train(x.clone()).expect("consistent shapes");
    // targets kept well outside the quadratic zone so the loss is smooth
    // under the probe step
    let targets: Vec<f64> = pred.iter().map(|p| p + if rng.gen() { 0.7 } else { -0.7 }).collect();
    let (l0, mut g) = smooth_l1(&pred, &targets, SMOOTH_L1_BETA).expect("matching lengths");
    g.iter_mut().for_each(|v| *v /= 2.0);
    let grads = reg.backward(&cache, &g).expect("consistent shapes");
    (0..reg.params().len())
        .map(|k| {
            let num = numeric_grad(reg.params()[k].len(), |i, h| {
                let mut r = reg.clone();
                r.params_mut()[k][i] += h;
                stage_loss(&r, &x, &targets)
            });
            max_rel_error(&grads[k], &num, l0 / 2.0)
        })
        .fold(0.0, f64::max)
}

/// Worst relative error of the analytic gradient against central
/// differences, per checked component.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    vec![
        ("dense conv 3x3 stride 2", dense_conv_3x3_stride_2()),
        ("dense conv 1x1 stride 2", dense_conv_1x1_stride_2()),
        ("pointwise conv", pointwise_conv()),
        ("depthwise conv stride 1", depthwise_conv(1)),
        ("depthwise conv stride 2", depthwise_conv(2)),
        ("batch norm", batch_norm_training_mode()),
        ("relu6", relu6_away_from_kinks()),
        ("regression head", head_gradients()),
        ("tiny encoder", check_encoder(EncoderConfig::tiny(10, 12), 9)),
        ("tiny encoder without norm", check_encoder(EncoderConfig::tiny(10, 12).without_norm(), 10)),
        ("tiny encoder with dense stem", dense_stem_encoder()),
        ("stage loss", end_to_end_stage_loss()),
    ]
}
