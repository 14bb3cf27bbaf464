//! Finite-difference gradient checks.

use prunelab::kernels::{
    batchnorm_apply, batchnorm_backward, conv2d_backward, conv2d_forward, global_avg_pool_backward,
    global_avg_pool_forward, linear_backward, linear_forward, relu_backward, relu_forward,
    softmax_cross_entropy, BatchNormParams, ConvParams, LinearParams, Mode,
};
use prunelab::model::{build_model, ArchitectureConfig, GroupSpec};
use prunelab::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-3;
pub const TOL: f64 = 1e-3;
pub const SEEDS: u64 = 20;

/// `sum(r * y)` accumulated in f64, the scalar every kernel check differentiates.
pub fn project(y: &Tensor, r: &Tensor) -> f64 {
    y.data()
        .iter()
        .zip(r.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

/// Norm-relative error of `analytic` against central differences of `f`
/// with respect to every entry of `x`.
pub fn check(x: &Tensor, analytic: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> f64 {
    assert_eq!(x.shape(), analytic.shape());
    let mut num = 0f64;
    let mut den = 0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let v = x.data()[i];
        probe.data_mut()[i] = (v as f64 + H) as f32;
        let up_step = probe.data()[i] as f64 - v as f64;
        let up = f(&probe);
        probe.data_mut()[i] = (v as f64 - H) as f32;
        let down_step = v as f64 - probe.data()[i] as f64;
        let down = f(&probe);
        probe.data_mut()[i] = v;
        let fd = (up - down) / (up_step + down_step);
        let a = analytic.data()[i] as f64;
        num += (fd - a).powi(2);
        den += fd.powi(2).max(a.powi(2));
    }
    if den == 0.0 {
        0.0
    } else {
        (num / den).sqrt()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Worst norm-relative error over `seeds` random cases.
pub fn conv_error(seeds: u64) -> f64 {
    let mut worst = 0f64;
    for seed in 0..seeds {
        let mut g = rng(seed);
        let stride = if seed % 2 == 0 { 1 } else { 2 };
        let k = if seed % 3 == 0 { 1 } else { 3 };
        let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut g);
        let p = ConvParams::new(Tensor::randn(&[3, 2, k, k], 1.0, &mut g), stride).unwrap();
        let y = conv2d_forward(&x, &p).unwrap();
        let r = Tensor::randn(y.shape(), 1.0, &mut g);
        let (gx, gw) = conv2d_backward(&x, &p, &r).unwrap();
        let ex = check(&x, &gx, |x| project(&conv2d_forward(x, &p).unwrap(), &r));
        let ew = check(&p.weight, &gw, |w| {
            project(
                &conv2d_forward(&x, &ConvParams::new(w.clone(), stride).unwrap()).unwrap(),
                &r,
            )
        });
        worst = worst.max(ex).max(ew);
    }
    worst
}

pub fn bn_params(c: usize, g: &mut ChaCha8Rng) -> BatchNormParams {
    let mut p = BatchNormParams::new(c);
    p.gamma = Tensor::randn(&[c], 1.0, g);
    p.beta = Tensor::randn(&[c], 1.0, g);
    p.running_mean = Tensor::randn(&[c], 0.5, g);
    p.running_var =
        Tensor::from_vec(&[c], (0..c).map(|_| g.random_range(0.5..2.0)).collect()).unwrap();
    p
}

/// Worst norm-relative error over `seeds` random cases.
pub fn batchnorm_error(seeds: u64) -> f64 {
    let mut worst = 0f64;
    for seed in 0..seeds {
        for mode in [Mode::Train, Mode::Eval] {
            let mut g = rng(seed);
            let x = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut g);
            let p = bn_params(3, &mut g);
            let r = Tensor::randn(x.shape(), 1.0, &mut g);
            let (gx, gg, gb) = batchnorm_backward(&x, &p, &r, mode).unwrap();
            let out = |x: &Tensor, p: &BatchNormParams| {
                project(&batchnorm_apply(x, p, mode).unwrap().0, &r)
            };
            let ex = check(&x, &gx, |x| out(x, &p));
            let eg = check(&p.gamma, &gg, |t| {
                let mut q = p.clone();
                q.gamma = t.clone();
                out(&x, &q)
            });
            let eb = check(&p.beta, &gb, |t| {
                let mut q = p.clone();
                q.beta = t.clone();
                out(&x, &q)
            });
            worst = worst.max(ex).max(eg).max(eb);
        }
    }
    worst
}

/// Worst norm-relative error over `seeds` random cases.
pub fn elementwise_error(seeds: u64) -> f64 {
    let mut worst = 0f64;
    for seed in 0..seeds {
        let mut g = rng(seed);
        // Keep ReLU inputs away from the kink.
        let mut x = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut g);
        for v in x.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1f32.copysign(*v);
            }
        }
        let r = Tensor::randn(x.shape(), 1.0, &mut g);
        let gx = relu_backward(&x, &r).unwrap();
        worst = worst.max(check(&x, &gx, |x| project(&relu_forward(x), &r)));

        let rp = Tensor::randn(&[2, 3], 1.0, &mut g);
        let gp = global_avg_pool_backward(x.shape(), &rp).unwrap();
        worst = worst.max(check(&x, &gp, |x| {
            project(&global_avg_pool_forward(x).unwrap(), &rp)
        }));

        let xin = Tensor::randn(&[3, 4], 1.0, &mut g);
        let lp = LinearParams {
            weight: Tensor::randn(&[5, 4], 1.0, &mut g),
            bias: Tensor::randn(&[5], 1.0, &mut g),
        };
        let rl = Tensor::randn(&[3, 5], 1.0, &mut g);
        let (glx, glw, glb) = linear_backward(&xin, &lp, &rl).unwrap();
        worst = worst.max(check(&xin, &glx, |x| {
            project(&linear_forward(x, &lp).unwrap(), &rl)
        }));
        worst = worst.max(check(&lp.weight, &glw, |w| {
            let q = LinearParams {
                weight: w.clone(),
                bias: lp.bias.clone(),
            };
            project(&linear_forward(&xin, &q).unwrap(), &rl)
        }));
        worst = worst.max(check(&lp.bias, &glb, |b| {
            let q = LinearParams {
                weight: lp.weight.clone(),
                bias: b.clone(),
            };
            project(&linear_forward(&xin, &q).unwrap(), &rl)
        }));

        let logits = Tensor::randn(&[4, 6], 1.0, &mut g);
        let labels: Vec<usize> = (0..4).map(|_| g.random_range(0..6)).collect();
        let (_, gl) = softmax_cross_entropy(&logits, &labels).unwrap();
        worst = worst.max(check(&logits, &gl, |z| cross_entropy_f64(z, &labels)));
    }
    worst
}

/// Mean cross-entropy computed entirely in f64.
pub fn cross_entropy_f64(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let mut total = 0f64;
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row
            .iter()
            .map(|&v| v as f64)
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + row
                .iter()
                .map(|&v| (v as f64 - max).exp())
                .sum::<f64>()
                .ln();
        total += lse - row[label] as f64;
    }
    total / labels.len() as f64
}

/// Two identity blocks plus one downsampling block, so both shortcut kinds
/// are differentiated.
pub fn toy_config() -> ArchitectureConfig {
    ArchitectureConfig {
        input_shape: [2, 6, 6],
        num_classes: 3,
        stem_width: 4,
        groups: vec![
            GroupSpec {
                blocks: 2,
                width: 4,
                stride: 1,
            },
            GroupSpec {
                blocks: 1,
                width: 6,
                stride: 2,
            },
        ],
    }
}

/// Sets every BN scale in `[0.2, 0.4]` and every shift to `+-5`. A
/// train-mode normalized value obeys `|x_hat| <= sqrt(m - 1)` for `m`
/// elements per channel (at most 144 here), so `|gamma * x_hat| < 4.8` and no
/// ReLU input lies within 0.2 of its kink: the loss is smooth around the
/// probe points. Negative shifts on `bn1` leave some channels dead.
pub fn keep_away_from_kinks(model: &mut prunelab::ModelGraph, g: &mut ChaCha8Rng) {
    let set = |bn: &mut BatchNormParams, allow_dead: bool, g: &mut ChaCha8Rng| {
        for v in bn.gamma.data_mut() {
            *v = g.random_range(0.2..0.4);
        }
        for v in bn.beta.data_mut() {
            *v = if allow_dead && g.random_bool(0.3) {
                -5.0
            } else {
                5.0
            };
        }
    };
    set(&mut model.stem.bn, false, g);
    for b in &mut model.blocks {
        set(&mut b.bn1, true, g);
        set(&mut b.bn2, false, g);
    }
}

/// Central differences of the training loss with respect to every
/// trainable scalar of a small model. Worst norm-relative error over
/// `seeds` random models.
pub fn model_error(seeds: u64) -> f64 {
    let mut worst = 0f64;
    for seed in 0..seeds {
        let mut g = rng(1000 + seed);
        let mut model = build_model(&toy_config(), seed).unwrap();
        keep_away_from_kinks(&mut model, &mut g);
        let x = Tensor::randn(&[4, 2, 6, 6], 1.0, &mut g);
        let labels: Vec<usize> = (0..4).map(|i| (i + seed as usize) % 3).collect();
        let (_, grads) = model.backward(&x, &labels, Mode::Train).unwrap();
        let names: Vec<String> = model.params().into_iter().map(|(n, _, _)| n).collect();
        let (mut num, mut den) = (0f64, 0f64);
        for (i, name) in names.iter().enumerate() {
            let analytic = grads.get(name).unwrap();
            for j in 0..analytic.len() {
                let loss_at = |delta: f64| {
                    let mut m = model.clone();
                    let mut params = m.params_mut();
                    let v = &mut params[i].tensor.data_mut()[j];
                    let before = *v;
                    *v = (*v as f64 + delta) as f32;
                    let step = *v as f64 - before as f64;
                    drop(params);
                    (
                        step,
                        cross_entropy_f64(
                            &m.forward(&x, Mode::Train, false).unwrap().logits,
                            &labels,
                        ),
                    )
                };
                let ((up_step, up), (down_step, down)) = (loss_at(H), loss_at(-H));
                let fd = (up - down) / (up_step - down_step);
                let a = analytic.data()[j] as f64;
                num += (fd - a).powi(2);
                den += fd.powi(2).max(a.powi(2));
            }
        }
        worst = worst.max((num / den).sqrt());
    }
    worst
}
