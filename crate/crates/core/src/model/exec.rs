use super::{ActivationCache, ModelGraph, ResidualBlock, ShortcutKind};
use crate::error::{Error, Result};
use crate::kernels::{
    batchnorm_apply, batchnorm_backward, conv2d_backward, conv2d_forward, global_avg_pool_backward,
    global_avg_pool_forward, linear_backward, linear_forward, relu_backward, relu_forward,
    softmax_cross_entropy, BatchStats, Mode,
};
use crate::optim::{sgd_step, Gradients, OptimizerState};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    /// Present only when capture was requested.
    pub activations: Option<ActivationCache>,
}

struct BlockTrace {
    x: Tensor,
    a1: Tensor,
    b1: Tensor,
    r1: Tensor,
    a2: Tensor,
    pre: Tensor,
}

struct Trace {
    input: Tensor,
    stem_a: Tensor,
    stem_b: Tensor,
    blocks: Vec<BlockTrace>,
    last: Tensor,
    pooled: Tensor,
}

#[derive(Debug, Clone, Copy)]
enum BnSlot {
    Stem,
    Block(usize, u8),
}

struct Run {
    logits: Tensor,
    trace: Option<Trace>,
    stats: Vec<(BnSlot, BatchStats)>,
    activations: Option<ActivationCache>,
}

fn shortcut_forward(block: &ResidualBlock, x: &Tensor) -> Result<Tensor> {
    match block.shortcut {
        ShortcutKind::Identity => Ok(x.clone()),
        ShortcutKind::PadDownsample => {
            let (n, cin, h, w) = x.dims4("shortcut")?;
            let s = block.stride();
            let (oh, ow) = (h.div_ceil(s), w.div_ceil(s));
            let cout = block.out_channels;
            let front = (cout - cin) / 2;
            let mut out = Tensor::zeros(&[n, cout, oh, ow]);
            let src = x.data();
            let dst = out.data_mut();
            for b in 0..n {
                for c in 0..cin {
                    for y in 0..oh {
                        for xx in 0..ow {
                            dst[((b * cout + c + front) * oh + y) * ow + xx] =
                                src[((b * cin + c) * h + y * s) * w + xx * s];
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}

fn shortcut_backward(block: &ResidualBlock, x_shape: &[usize], grad: &Tensor) -> Result<Tensor> {
    match block.shortcut {
        ShortcutKind::Identity => Ok(grad.clone()),
        ShortcutKind::PadDownsample => {
            let [n, cin, h, w] = x_shape[..] else {
                return Err(Error::structural("shortcut", "expected 4-D input"));
            };
            let (_, cout, oh, ow) = grad.dims4("shortcut grad")?;
            let s = block.stride();
            let front = (cout - cin) / 2;
            let mut gx = Tensor::zeros(x_shape);
            let src = grad.data();
            let dst = gx.data_mut();
            for b in 0..n {
                for c in 0..cin {
                    for y in 0..oh {
                        for xx in 0..ow {
                            dst[((b * cin + c) * h + y * s) * w + xx * s] =
                                src[((b * cout + c + front) * oh + y) * ow + xx];
                        }
                    }
                }
            }
            Ok(gx)
        }
    }
}

fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::structural(
            "residual add",
            format!("branch {:?} vs shortcut {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = a.clone();
    out.data_mut()
        .iter_mut()
        .zip(b.data())
        .for_each(|(x, y)| *x += y);
    Ok(out)
}

impl ModelGraph {
    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let (_, c, h, w) = batch.dims4("input")?;
        if [c, h, w] != self.config.input_shape {
            return Err(Error::structural(
                "input",
                format!(
                    "batch sample shape [{c}, {h}, {w}] != configured {:?}",
                    self.config.input_shape
                ),
            ));
        }
        Ok(())
    }

    fn run(&self, batch: &Tensor, mode: Mode, keep_trace: bool, capture: bool) -> Result<Run> {
        self.check_batch(batch)?;
        let mut stats = Vec::new();
        let mut keep_stats = |slot: BnSlot, s: Option<BatchStats>| {
            if let Some(s) = s {
                stats.push((slot, s));
            }
        };

        let stem_a = conv2d_forward(batch, &self.stem.conv).map_err(|e| e.at("stem"))?;
        let (stem_b, s) =
            batchnorm_apply(&stem_a, &self.stem.bn, mode).map_err(|e| e.at("stem"))?;
        keep_stats(BnSlot::Stem, s);
        let mut x = relu_forward(&stem_b);

        let mut traces = Vec::new();
        let mut activations = capture.then(ActivationCache::new);
        for (i, block) in self.blocks.iter().enumerate() {
            let at = |e: Error| e.at(&format!("block {}", block.id));
            let a1 = conv2d_forward(&x, &block.conv1).map_err(at)?;
            let (b1, s1) = batchnorm_apply(&a1, &block.bn1, mode).map_err(at)?;
            keep_stats(BnSlot::Block(i, 1), s1);
            let r1 = relu_forward(&b1);
            let a2 = conv2d_forward(&r1, &block.conv2).map_err(at)?;
            let (b2, s2) = batchnorm_apply(&a2, &block.bn2, mode).map_err(at)?;
            keep_stats(BnSlot::Block(i, 2), s2);
            let sc = shortcut_forward(block, &x).map_err(at)?;
            let pre = add(&b2, &sc).map_err(at)?;
            let y = relu_forward(&pre);
            if let Some(cache) = activations.as_mut() {
                cache.insert(block.id, b1.clone());
            }
            if keep_trace {
                traces.push(BlockTrace {
                    x,
                    a1,
                    b1,
                    r1,
                    a2,
                    pre,
                });
            }
            x = y;
        }

        let pooled = global_avg_pool_forward(&x).map_err(|e| e.at("head"))?;
        let logits = linear_forward(&pooled, &self.head).map_err(|e| e.at("head"))?;
        let trace = keep_trace.then(|| Trace {
            input: batch.clone(),
            stem_a,
            stem_b,
            blocks: traces,
            last: x,
            pooled,
        });
        Ok(Run {
            logits,
            trace,
            stats,
            activations,
        })
    }

    fn apply_stats(&mut self, stats: Vec<(BnSlot, BatchStats)>) {
        for (slot, s) in stats {
            match slot {
                BnSlot::Stem => self.stem.bn.update_running(&s),
                BnSlot::Block(i, 1) => self.blocks[i].bn1.update_running(&s),
                BnSlot::Block(i, _) => self.blocks[i].bn2.update_running(&s),
            }
        }
    }

    /// Runs the network. Train mode normalizes with batch statistics and
    /// folds them into the running estimates.
    pub fn forward(&mut self, batch: &Tensor, mode: Mode, capture: bool) -> Result<ForwardOutput> {
        let run = self.run(batch, mode, false, capture)?;
        self.apply_stats(run.stats);
        Ok(ForwardOutput {
            logits: run.logits,
            activations: run.activations,
        })
    }

    /// Eval-mode forward pass that never mutates the model.
    pub fn infer(&self, batch: &Tensor, capture: bool) -> Result<ForwardOutput> {
        let run = self.run(batch, Mode::Eval, false, capture)?;
        Ok(ForwardOutput {
            logits: run.logits,
            activations: run.activations,
        })
    }

    /// Mean cross-entropy loss without touching running statistics.
    pub fn loss(&self, batch: &Tensor, labels: &[usize], mode: Mode) -> Result<f32> {
        let run = self.run(batch, mode, false, false)?;
        Ok(softmax_cross_entropy(&run.logits, labels)?.0)
    }

    /// Loss and gradients of every trainable parameter, in [`ModelGraph::params`] order.
    /// Running statistics are left untouched.
    pub fn backward(
        &self,
        batch: &Tensor,
        labels: &[usize],
        mode: Mode,
    ) -> Result<(f32, Gradients)> {
        let run = self.run(batch, mode, true, false)?;
        let (loss, g) = softmax_cross_entropy(&run.logits, labels)?;
        let trace = run.trace.expect("trace requested");
        Ok((loss, self.backprop(&trace, &g, mode)?))
    }

    /// One SGD step on a training batch; returns the batch loss.
    pub fn train_step(
        &mut self,
        batch: &Tensor,
        labels: &[usize],
        opt: &mut OptimizerState,
    ) -> Result<f32> {
        let run = self.run(batch, Mode::Train, true, false)?;
        let (loss, g) = softmax_cross_entropy(&run.logits, labels)?;
        let trace = run.trace.expect("trace requested");
        let grads = self.backprop(&trace, &g, Mode::Train)?;
        self.apply_stats(run.stats);
        sgd_step(&mut self.params_mut(), &grads, opt)?;
        self.step += 1;
        Ok(loss)
    }

    fn backprop(&self, trace: &Trace, grad_logits: &Tensor, mode: Mode) -> Result<Gradients> {
        let head = |e: Error| e.at("head");
        let (g_pooled, g_hw, g_hb) =
            linear_backward(&trace.pooled, &self.head, grad_logits).map_err(head)?;
        let mut g = global_avg_pool_backward(trace.last.shape(), &g_pooled).map_err(head)?;

        let mut block_grads: Vec<[(String, Tensor); 6]> = Vec::with_capacity(self.blocks.len());
        for (block, t) in self.blocks.iter().zip(&trace.blocks).rev() {
            let at = |e: Error| e.at(&format!("block {}", block.id));
            let g_pre = relu_backward(&t.pre, &g).map_err(at)?;
            let (g_a2, g_gamma2, g_beta2) =
                batchnorm_backward(&t.a2, &block.bn2, &g_pre, mode).map_err(at)?;
            let (g_r1, g_w2) = conv2d_backward(&t.r1, &block.conv2, &g_a2).map_err(at)?;
            let g_b1 = relu_backward(&t.b1, &g_r1).map_err(at)?;
            let (g_a1, g_gamma1, g_beta1) =
                batchnorm_backward(&t.a1, &block.bn1, &g_b1, mode).map_err(at)?;
            let (g_x, g_w1) = conv2d_backward(&t.x, &block.conv1, &g_a1).map_err(at)?;
            let g_sc = shortcut_backward(block, t.x.shape(), &g_pre).map_err(at)?;
            g = add(&g_x, &g_sc).map_err(at)?;
            let p = block.id.to_string();
            block_grads.push([
                (format!("{p}.conv1.weight"), g_w1),
                (format!("{p}.bn1.gamma"), g_gamma1),
                (format!("{p}.bn1.beta"), g_beta1),
                (format!("{p}.conv2.weight"), g_w2),
                (format!("{p}.bn2.gamma"), g_gamma2),
                (format!("{p}.bn2.beta"), g_beta2),
            ]);
        }

        let stem = |e: Error| e.at("stem");
        let g_sb = relu_backward(&trace.stem_b, &g).map_err(stem)?;
        let (g_sa, g_sgamma, g_sbeta) =
            batchnorm_backward(&trace.stem_a, &self.stem.bn, &g_sb, mode).map_err(stem)?;
        let (_, g_sw) = conv2d_backward(&trace.input, &self.stem.conv, &g_sa).map_err(stem)?;

        let mut entries = vec![
            ("stem.conv.weight".to_string(), g_sw),
            ("stem.bn.gamma".to_string(), g_sgamma),
            ("stem.bn.beta".to_string(), g_sbeta),
        ];
        for group in block_grads.into_iter().rev() {
            entries.extend(group);
        }
        entries.push(("head.weight".to_string(), g_hw));
        entries.push(("head.bias".to_string(), g_hb));
        Ok(Gradients { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ArchitectureConfig, BlockId};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> ModelGraph {
        build_model(&ArchitectureConfig::resnet8([3, 8, 8], 4), 3).unwrap()
    }

    #[test]
    fn logits_shape() {
        let m = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = m
            .infer(&Tensor::randn(&[5, 3, 8, 8], 1.0, &mut rng), true)
            .unwrap();
        assert_eq!(out.logits.shape(), &[5, 4]);
        let acts = out.activations.unwrap();
        assert_eq!(acts.len(), 3);
        assert_eq!(acts[&BlockId::new(1, 0)].shape(), &[5, 16, 4, 4]);
    }

    #[test]
    fn zero_input_gives_zero_logits() {
        let m = build_model(&ArchitectureConfig::resnet56(10), 0).unwrap();
        let out = m.infer(&Tensor::zeros(&[1, 3, 32, 32]), false).unwrap();
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
        assert!(out.activations.is_none());
    }

    #[test]
    fn wrong_input_shape_is_structural() {
        let m = toy();
        assert!(matches!(
            m.infer(&Tensor::zeros(&[1, 3, 9, 8]), false),
            Err(Error::Structural { .. })
        ));
    }

    #[test]
    fn error_names_offending_block() {
        let mut m = toy();
        m.blocks[1].conv2.weight = Tensor::zeros(&[16, 15, 3, 3]);
        let err = m.infer(&Tensor::zeros(&[1, 3, 8, 8]), false).unwrap_err();
        assert!(err.to_string().contains("block g1.b0"), "{err}");
    }

    #[test]
    fn duplicated_sample_same_gradients() {
        let m = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let one = Tensor::randn(&[1, 3, 8, 8], 1.0, &mut rng);
        let mut two = one.data().to_vec();
        two.extend_from_slice(one.data());
        let two = Tensor::from_vec(&[2, 3, 8, 8], two).unwrap();
        let (l1, g1) = m.backward(&one, &[2], Mode::Eval).unwrap();
        let (l2, g2) = m.backward(&two, &[2, 2], Mode::Eval).unwrap();
        assert!((l1 - l2).abs() < 1e-6);
        for ((_, a), (_, b)) in g1.entries.iter().zip(&g2.entries) {
            assert!(a.max_abs_diff(b) < 1e-5);
        }
    }

    #[test]
    fn gradients_align_with_params() {
        let m = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[3, 3, 8, 8], 1.0, &mut rng);
        let (_, g) = m.backward(&x, &[0, 1, 3], Mode::Train).unwrap();
        let params = m.params();
        assert_eq!(params.len(), g.entries.len());
        for ((pn, _, pt), (gn, gt)) in params.iter().zip(&g.entries) {
            assert_eq!(pn, gn);
            assert_eq!(pt.shape(), gt.shape());
        }
    }

    #[test]
    fn train_step_updates_running_stats_and_counter() {
        let mut m = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[4, 3, 8, 8], 1.0, &mut rng);
        let before = m.stem.bn.running_mean.clone();
        let mut opt = OptimizerState::new(Default::default());
        m.train_step(&x, &[0, 1, 2, 3], &mut opt).unwrap();
        assert_eq!(m.step, 1);
        assert_ne!(m.stem.bn.running_mean, before);
    }

    #[test]
    fn label_out_of_range_is_data_error() {
        let m = toy();
        let err = m
            .backward(&Tensor::zeros(&[1, 3, 8, 8]), &[4], Mode::Train)
            .unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }
}
