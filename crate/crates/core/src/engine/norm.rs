//! Batch normalization with differentiable batch statistics.
//!
//! In `Train` and `StatCollect` mode the per-channel batch mean and standard
//! deviation are recorded as their own tape nodes, so a loss on the
//! statistics themselves back-propagates into the layer input.

use super::{Op, Tape, Var};
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BnMode {
    /// Batch statistics; running buffers absorb them.
    Train,
    /// Running statistics; no state changes.
    Eval,
    /// Train-mode arithmetic without touching running buffers.
    StatCollect,
}

/// Stored statistics and affine parameters of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnLayerState {
    pub channels: usize,
    pub running_mean: Vec<f64>,
    /// Standard deviation, `sqrt(var + eps)`.
    pub running_std: Vec<f64>,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnLayerState {
    pub fn new(channels: usize) -> Self {
        BnLayerState {
            channels,
            running_mean: vec![0.0; channels],
            running_std: vec![1.0; channels],
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
            momentum: DEFAULT_BN_MOMENTUM,
            eps: DEFAULT_BN_EPS,
        }
    }

    /// `running <- (1 - momentum) * running + momentum * batch`.
    pub fn absorb(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_std.iter_mut().zip(&stats.std) {
            *r = (1.0 - m) * *r + m * b;
        }
    }

    pub fn stored_stats(&self) -> BatchStats {
        BatchStats {
            mean: self.running_mean.clone(),
            std: self.running_std.clone(),
        }
    }
}

/// Per-channel statistics measured on one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Tape handles for a layer's batch statistics, each of shape `[C]`.
#[derive(Clone, Copy, Debug)]
pub struct BatchStatVars {
    pub mean: Var,
    pub std: Var,
}

impl BatchStatVars {
    pub fn values(&self, tape: &Tape) -> BatchStats {
        BatchStats {
            mean: tape.value(self.mean).data().to_vec(),
            std: tape.value(self.std).data().to_vec(),
        }
    }
}

/// Normalize `input` `[N,C,H,W]` through `layer`.
///
/// `scale` and `shift` are the tape copies of the layer's affine parameters.
/// Running buffers are never modified here; callers in `Train` mode pass
/// the returned statistics to [`BnLayerState::absorb`].
pub fn batchnorm_apply(
    tape: &mut Tape,
    input: Var,
    layer: &BnLayerState,
    scale: Var,
    shift: Var,
    mode: BnMode,
) -> Result<(Var, BatchStatVars)> {
    let shape = tape.shape(input).to_vec();
    ensure!(shape.len() == 4, "batchnorm expects NCHW, got {shape:?}");
    ensure!(
        shape[1] == layer.channels,
        "batchnorm channel mismatch: input has {}, layer has {}",
        shape[1],
        layer.channels
    );
    ensure!(
        tape.shape(scale) == [layer.channels] && tape.shape(shift) == [layer.channels],
        "batchnorm affine parameters must have shape [{}]",
        layer.channels
    );
    match mode {
        BnMode::Train | BnMode::StatCollect => {
            ensure!(
                shape[0] * shape[2] * shape[3] >= 2,
                "batch statistics need at least two values per channel"
            );
            Ok(tape.batchnorm_batch(input, scale, shift, layer.eps))
        }
        BnMode::Eval => {
            let out = tape.batchnorm_running(
                input,
                scale,
                shift,
                layer.running_mean.clone(),
                layer.running_std.clone(),
            );
            let mean = tape.constant(Tensor::new(vec![layer.channels], layer.running_mean.clone())?);
            let std = tape.constant(Tensor::new(vec![layer.channels], layer.running_std.clone())?);
            Ok((out, BatchStatVars { mean, std }))
        }
    }
}

impl Tape {
    fn batchnorm_batch(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        eps: f64,
    ) -> (Var, BatchStatVars) {
        let shape = self.shape(input).to_vec();
        let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        let count = (n * plane) as f64;
        let x = self.value(input).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for s in 0..n {
            for (ch, m) in mean.iter_mut().enumerate() {
                let off = (s * c + ch) * plane;
                *m += x[off..off + plane].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                let m = mean[ch];
                var[ch] += x[off..off + plane].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / count + eps).sqrt()).collect();
        let gamma = self.value(scale).data();
        let beta = self.value(shift).data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                let (m, inv) = (mean[ch], 1.0 / std[ch]);
                for i in off..off + plane {
                    let xh = (x[i] - m) * inv;
                    xhat[i] = xh;
                    out[i] = gamma[ch] * xh + beta[ch];
                }
            }
        }
        let rg_in = self.requires_grad(input);
        let rg = rg_in || self.requires_grad(scale) || self.requires_grad(shift);
        let out = self.push(
            Tensor::new(shape, out).expect("shape preserved"),
            Op::BatchNorm {
                input,
                scale,
                shift,
                xhat,
                std: std.clone(),
            },
            rg,
        );
        let mean_var = self.push(
            Tensor::new(vec![c], mean).expect("channel vector"),
            Op::BatchMean(input),
            rg_in,
        );
        let std_var = self.push(
            Tensor::new(vec![c], std).expect("channel vector"),
            Op::BatchStd {
                input,
                norm_node: out.0,
            },
            rg_in,
        );
        (
            out,
            BatchStatVars {
                mean: mean_var,
                std: std_var,
            },
        )
    }

    fn batchnorm_running(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        mean: Vec<f64>,
        std: Vec<f64>,
    ) -> Var {
        let shape = self.shape(input).to_vec();
        let (c, plane) = (shape[1], shape[2] * shape[3]);
        let x = self.value(input).data();
        let gamma = self.value(scale).data();
        let beta = self.value(shift).data();
        let value = Tensor::from_fn(&shape, |i| {
            let ch = (i / plane) % c;
            gamma[ch] * (x[i] - mean[ch]) / std[ch] + beta[ch]
        });
        let rg = self.any_grad(&[input, scale, shift]);
        self.push(
            value,
            Op::BnEval {
                input,
                scale,
                shift,
                mean,
                std,
            },
            rg,
        )
    }
}

/// Accumulates the input gradient into `dx` and returns the scale and shift gradients.
pub(super) fn batchnorm_backward(
    shape: &[usize],
    g: &[f64],
    xhat: &[f64],
    std: &[f64],
    gamma: &[f64],
    dx: Option<&mut [f64]>,
) -> (Vec<f64>, Vec<f64>) {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let count = (n * plane) as f64;
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * plane;
            for i in off..off + plane {
                sum_g[ch] += g[i];
                sum_gx[ch] += g[i] * xhat[i];
            }
        }
    }
    if let Some(dx) = dx {
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                let k = gamma[ch] / std[ch];
                let (mg, mgx) = (sum_g[ch] / count, sum_gx[ch] / count);
                for i in off..off + plane {
                    dx[i] += k * (g[i] - mg - xhat[i] * mgx);
                }
            }
        }
    }
    (sum_gx, sum_g)
}

pub(super) fn batch_mean_backward(shape: &[usize], g: &[f64], d: &mut [f64]) {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let count = (n * plane) as f64;
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * plane;
            let v = g[ch] / count;
            d[off..off + plane].iter_mut().for_each(|d| *d += v);
        }
    }
}

/// d std / d x = (x - mean) / (count * std) = xhat / count.
pub(super) fn batch_std_backward(shape: &[usize], g: &[f64], xhat: &[f64], d: &mut [f64]) {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let count = (n * plane) as f64;
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * plane;
            let v = g[ch] / count;
            for i in off..off + plane {
                d[i] += v * xhat[i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn oracle_stats(x: &[f64], n: usize, c: usize, plane: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
        let mut means = Vec::new();
        let mut stds = Vec::new();
        for ch in 0..c {
            let vals: Vec<f64> = (0..n)
                .flat_map(|s| x[(s * c + ch) * plane..(s * c + ch + 1) * plane].iter().copied())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
            means.push(m);
            stds.push((v + eps).sqrt());
        }
        (means, stds)
    }

    fn affine(tape: &mut Tape, layer: &BnLayerState) -> (Var, Var) {
        let s = tape.constant(Tensor::new(vec![layer.channels], layer.scale.clone()).unwrap());
        let b = tape.constant(Tensor::new(vec![layer.channels], layer.shift.clone()).unwrap());
        (s, b)
    }

    #[test]
    fn already_normalized_batch_passes_through() {
        // Two channels, values +-1: mean 0, biased std 1.
        let data = vec![1.0, -1.0, 1.0, -1.0, -1.0, 1.0, -1.0, 1.0];
        let x = Tensor::new(vec![1, 2, 2, 2], data.clone()).unwrap();
        let layer = BnLayerState::new(2);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let (s, b) = affine(&mut tape, &layer);
        let (y, stats) = batchnorm_apply(&mut tape, xv, &layer, s, b, BnMode::Train).unwrap();
        let stats = stats.values(&tape);
        assert_eq!(stats.mean, vec![0.0, 0.0]);
        let expected_std = (1.0f64 + DEFAULT_BN_EPS).sqrt();
        for s in &stats.std {
            assert!((s - expected_std).abs() < 1e-15);
        }
        for (o, i) in tape.value(y).data().iter().zip(&data) {
            assert!((o - i).abs() < 1e-5);
        }
    }

    #[test]
    fn eval_uses_running_stats() {
        let x = Tensor::full(&[2, 1, 3, 3], 5.0);
        let mut layer = BnLayerState::new(1);
        layer.running_mean = vec![5.0];
        layer.running_std = vec![1.0];
        layer.scale = vec![2.0];
        layer.shift = vec![3.0];
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let (s, b) = affine(&mut tape, &layer);
        let (y, stats) = batchnorm_apply(&mut tape, xv, &layer, s, b, BnMode::Eval).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 3.0));
        assert_eq!(stats.values(&tape), layer.stored_stats());
    }

    #[test]
    fn train_stats_match_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..4 * 2 * 9).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (m, s) = oracle_stats(&x, 4, 2, 9, DEFAULT_BN_EPS);
        let layer = BnLayerState::new(2);
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![4, 2, 3, 3], x).unwrap());
        let (sc, sh) = affine(&mut tape, &layer);
        let (_, stats) = batchnorm_apply(&mut tape, xv, &layer, sc, sh, BnMode::Train).unwrap();
        let stats = stats.values(&tape);
        for c in 0..2 {
            assert!((stats.mean[c] - m[c]).abs() < 1e-12);
            assert!((stats.std[c] - s[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let layer = BnLayerState::new(3);
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::zeros(&[2, 2, 2, 2]));
        let (s, b) = affine(&mut tape, &layer);
        assert!(batchnorm_apply(&mut tape, xv, &layer, s, b, BnMode::Train).is_err());
    }

    #[test]
    fn single_value_batch_is_rejected_in_train_mode() {
        let layer = BnLayerState::new(1);
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::zeros(&[1, 1, 1, 1]));
        let (s, b) = affine(&mut tape, &layer);
        assert!(batchnorm_apply(&mut tape, xv, &layer, s, b, BnMode::StatCollect).is_err());
        assert!(batchnorm_apply(&mut tape, xv, &layer, s, b, BnMode::Eval).is_ok());
    }

    #[test]
    fn absorb_blends_with_momentum() {
        let mut layer = BnLayerState::new(1);
        layer.absorb(&BatchStats {
            mean: vec![2.0],
            std: vec![3.0],
        });
        assert!((layer.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((layer.running_std[0] - 1.2).abs() < 1e-15);
    }
}
