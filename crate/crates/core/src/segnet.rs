//! Small U-shaped segmentation network.
//!
//! Encoder level `l` has `base_channels * 2^l` channels and two
//! conv3x3 -> BN -> ReLU layers; all but the deepest level end in 2x2 average
//! pooling. The decoder mirrors it with nearest upsampling and channel
//! concatenation of the matching encoder activation. A 1x1 convolution and a
//! per-class sigmoid form the head.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::{put_f64, put_tensor, put_u16, put_u32, Reader};
use crate::engine::{batchnorm_apply, BatchStatVars, BatchStats, BnLayerState, BnMode, Resample, Tape, Var};
use crate::error::{ensure, ParseError, Result, SfdaError};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 4] = b"PSFD";
pub const MODEL_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegModelConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub num_classes: usize,
}

impl Default for SegModelConfig {
    fn default() -> Self {
        SegModelConfig {
            in_channels: 1,
            base_channels: 8,
            depth: 3,
            num_classes: 2,
        }
    }
}

impl SegModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.depth >= 2, "depth must be at least 2, got {}", self.depth);
        ensure!(
            self.base_channels >= 2,
            "base_channels must be at least 2, got {}",
            self.base_channels
        );
        ensure!(self.in_channels >= 1, "in_channels must be positive");
        ensure!(self.num_classes >= 1, "num_classes must be positive");
        ensure!(self.depth <= 12, "depth {} is unreasonably deep", self.depth);
        Ok(())
    }

    /// Spatial sides must be divisible by this factor.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn bn_layer_count(&self) -> usize {
        2 * (2 * self.depth - 1)
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << (self.depth - 1)
    }

    fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBnLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub bn: BnLayerState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    config: SegModelConfig,
    /// Encoder layers then decoder layers, two per block.
    layers: Vec<ConvBnLayer>,
    head_kernel: Tensor,
    head_bias: Tensor,
}

/// Per-layer copies of the running batch-norm buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct BnSnapshot {
    layers: Vec<BatchStats>,
}

impl BnSnapshot {
    pub fn layers(&self) -> &[BatchStats] {
        &self.layers
    }
}

/// Tape handles produced by one forward pass.
pub struct ForwardPass {
    /// `[N, num_classes, H, W]` sigmoid probabilities.
    pub probs: Var,
    /// Deepest encoder activation.
    pub bottleneck: Var,
    /// One entry per batch-norm layer, in model order.
    pub stats: Vec<BatchStatVars>,
    /// Parameter leaves in [`SegModel::params_mut`] order.
    pub params: Vec<Var>,
}

fn he_kernel(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize) -> Tensor {
    let fan_in = (c_in * k * k) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
    Tensor::from_fn(&[c_out, c_in, k, k], |_| normal.sample(rng))
}

impl SegModel {
    pub fn build(config: SegModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(config.bn_layer_count());
        let mut push = |rng: &mut ChaCha8Rng, c_in: usize, c_out: usize| {
            layers.push(ConvBnLayer {
                kernel: he_kernel(rng, c_out, c_in, 3),
                bias: Tensor::zeros(&[c_out]),
                bn: BnLayerState::new(c_out),
            });
        };
        let mut c_in = config.in_channels;
        for level in 0..config.depth {
            let c = config.level_channels(level);
            push(&mut rng, c_in, c);
            push(&mut rng, c, c);
            c_in = c;
        }
        for level in (0..config.depth - 1).rev() {
            let c = config.level_channels(level);
            push(&mut rng, c_in + c, c);
            push(&mut rng, c, c);
            c_in = c;
        }
        let head_kernel = he_kernel(&mut rng, config.num_classes, config.base_channels, 1);
        Ok(SegModel {
            config,
            layers,
            head_kernel,
            head_bias: Tensor::zeros(&[config.num_classes]),
        })
    }

    pub fn config(&self) -> &SegModelConfig {
        &self.config
    }

    pub fn bn_layers(&self) -> impl Iterator<Item = &BnLayerState> {
        self.layers.iter().map(|l| &l.bn)
    }

    pub fn bn_layer_states(&self) -> Vec<BnLayerState> {
        self.bn_layers().cloned().collect()
    }

    pub fn layers(&self) -> &[ConvBnLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvBnLayer] {
        &mut self.layers
    }

    /// Trainable parameters: per layer kernel, bias, BN scale, BN shift; then the head.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(4 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(l.kernel.data_mut());
            out.push(l.bias.data_mut());
            out.push(l.bn.scale.as_mut_slice());
            out.push(l.bn.shift.as_mut_slice());
        }
        out.push(self.head_kernel.data_mut());
        out.push(self.head_bias.data_mut());
        out
    }

    pub fn param_lens(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(4 * self.layers.len() + 2);
        for l in &self.layers {
            out.extend([l.kernel.len(), l.bias.len(), l.bn.channels, l.bn.channels]);
        }
        out.extend([self.head_kernel.len(), self.head_bias.len()]);
        out
    }

    /// Round weights and buffers to `f32`, making the model equal to its serialized form.
    pub fn round_to_f32(&mut self) {
        for p in self.params_mut() {
            p.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        for l in &mut self.layers {
            for v in l.bn.running_mean.iter_mut().chain(l.bn.running_std.iter_mut()) {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn check_input_shape(&self, shape: &[usize]) -> Result<()> {
        ensure!(shape.len() == 4, "model input must be NCHW, got {shape:?}");
        ensure!(
            shape[1] == self.config.in_channels,
            "model expects {} input channels, got {}",
            self.config.in_channels,
            shape[1]
        );
        let m = self.config.size_multiple();
        ensure!(
            shape[2].is_multiple_of(m) && shape[3].is_multiple_of(m),
            "spatial size {}x{} is not divisible by {m}",
            shape[2],
            shape[3]
        );
        Ok(())
    }

    /// Forward pass; in `Train` mode the running buffers absorb the batch statistics.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        input: Var,
        mode: BnMode,
        param_grads: bool,
    ) -> Result<ForwardPass> {
        let pass = self.run(tape, input, mode, param_grads)?;
        if mode == BnMode::Train {
            for (layer, stats) in self.layers.iter_mut().zip(&pass.stats) {
                layer.bn.absorb(&stats.values(tape));
            }
        }
        Ok(pass)
    }

    /// Forward pass that never mutates the model. Rejects `Train` mode.
    pub fn forward_frozen(
        &self,
        tape: &mut Tape,
        input: Var,
        mode: BnMode,
        param_grads: bool,
    ) -> Result<ForwardPass> {
        ensure!(
            mode != BnMode::Train,
            "train mode updates running statistics; use forward"
        );
        self.run(tape, input, mode, param_grads)
    }

    fn run(&self, tape: &mut Tape, input: Var, mode: BnMode, param_grads: bool) -> Result<ForwardPass> {
        self.check_input_shape(tape.shape(input))?;
        let mut params = Vec::with_capacity(4 * self.layers.len() + 2);
        let mut stats = Vec::with_capacity(self.layers.len());
        let mut layer_idx = 0;
        let mut conv_bn_relu = |tape: &mut Tape, x: Var| -> Result<Var> {
            let layer = &self.layers[layer_idx];
            layer_idx += 1;
            let k = tape.leaf(layer.kernel.clone(), param_grads);
            let b = tape.leaf(layer.bias.clone(), param_grads);
            let s = tape.leaf(Tensor::new(vec![layer.bn.channels], layer.bn.scale.clone())?, param_grads);
            let t = tape.leaf(Tensor::new(vec![layer.bn.channels], layer.bn.shift.clone())?, param_grads);
            params.extend([k, b, s, t]);
            let y = tape.conv2d(x, k, b, 1, 1)?;
            let (y, st) = batchnorm_apply(tape, y, &layer.bn, s, t, mode)?;
            stats.push(st);
            Ok(tape.relu(y))
        };

        let mut x = input;
        let mut skips = Vec::with_capacity(self.config.depth - 1);
        for level in 0..self.config.depth {
            x = conv_bn_relu(tape, x)?;
            x = conv_bn_relu(tape, x)?;
            if level + 1 < self.config.depth {
                skips.push(x);
                x = tape.resample(x, Resample::Down2Avg)?;
            }
        }
        let bottleneck = x;
        while let Some(skip) = skips.pop() {
            x = tape.resample(x, Resample::Up2Nearest)?;
            x = tape.concat_channels(x, skip)?;
            x = conv_bn_relu(tape, x)?;
            x = conv_bn_relu(tape, x)?;
        }
        let hk = tape.leaf(self.head_kernel.clone(), param_grads);
        let hb = tape.leaf(self.head_bias.clone(), param_grads);
        params.extend([hk, hb]);
        let logits = tape.conv2d(x, hk, hb, 1, 0)?;
        let probs = tape.sigmoid(logits);
        Ok(ForwardPass {
            probs,
            bottleneck,
            stats,
            params,
        })
    }

    /// Eval-mode class probabilities for a batch `[N,C,H,W]`.
    pub fn predict_probs(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let pass = self.forward_frozen(&mut tape, x, BnMode::Eval, false)?;
        Ok(tape.value(pass.probs).clone())
    }

    pub fn snapshot(&self) -> BnSnapshot {
        BnSnapshot {
            layers: self.bn_layers().map(BnLayerState::stored_stats).collect(),
        }
    }

    /// Overwrite running buffers from `snap`; weights are untouched.
    pub fn restore(&mut self, snap: &BnSnapshot) -> Result<()> {
        ensure!(
            snap.layers.len() == self.layers.len(),
            "snapshot has {} layers, model has {}",
            snap.layers.len(),
            self.layers.len()
        );
        for (l, s) in self.layers.iter().zip(&snap.layers) {
            ensure!(
                s.mean.len() == l.bn.channels && s.std.len() == l.bn.channels,
                "snapshot channel count does not match layer with {} channels",
                l.bn.channels
            );
        }
        for (l, s) in self.layers.iter_mut().zip(&snap.layers) {
            l.bn.running_mean.clone_from(&s.mean);
            l.bn.running_std.clone_from(&s.std);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        put_u16(&mut out, MODEL_VERSION);
        let c = &self.config;
        for v in [c.in_channels, c.base_channels, c.depth, c.num_classes] {
            put_u32(&mut out, v as u32);
        }
        let (momentum, eps) = self
            .layers
            .first()
            .map(|l| (l.bn.momentum, l.bn.eps))
            .unwrap_or_default();
        put_f64(&mut out, momentum);
        put_f64(&mut out, eps);
        for l in &self.layers {
            let ch = [l.bn.channels];
            put_tensor(&mut out, l.kernel.shape(), l.kernel.data());
            put_tensor(&mut out, l.bias.shape(), l.bias.data());
            put_tensor(&mut out, &ch, &l.bn.scale);
            put_tensor(&mut out, &ch, &l.bn.shift);
            put_tensor(&mut out, &ch, &l.bn.running_mean);
            put_tensor(&mut out, &ch, &l.bn.running_std);
        }
        put_tensor(&mut out, self.head_kernel.shape(), self.head_kernel.data());
        put_tensor(&mut out, self.head_bias.shape(), self.head_bias.data());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, ParseError> {
        let mut r = Reader::new(bytes);
        r.magic(MODEL_MAGIC)?;
        let version = r.u16()?;
        if version != MODEL_VERSION {
            return Err(ParseError::UnsupportedVersion(version));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let config = SegModelConfig {
            in_channels: dims[0],
            base_channels: dims[1],
            depth: dims[2],
            num_classes: dims[3],
        };
        let momentum = r.f64()?;
        let eps = r.f64()?;
        let mut model =
            SegModel::build(config, 0).map_err(|e| ParseError::Structure(e.to_string()))?;
        let expect = |t: &Tensor, shape: &[usize], what: &str| {
            if t.shape() == shape {
                Ok(())
            } else {
                Err(ParseError::Structure(format!(
                    "{what}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )))
            }
        };
        for (i, l) in model.layers.iter_mut().enumerate() {
            let kernel = r.tensor()?;
            expect(&kernel, l.kernel.shape(), &format!("layer {i} kernel"))?;
            let bias = r.tensor()?;
            expect(&bias, l.bias.shape(), &format!("layer {i} bias"))?;
            let ch = [l.bn.channels];
            let mut vecs = Vec::with_capacity(4);
            for what in ["scale", "shift", "running_mean", "running_std"] {
                let t = r.tensor()?;
                expect(&t, &ch, &format!("layer {i} {what}"))?;
                vecs.push(t.into_data());
            }
            l.kernel = kernel;
            l.bias = bias;
            let mut it = vecs.into_iter();
            l.bn.scale = it.next().expect("scale");
            l.bn.shift = it.next().expect("shift");
            l.bn.running_mean = it.next().expect("mean");
            l.bn.running_std = it.next().expect("std");
            if l.bn.running_std.iter().any(|&s| !(s > 0.0)) {
                return Err(ParseError::Structure(format!(
                    "layer {i} running_std must be positive"
                )));
            }
            l.bn.momentum = momentum;
            l.bn.eps = eps;
        }
        let hk = r.tensor()?;
        expect(&hk, model.head_kernel.shape(), "head kernel")?;
        let hb = r.tensor()?;
        expect(&hb, model.head_bias.shape(), "head bias")?;
        model.head_kernel = hk;
        model.head_bias = hb;
        r.finish()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| SfdaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| SfdaError::io(path, e))?;
        SegModel::from_bytes(&bytes).map_err(|source| SfdaError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> SegModelConfig {
        SegModelConfig {
            in_channels: 1,
            base_channels: 4,
            depth: 3,
            num_classes: 2,
        }
    }

    fn batch(seed: u64, n: usize, side: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, 1, side, side], |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn default_layout() {
        let m = SegModel::build(SegModelConfig::default(), 0).unwrap();
        assert_eq!(m.bn_layers().count(), 10);
        assert!(m.bn_layers().all(|l| l.scale.iter().all(|&v| v == 1.0)));
        assert!(m.bn_layers().all(|l| l.shift.iter().all(|&v| v == 0.0)));
        let snap = m.snapshot();
        for s in snap.layers() {
            assert!(s.mean.iter().all(|&v| v == 0.0));
            assert!(s.std.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let shallow = SegModelConfig { depth: 1, ..SegModelConfig::default() };
        assert!(SegModel::build(shallow, 0).is_err());
        let thin = SegModelConfig { base_channels: 1, ..SegModelConfig::default() };
        assert!(SegModel::build(thin, 0).is_err());
    }

    #[test]
    fn build_is_seeded() {
        let a = SegModel::build(small(), 7).unwrap();
        let b = SegModel::build(small(), 7).unwrap();
        let c = SegModel::build(small(), 8).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn forward_shapes_and_bottleneck() {
        let mut m = SegModel::build(small(), 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(batch(0, 2, 16));
        let pass = m.forward(&mut tape, x, BnMode::Train, false).unwrap();
        assert_eq!(tape.shape(pass.probs), &[2, 2, 16, 16]);
        assert_eq!(tape.shape(pass.bottleneck), &[2, 16, 4, 4]);
        assert_eq!(pass.stats.len(), 10);
        assert_eq!(pass.params.len(), m.param_lens().len());
        assert!(tape
            .value(pass.probs)
            .data()
            .iter()
            .all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn indivisible_size_rejected() {
        let m = SegModel::build(small(), 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(batch(0, 1, 10));
        assert!(m.forward_frozen(&mut tape, x, BnMode::Eval, false).is_err());
    }

    #[test]
    fn eval_is_pure() {
        let m = SegModel::build(small(), 2).unwrap();
        let before = m.to_bytes();
        let input = batch(3, 2, 16);
        let a = m.predict_probs(&input).unwrap();
        let b = m.predict_probs(&input).unwrap();
        assert_eq!(a, b);
        assert_eq!(m.to_bytes(), before);
    }

    #[test]
    fn stat_collect_matches_train_without_persisting() {
        let mut m = SegModel::build(small(), 4).unwrap();
        let input = batch(5, 3, 16);
        let before = m.clone();
        let mut t1 = Tape::new();
        let x1 = t1.constant(input.clone());
        let p1 = m.forward(&mut t1, x1, BnMode::StatCollect, false).unwrap();
        assert_eq!(m, before);
        let mut t2 = Tape::new();
        let x2 = t2.constant(input);
        let p2 = m.forward(&mut t2, x2, BnMode::Train, false).unwrap();
        assert_ne!(m, before);
        assert_eq!(t1.value(p1.probs), t2.value(p2.probs));
        for (a, b) in p1.stats.iter().zip(&p2.stats) {
            assert_eq!(a.values(&t1), b.values(&t2));
        }
    }

    #[test]
    fn first_layer_stats_match_oracle() {
        let m = SegModel::build(small(), 6).unwrap();
        let input = batch(7, 2, 8);
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let pass = m.forward_frozen(&mut tape, x, BnMode::StatCollect, false).unwrap();
        let got = pass.stats[0].values(&tape);
        // Pre-BN activations of layer 0, computed by hand: 3x3 conv, pad 1.
        let layer = &m.layers()[0];
        let (n, side, c_out) = (2, 8, layer.bn.channels);
        for co in 0..c_out {
            let mut vals = Vec::new();
            for s in 0..n {
                for i in 0..side as isize {
                    for j in 0..side as isize {
                        let mut acc = layer.bias.data()[co];
                        for a in -1..=1isize {
                            for b in -1..=1isize {
                                let (ii, jj) = (i + a, j + b);
                                if ii < 0 || jj < 0 || ii >= side as isize || jj >= side as isize {
                                    continue;
                                }
                                acc += input.data()[s * side * side + ii as usize * side + jj as usize]
                                    * layer.kernel.data()[co * 9 + ((a + 1) * 3 + b + 1) as usize];
                            }
                        }
                        vals.push(acc);
                    }
                }
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!((got.mean[co] - mean).abs() < 1e-10);
            assert!((got.std[co] - (var + layer.bn.eps).sqrt()).abs() < 1e-10);
        }
    }

    #[test]
    fn snapshot_restore_round_trip() {
        let mut m = SegModel::build(small(), 9).unwrap();
        let snap = m.snapshot();
        let kernels: Vec<Tensor> = m.layers().iter().map(|l| l.kernel.clone()).collect();
        let mut tape = Tape::new();
        let x = tape.constant(batch(1, 2, 16));
        m.forward(&mut tape, x, BnMode::Train, false).unwrap();
        assert_ne!(m.snapshot(), snap);
        m.restore(&snap).unwrap();
        assert_eq!(m.snapshot(), snap);
        for (l, k) in m.layers().iter().zip(&kernels) {
            assert_eq!(&l.kernel, k);
        }
        let other = SegModel::build(SegModelConfig::default(), 0).unwrap();
        assert!(m.restore(&other.snapshot()).is_err());
    }

    #[test]
    fn serialization_round_trip() {
        let mut m = SegModel::build(small(), 10).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(batch(2, 2, 16));
        m.forward(&mut tape, x, BnMode::Train, false).unwrap();
        m.round_to_f32();
        let bytes = m.to_bytes();
        let back = SegModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupted_model_bytes_rejected() {
        let m = SegModel::build(small(), 11).unwrap();
        let bytes = m.to_bytes();
        assert!(matches!(
            SegModel::from_bytes(&bytes[..bytes.len() - 3]),
            Err(ParseError::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(SegModel::from_bytes(&bad), Err(ParseError::BadMagic { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(SegModel::from_bytes(&extra), Err(ParseError::TrailingBytes(1))));
        let mut ver = bytes;
        ver[4] = 9;
        assert!(matches!(SegModel::from_bytes(&ver), Err(ParseError::UnsupportedVersion(9))));
    }
}
