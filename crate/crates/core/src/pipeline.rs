//! Source training and the two adaptation stages.
//!
//! The prompt learning stage optimizes an image-shaped prompt so that the
//! frozen source model, fed prompted target images, reproduces the
//! batch-norm statistics it stored during source training. The feature
//! alignment stage then fine-tunes a copy of the model on prompted target
//! images against fixed pseudo labels, while pulling the bottleneck features
//! of each image towards those of a Fourier style-augmented counterpart.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{chw_to_hwc, derive_seed, hwc_to_chw, Sample};
use crate::engine::{
    BatchStatVars, BatchStats, BnLayerState, BnMode, OptimizerState, SpectralCombine, Tape, Var,
};
use crate::error::{ensure, Result, SfdaError};
use crate::segnet::{SegModel, SegModelConfig};
use crate::spectral::{batch_style_permute, AugConfig, DEFAULT_BETA_MAX};
use crate::tensor::Tensor;
use crate::tensor_io::{read_tensor, write_tensor};

pub const DEFAULT_MOMENTUM: f64 = 0.99;
pub const DEFAULT_BATCH_SIZE: usize = 16;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// How the prompt is combined with an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CombineOp {
    Add,
    Mul,
}

impl CombineOp {
    pub fn as_str(self) -> &'static str {
        match self {
            CombineOp::Add => "add",
            CombineOp::Mul => "mul",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "add" => Some(CombineOp::Add),
            "mul" => Some(CombineOp::Mul),
            _ => None,
        }
    }
}

/// Whether the prompt acts on pixels or on the amplitude spectrum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptSpace {
    Spatial,
    Frequency,
}

impl PromptSpace {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptSpace::Spatial => "spatial",
            PromptSpace::Frequency => "frequency",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "spatial" => Some(PromptSpace::Spatial),
            "frequency" => Some(PromptSpace::Frequency),
            _ => None,
        }
    }
}

/// Learnable image-shaped offset `[C,H,W]` and the way it alters images.
/// Frequency-space prompts are indexed on the DC-centered spectrum grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    offsets: Tensor,
    combine: CombineOp,
    space: PromptSpace,
}

impl Prompt {
    /// The prompt that leaves images unchanged: zeros for `Add`, ones for `Mul`.
    pub fn identity(shape: &[usize], combine: CombineOp, space: PromptSpace) -> Result<Self> {
        ensure!(
            shape.len() == 3 && shape.iter().all(|&d| d > 0),
            "prompt shape must be [C,H,W], got {shape:?}"
        );
        let fill = match combine {
            CombineOp::Add => 0.0,
            CombineOp::Mul => 1.0,
        };
        Ok(Prompt {
            offsets: Tensor::full(shape, fill),
            combine,
            space,
        })
    }

    pub fn from_tensor(offsets: Tensor, combine: CombineOp, space: PromptSpace) -> Result<Self> {
        ensure!(offsets.rank() == 3, "prompt must be [C,H,W], got {:?}", offsets.shape());
        ensure!(offsets.is_finite(), "prompt values must be finite");
        Ok(Prompt {
            offsets,
            combine,
            space,
        })
    }

    pub fn offsets(&self) -> &Tensor {
        &self.offsets
    }

    pub fn combine(&self) -> CombineOp {
        self.combine
    }

    pub fn space(&self) -> PromptSpace {
        self.space
    }

    /// Write the offsets as an `[H,W,C]` tensor file.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_tensor(path, &chw_to_hwc(&self.offsets)?)
    }

    pub fn load(path: &Path, combine: CombineOp, space: PromptSpace) -> Result<Self> {
        Self::from_tensor(hwc_to_chw(&read_tensor(path)?)?, combine, space)
    }

    /// Record the prompted batch on `tape`; `prompt` holds the offsets.
    pub fn apply_on_tape(&self, tape: &mut Tape, batch: Var, prompt: Var) -> Result<Var> {
        apply_on_tape(tape, batch, prompt, self.combine, self.space)
    }

    /// Prompted copy of an image `[C,H,W]` or a batch `[N,C,H,W]`.
    pub fn apply(&self, images: &Tensor) -> Result<Tensor> {
        apply_prompt(images, self)
    }
}

fn apply_on_tape(
    tape: &mut Tape,
    batch: Var,
    prompt: Var,
    combine: CombineOp,
    space: PromptSpace,
) -> Result<Var> {
    match (space, combine) {
        (PromptSpace::Spatial, CombineOp::Add) => tape.broadcast_add(batch, prompt),
        (PromptSpace::Spatial, CombineOp::Mul) => tape.broadcast_mul(batch, prompt),
        (PromptSpace::Frequency, CombineOp::Add) => {
            tape.spectral_offset(batch, prompt, SpectralCombine::Add)
        }
        (PromptSpace::Frequency, CombineOp::Mul) => {
            tape.spectral_offset(batch, prompt, SpectralCombine::Mul)
        }
    }
}

/// Alter an image `[C,H,W]` or batch `[N,C,H,W]` with `prompt`.
pub fn apply_prompt(images: &Tensor, prompt: &Prompt) -> Result<Tensor> {
    ensure!(prompt.offsets.is_finite(), "prompt values must be finite");
    let single = images.rank() == 3;
    let batch = if single {
        images.clone().reshape([&[1], images.shape()].concat())?
    } else {
        images.clone()
    };
    let mut tape = Tape::new();
    let x = tape.constant(batch);
    let p = tape.constant(prompt.offsets.clone());
    let y = prompt.apply_on_tape(&mut tape, x, p)?;
    let out = tape.value(y).clone();
    if single {
        out.reshape(images.shape().to_vec())
    } else {
        Ok(out)
    }
}

/// Which batch-norm layers enter the statistic alignment loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnLayers {
    All,
    /// The first `k` layers counted from the input side.
    First(usize),
}

impl BnLayers {
    pub fn resolve(self, total: usize) -> Result<usize> {
        match self {
            BnLayers::All => Ok(total),
            BnLayers::First(k) => {
                ensure!(
                    k >= 1 && k <= total,
                    "bn layer count {k} outside 1..={total}"
                );
                Ok(k)
            }
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s == "all" {
            return Some(BnLayers::All);
        }
        s.parse().ok().filter(|&k| k >= 1).map(BnLayers::First)
    }

    pub fn to_text(self) -> String {
        match self {
            BnLayers::All => "all".to_string(),
            BnLayers::First(k) => k.to_string(),
        }
    }
}

/// `sum_i [mean_c |mu_i - mu~_i| + alpha * mean_c |sigma_i - sigma~_i|]` over
/// the selected layers, with `stored` holding `mu, sigma` and `batch` the
/// differentiable batch statistics.
pub fn statistic_alignment_loss(
    tape: &mut Tape,
    stored: &[BnLayerState],
    batch: &[BatchStatVars],
    alpha: f64,
    layers: BnLayers,
) -> Result<Var> {
    ensure!(
        stored.len() == batch.len(),
        "statistic alignment: {} stored layers vs {} batch layers",
        stored.len(),
        batch.len()
    );
    ensure!(alpha >= 0.0, "alpha must be non-negative, got {alpha}");
    let count = layers.resolve(stored.len())?;
    let mut total = None;
    for (layer, stats) in stored.iter().zip(batch).take(count) {
        let c = layer.channels;
        ensure!(
            tape.shape(stats.mean) == [c] && tape.shape(stats.std) == [c],
            "statistic alignment: layer with {c} channels got stats of shape {:?}",
            tape.shape(stats.mean)
        );
        let mu = tape.constant(Tensor::new(vec![c], layer.running_mean.clone())?);
        let sigma = tape.constant(Tensor::new(vec![c], layer.running_std.clone())?);
        let d_mean = tape.l1_distance(mu, stats.mean)?;
        let d_std = tape.l1_distance(sigma, stats.std)?;
        let d_std = tape.scale(d_std, alpha);
        let term = tape.add(d_mean, d_std)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// Value of [`statistic_alignment_loss`] for plain statistics.
pub fn statistic_alignment_value(
    stored: &[BnLayerState],
    batch: &[BatchStats],
    alpha: f64,
    layers: BnLayers,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut vars = Vec::with_capacity(batch.len());
    for b in batch {
        ensure!(
            b.mean.len() == b.std.len() && !b.mean.is_empty(),
            "batch statistics must have equal, non-zero lengths"
        );
        vars.push(BatchStatVars {
            mean: tape.constant(Tensor::new(vec![b.mean.len()], b.mean.clone())?),
            std: tape.constant(Tensor::new(vec![b.std.len()], b.std.clone())?),
        });
    }
    let loss = statistic_alignment_loss(&mut tape, stored, &vars, alpha, layers)?;
    Ok(tape.value(loss).item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlsConfig {
    /// Weight of the standard-deviation term.
    pub alpha: f64,
    pub bn_layers: BnLayers,
    pub epochs: usize,
    pub lr0: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub combine: CombineOp,
    pub space: PromptSpace,
    pub seed: u64,
}

impl Default for PlsConfig {
    fn default() -> Self {
        PlsConfig {
            alpha: 0.01,
            bn_layers: BnLayers::All,
            epochs: 100,
            lr0: 0.01,
            batch_size: DEFAULT_BATCH_SIZE,
            momentum: DEFAULT_MOMENTUM,
            combine: CombineOp::Add,
            space: PromptSpace::Spatial,
            seed: 0,
        }
    }
}

impl PlsConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.alpha >= 0.0 && self.alpha.is_finite(), "alpha must be a non-negative number, got {}", self.alpha);
        ensure!(self.epochs >= 1, "pls epochs must be at least 1");
        ensure!(self.lr0 > 0.0 && self.lr0.is_finite(), "pls lr0 must be positive, got {}", self.lr0);
        ensure!(self.batch_size >= 1, "pls batch size must be at least 1");
        ensure!((0.0..1.0).contains(&self.momentum), "momentum must lie in [0, 1), got {}", self.momentum);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FasConfig {
    /// Weight of the feature alignment loss.
    pub gamma: f64,
    pub epochs: usize,
    pub lr0: f64,
    /// Pseudo labels are `prob > threshold`.
    pub threshold: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub beta_max: f64,
    /// When false the augmented branch sees the unaugmented batch.
    pub augment: bool,
    pub seed: u64,
}

impl Default for FasConfig {
    fn default() -> Self {
        FasConfig {
            gamma: 0.1,
            epochs: 100,
            lr0: 0.001,
            threshold: DEFAULT_THRESHOLD,
            batch_size: DEFAULT_BATCH_SIZE,
            momentum: DEFAULT_MOMENTUM,
            beta_max: DEFAULT_BETA_MAX,
            augment: true,
            seed: 0,
        }
    }
}

impl FasConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.gamma >= 0.0 && self.gamma.is_finite(), "gamma must be a non-negative number, got {}", self.gamma);
        ensure!(self.epochs >= 1, "fas epochs must be at least 1");
        ensure!(self.lr0 > 0.0 && self.lr0.is_finite(), "fas lr0 must be positive, got {}", self.lr0);
        ensure!(
            self.threshold > 0.0 && self.threshold < 1.0,
            "threshold must lie in (0, 1), got {}",
            self.threshold
        );
        ensure!(self.batch_size >= 1, "fas batch size must be at least 1");
        ensure!((0.0..1.0).contains(&self.momentum), "momentum must lie in [0, 1), got {}", self.momentum);
        ensure!(
            self.beta_max > 0.0 && self.beta_max <= 0.5,
            "beta_max must lie in (0, 0.5], got {}",
            self.beta_max
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceConfig {
    pub model: SegModelConfig,
    pub epochs: usize,
    pub lr0: f64,
    pub batch_size: usize,
    pub momentum: f64,
    /// Standard deviation of the additive noise augmentation.
    pub noise_sigma: f64,
    /// Largest crop-jitter translation in pixels.
    pub max_shift: usize,
    pub seed: u64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            model: SegModelConfig::default(),
            epochs: 30,
            lr0: 0.01,
            batch_size: DEFAULT_BATCH_SIZE,
            momentum: DEFAULT_MOMENTUM,
            noise_sigma: 0.05,
            max_shift: 4,
            seed: 0,
        }
    }
}

impl SourceConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        ensure!(self.epochs >= 1, "source epochs must be at least 1");
        ensure!(self.lr0 > 0.0 && self.lr0.is_finite(), "source lr0 must be positive, got {}", self.lr0);
        ensure!(self.batch_size >= 1, "source batch size must be at least 1");
        ensure!((0.0..1.0).contains(&self.momentum), "momentum must lie in [0, 1), got {}", self.momentum);
        ensure!(self.noise_sigma >= 0.0, "noise sigma must be non-negative");
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Source,
    Pls,
    Fas,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Source => "source",
            Stage::Pls => "pls",
            Stage::Fas => "fas",
        }
    }
}

/// Per-epoch means. Epoch 0 is a measurement before any update.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub stage: Stage,
    pub epoch: usize,
    pub loss_sa: Option<f64>,
    pub loss_seg: Option<f64>,
    pub loss_al: Option<f64>,
    pub lr: f64,
}

pub const TRACE_HEADER: &str = "stage,epoch,loss_sa,loss_seg,loss_al,lr";

/// CSV text with [`TRACE_HEADER`]; losses that do not apply are left empty.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.stage.as_str(),
            r.epoch,
            opt(r.loss_sa),
            opt(r.loss_seg),
            opt(r.loss_al),
            r.lr
        );
    }
    s
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    fs::write(path, trace_csv(rows)).map_err(|e| SfdaError::io(path, e))
}

/// Shuffled index batches covering `0..n` once.
fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn stack_indexed(items: &[Tensor], idx: &[usize]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = idx.iter().map(|&i| &items[i]).collect();
    Tensor::stack(&refs)
}

fn check_images(model: &SegModel, images: &[Tensor]) -> Result<()> {
    ensure!(!images.is_empty(), "dataset is empty");
    let shape = images[0].shape();
    ensure!(shape.len() == 3, "images must be [C,H,W], got {shape:?}");
    ensure!(
        images.iter().all(|t| t.shape() == shape),
        "images in a dataset must share one shape"
    );
    model.check_input_shape(&[1, shape[0], shape[1], shape[2]])
}

#[derive(Clone, Debug)]
pub struct PlsOutcome {
    pub prompt: Prompt,
    /// Rows for epochs `0..=epochs`; row 0 is the identity-prompt measurement.
    pub trace: Vec<TraceRow>,
}

impl PlsOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.trace[0].loss_sa.expect("pls rows carry loss_sa")
    }

    pub fn final_loss(&self) -> f64 {
        self.trace.last().and_then(|r| r.loss_sa).expect("pls rows carry loss_sa")
    }
}

/// Mean alignment loss of `prompt` over `images` in fixed order.
fn mean_alignment_loss(model: &SegModel, prompt: &Prompt, images: &[Tensor], config: &PlsConfig) -> Result<f64> {
    let stored = model.bn_layer_states();
    let mut sum = 0.0;
    let chunks: Vec<Vec<usize>> = (0..images.len())
        .collect::<Vec<_>>()
        .chunks(config.batch_size)
        .map(<[usize]>::to_vec)
        .collect();
    for idx in &chunks {
        let mut tape = Tape::new();
        let x = tape.constant(stack_indexed(images, idx)?);
        let p = tape.constant(prompt.offsets.clone());
        let altered = prompt.apply_on_tape(&mut tape, x, p)?;
        let pass = model.forward_frozen(&mut tape, altered, BnMode::StatCollect, false)?;
        let loss = statistic_alignment_loss(&mut tape, &stored, &pass.stats, config.alpha, config.bn_layers)?;
        sum += tape.value(loss).item();
    }
    Ok(sum / chunks.len() as f64)
}

/// Learn a prompt that aligns the target batch statistics with the ones
/// stored in `source`. The source model is never modified.
pub fn run_pls(source: &SegModel, images: &[Tensor], config: &PlsConfig) -> Result<PlsOutcome> {
    config.validate()?;
    check_images(source, images)?;
    config.bn_layers.resolve(source.config().bn_layer_count())?;
    // Working copy whose running buffers are put back after every iteration.
    let mut model = source.clone();
    let snapshot = model.snapshot();
    let stored = model.bn_layer_states();
    let mut prompt = Prompt::identity(images[0].shape(), config.combine, config.space)?;
    let mut trace = vec![TraceRow {
        stage: Stage::Pls,
        epoch: 0,
        loss_sa: Some(mean_alignment_loss(&model, &prompt, images, config)?),
        loss_seg: None,
        loss_al: None,
        lr: 0.0,
    }];
    let mut opt = OptimizerState::new(&[prompt.offsets.len()], config.momentum, config.lr0, config.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "pls"));
    for epoch in 0..config.epochs {
        opt.epoch = epoch;
        let lr = opt.lr()?;
        let batches = epoch_batches(images.len(), config.batch_size, &mut rng);
        let mut sum = 0.0;
        for idx in &batches {
            let mut tape = Tape::new();
            let x = tape.constant(stack_indexed(images, idx)?);
            let p = tape.leaf(prompt.offsets.clone(), true);
            let altered = prompt.apply_on_tape(&mut tape, x, p)?;
            let pass = model.forward_frozen(&mut tape, altered, BnMode::StatCollect, false)?;
            let loss = statistic_alignment_loss(&mut tape, &stored, &pass.stats, config.alpha, config.bn_layers)?;
            sum += tape.value(loss).item();
            let grad = tape.backward(loss)?.take(p);
            opt.step(&mut [prompt.offsets.data_mut()], &[grad], lr)?;
            model.restore(&snapshot)?;
        }
        trace.push(TraceRow {
            stage: Stage::Pls,
            epoch: epoch + 1,
            loss_sa: Some(sum / batches.len() as f64),
            loss_seg: None,
            loss_al: None,
            lr,
        });
    }
    ensure!(prompt.offsets.is_finite(), "prompt learning diverged");
    prompt.offsets.round_to_f32();
    Ok(PlsOutcome { prompt, trace })
}

/// Fixed binary supervision for the feature alignment stage, `[K,H,W]` per image.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelSet {
    pub masks: Vec<Tensor>,
}

/// Eval-mode per-class probabilities for every image, optionally prompted.
pub fn predict_probs(model: &SegModel, prompt: Option<&Prompt>, images: &[Tensor]) -> Result<Vec<Tensor>> {
    check_images(model, images)?;
    let mut out = Vec::with_capacity(images.len());
    let idx: Vec<usize> = (0..images.len()).collect();
    for chunk in idx.chunks(DEFAULT_BATCH_SIZE) {
        let mut batch = stack_indexed(images, chunk)?;
        if let Some(p) = prompt {
            batch = apply_prompt(&batch, p)?;
        }
        out.extend(model.predict_probs(&batch)?.unstack());
    }
    Ok(out)
}

/// `prob > threshold` as 0/1.
pub fn binarize(probs: &Tensor, threshold: f64) -> Tensor {
    Tensor::from_fn(probs.shape(), |i| f64::from(u8::from(probs.data()[i] > threshold)))
}

/// Per-class masks for one image `[C,H,W]`.
pub fn predict(model: &SegModel, prompt: Option<&Prompt>, image: &Tensor, threshold: f64) -> Result<Tensor> {
    if let Some(p) = prompt {
        ensure!(
            p.offsets.shape() == image.shape(),
            "image shape {:?} does not match prompt shape {:?}",
            image.shape(),
            p.offsets.shape()
        );
    }
    let probs = predict_probs(model, prompt, std::slice::from_ref(image))?;
    Ok(binarize(&probs[0], threshold))
}

pub fn generate_pseudo_labels(
    model: &SegModel,
    prompt: Option<&Prompt>,
    images: &[Tensor],
    threshold: f64,
) -> Result<PseudoLabelSet> {
    ensure!(threshold > 0.0 && threshold < 1.0, "threshold must lie in (0, 1), got {threshold}");
    let masks = predict_probs(model, prompt, images)?
        .iter()
        .map(|p| binarize(p, threshold))
        .collect();
    Ok(PseudoLabelSet { masks })
}

/// Tape handles of the feature alignment objective for one batch.
pub struct FasLosses {
    pub total: Var,
    pub l_seg: Var,
    pub l_al: Var,
    /// Parameter leaves of the plain and augmented forward passes.
    pub params: [Vec<Var>; 2],
}

impl FasLosses {
    /// Parameter gradients summed over both forward passes.
    pub fn param_grads(&self, tape: &Tape) -> Result<Vec<Tensor>> {
        let mut grads = tape.backward(self.total)?;
        self.params[0]
            .iter()
            .zip(&self.params[1])
            .map(|(&a, &b)| {
                let mut g = grads.take(a);
                for (x, y) in g.data_mut().iter_mut().zip(grads.take(b).data()) {
                    *x += y;
                }
                Ok(g)
            })
            .collect()
    }
}

/// `total = BCE(y, p(x~t)) + BCE(y, p(x~a)) + gamma * L1(f(x~t), f(x~a))`
/// where `x~ = prompt(x)`. Both passes run in train mode on `model`.
pub fn fas_losses(
    tape: &mut Tape,
    model: &mut SegModel,
    prompt: Option<&Prompt>,
    batch: &Tensor,
    augmented: &Tensor,
    pseudo: &Tensor,
    gamma: f64,
) -> Result<FasLosses> {
    ensure!(
        batch.shape() == augmented.shape(),
        "augmented batch {:?} does not match batch {:?}",
        augmented.shape(),
        batch.shape()
    );
    ensure!(batch.rank() == 4, "batch must be [N,C,H,W], got {:?}", batch.shape());
    let s = batch.shape();
    ensure!(
        pseudo.shape() == [s[0], model.config().num_classes, s[2], s[3]],
        "pseudo labels {:?} do not align with batch {:?}",
        pseudo.shape(),
        s
    );
    ensure!(gamma >= 0.0, "gamma must be non-negative, got {gamma}");
    let mut xt = tape.constant(batch.clone());
    let mut xa = tape.constant(augmented.clone());
    if let Some(p) = prompt {
        let pv = tape.constant(p.offsets.clone());
        xt = p.apply_on_tape(tape, xt, pv)?;
        xa = p.apply_on_tape(tape, xa, pv)?;
    }
    let pt = model.forward(tape, xt, BnMode::Train, true)?;
    let pa = model.forward(tape, xa, BnMode::Train, true)?;
    let y = tape.constant(pseudo.clone());
    let seg_t = tape.binary_cross_entropy(pt.probs, y)?;
    let seg_a = tape.binary_cross_entropy(pa.probs, y)?;
    let l_seg = tape.add(seg_t, seg_a)?;
    let l_al = tape.l1_distance(pt.bottleneck, pa.bottleneck)?;
    let weighted = tape.scale(l_al, gamma);
    let total = tape.add(l_seg, weighted)?;
    Ok(FasLosses {
        total,
        l_seg,
        l_al,
        params: [pt.params, pa.params],
    })
}

#[derive(Clone, Debug)]
pub struct FasOutcome {
    pub model: SegModel,
    pub trace: Vec<TraceRow>,
}

/// Fine-tune a copy of `source` on prompted target images against fixed
/// pseudo labels. `prompt` is only read.
pub fn run_fas(
    source: &SegModel,
    prompt: Option<&Prompt>,
    images: &[Tensor],
    pseudo: &PseudoLabelSet,
    config: &FasConfig,
) -> Result<FasOutcome> {
    config.validate()?;
    check_images(source, images)?;
    ensure!(
        pseudo.masks.len() == images.len(),
        "{} pseudo labels for {} images",
        pseudo.masks.len(),
        images.len()
    );
    let mut model = source.clone();
    let mut opt = OptimizerState::new(&model.param_lens(), config.momentum, config.lr0, config.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "fas"));
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        opt.epoch = epoch;
        let lr = opt.lr()?;
        let batches = epoch_batches(images.len(), config.batch_size, &mut rng);
        let (mut seg_sum, mut al_sum) = (0.0, 0.0);
        for (b, idx) in batches.iter().enumerate() {
            let x = stack_indexed(images, idx)?;
            let y = stack_indexed(&pseudo.masks, idx)?;
            let aug = if config.augment {
                let items: Vec<Tensor> = idx.iter().map(|&i| images[i].clone()).collect();
                let aug_cfg = AugConfig::new(config.beta_max, derive_seed(config.seed, &format!("style/{epoch}/{b}")))?;
                let restyled = batch_style_permute(&items, &aug_cfg)?;
                Tensor::stack(&restyled.iter().collect::<Vec<_>>())?
            } else {
                x.clone()
            };
            let mut tape = Tape::new();
            let losses = fas_losses(&mut tape, &mut model, prompt, &x, &aug, &y, config.gamma)?;
            seg_sum += tape.value(losses.l_seg).item();
            al_sum += tape.value(losses.l_al).item();
            let grads = losses.param_grads(&tape)?;
            opt.step(&mut model.params_mut(), &grads, lr)?;
        }
        let n = batches.len() as f64;
        trace.push(TraceRow {
            stage: Stage::Fas,
            epoch: epoch + 1,
            loss_sa: None,
            loss_seg: Some(seg_sum / n),
            loss_al: Some(al_sum / n),
            lr,
        });
    }
    ensure!(
        model.params_mut().iter().all(|p| p.iter().all(|v| v.is_finite())),
        "feature alignment diverged"
    );
    model.round_to_f32();
    Ok(FasOutcome { model, trace })
}

/// Random flips, square rotations, reflected crop jitter and additive noise,
/// with the geometric part applied identically to image and masks.
fn augment_sample(sample: &Sample, config: &SourceConfig, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let s = sample.image.shape();
    let (h, w) = (s[1], s[2]);
    let flip_v = rng.random_bool(0.5);
    let flip_h = rng.random_bool(0.5);
    let turns = if h == w { rng.random_range(0..4) } else { 0 };
    let m = config.max_shift as i64;
    let dy = rng.random_range(-m..=m) as isize;
    let dx = rng.random_range(-m..=m) as isize;
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let period = 2 * (n - 1).max(1);
        let r = i.rem_euclid(period);
        (if r < n { r } else { period - r }) as usize
    };
    let source_of = |y: usize, x: usize| -> usize {
        let (mut sy, mut sx) = (y, x);
        for _ in 0..turns {
            (sy, sx) = (sx, h - 1 - sy);
        }
        if flip_v {
            sy = h - 1 - sy;
        }
        if flip_h {
            sx = w - 1 - sx;
        }
        reflect(sy as isize + dy, h) * w + reflect(sx as isize + dx, w)
    };
    let map: Vec<usize> = (0..h * w).map(|i| source_of(i / w, i % w)).collect();
    let warp = |t: &Tensor| {
        Tensor::from_fn(t.shape(), |i| {
            let (plane, p) = (i / (h * w), i % (h * w));
            t.data()[plane * h * w + map[p]]
        })
    };
    let mut image = warp(&sample.image);
    if config.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, config.noise_sigma).expect("validated sigma");
        for v in image.data_mut() {
            *v += normal.sample(rng);
        }
    }
    (image, warp(&sample.masks))
}

#[derive(Clone, Debug)]
pub struct SourceOutcome {
    pub model: SegModel,
    /// Row 0 is the loss of the initial model on unaugmented data.
    pub trace: Vec<TraceRow>,
}

/// Supervised training on the pooled source samples.
pub fn train_source(samples: &[Sample], config: &SourceConfig) -> Result<SourceOutcome> {
    config.validate()?;
    ensure!(!samples.is_empty(), "source training needs labeled data");
    let mut model = SegModel::build(config.model, config.seed)?;
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    check_images(&model, &images)?;
    let k = config.model.num_classes;
    ensure!(
        samples.iter().all(|s| s.masks.shape() == [k, images[0].shape()[1], images[0].shape()[2]]),
        "masks must be [{k},H,W] matching the images"
    );
    let masks: Vec<Tensor> = samples.iter().map(|s| s.masks.clone()).collect();
    let mut initial = 0.0;
    let all: Vec<usize> = (0..samples.len()).collect();
    let chunks: Vec<&[usize]> = all.chunks(config.batch_size).collect();
    for idx in &chunks {
        let mut tape = Tape::new();
        let x = tape.constant(stack_indexed(&images, idx)?);
        let y = tape.constant(stack_indexed(&masks, idx)?);
        let pass = model.forward_frozen(&mut tape, x, BnMode::StatCollect, false)?;
        let loss = tape.binary_cross_entropy(pass.probs, y)?;
        initial += tape.value(loss).item();
    }
    let mut trace = vec![TraceRow {
        stage: Stage::Source,
        epoch: 0,
        loss_sa: None,
        loss_seg: Some(initial / chunks.len() as f64),
        loss_al: None,
        lr: 0.0,
    }];
    let mut opt = OptimizerState::new(&model.param_lens(), config.momentum, config.lr0, config.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "source"));
    for epoch in 0..config.epochs {
        opt.epoch = epoch;
        let lr = opt.lr()?;
        let batches = epoch_batches(samples.len(), config.batch_size, &mut rng);
        let mut sum = 0.0;
        for idx in &batches {
            let (xs, ys): (Vec<Tensor>, Vec<Tensor>) = idx
                .iter()
                .map(|&i| augment_sample(&samples[i], config, &mut rng))
                .unzip();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::stack(&xs.iter().collect::<Vec<_>>())?);
            let y = tape.constant(Tensor::stack(&ys.iter().collect::<Vec<_>>())?);
            let pass = model.forward(&mut tape, x, BnMode::Train, true)?;
            let loss = tape.binary_cross_entropy(pass.probs, y)?;
            sum += tape.value(loss).item();
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = pass.params.iter().map(|&p| grads.take(p)).collect();
            opt.step(&mut model.params_mut(), &grads, lr)?;
        }
        trace.push(TraceRow {
            stage: Stage::Source,
            epoch: epoch + 1,
            loss_sa: None,
            loss_seg: Some(sum / batches.len() as f64),
            loss_al: None,
            lr,
        });
    }
    ensure!(
        model.params_mut().iter().all(|p| p.iter().all(|v| v.is_finite())),
        "source training diverged"
    );
    model.round_to_f32();
    Ok(SourceOutcome { model, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_domain, DomainSpec, ImageShape};
    use crate::engine::grad_check;

    fn tiny_config() -> SegModelConfig {
        SegModelConfig {
            in_channels: 1,
            base_channels: 2,
            depth: 2,
            num_classes: 2,
        }
    }

    fn layer(mean: Vec<f64>, std: Vec<f64>) -> BnLayerState {
        let mut l = BnLayerState::new(mean.len());
        l.running_mean = mean;
        l.running_std = std;
        l
    }

    fn stats(mean: Vec<f64>, std: Vec<f64>) -> BatchStats {
        BatchStats { mean, std }
    }

    #[test]
    fn alignment_loss_fixtures() {
        let stored = [layer(vec![0.0], vec![1.0])];
        let same = statistic_alignment_value(&stored, &[stats(vec![0.0], vec![1.0])], 0.01, BnLayers::All).unwrap();
        assert_eq!(same, 0.0);
        let shifted = statistic_alignment_value(&stored, &[stats(vec![2.0], vec![1.0])], 0.01, BnLayers::All).unwrap();
        assert!((shifted - 2.0).abs() < 1e-12);
        let wider = statistic_alignment_value(&stored, &[stats(vec![0.0], vec![3.0])], 0.01, BnLayers::All).unwrap();
        assert!((wider - 0.02).abs() < 1e-12);
    }

    #[test]
    fn alignment_loss_averages_channels_and_sums_layers() {
        let stored = [layer(vec![0.0, 1.0], vec![1.0, 1.0]), layer(vec![5.0], vec![2.0])];
        let batch = [stats(vec![1.0, -1.0], vec![1.0, 2.0]), stats(vec![4.0], vec![4.0])];
        // layer 1: mean(1, 2) + 0.5 * mean(0, 1); layer 2: 1 + 0.5 * 2
        let all = statistic_alignment_value(&stored, &batch, 0.5, BnLayers::All).unwrap();
        assert!((all - (1.5 + 0.25 + 1.0 + 1.0)).abs() < 1e-12);
        let first = statistic_alignment_value(&stored, &batch, 0.5, BnLayers::First(1)).unwrap();
        assert!((first - 1.75).abs() < 1e-12);
        assert!(statistic_alignment_value(&stored, &batch, 0.5, BnLayers::First(3)).is_err());
        assert!(statistic_alignment_value(&stored, &batch[..1], 0.5, BnLayers::All).is_err());
    }

    #[test]
    fn bn_layers_parse() {
        assert_eq!(BnLayers::parse("all"), Some(BnLayers::All));
        assert_eq!(BnLayers::parse("4"), Some(BnLayers::First(4)));
        assert_eq!(BnLayers::parse("0"), None);
        assert_eq!(BnLayers::parse("x"), None);
    }

    fn images(n: usize, side: usize, spec: &str, seed: u64) -> Vec<Sample> {
        let spec = DomainSpec::preset(spec).unwrap();
        gen_domain(&spec, n, ImageShape::new(side, side, 1).unwrap(), seed).unwrap()
    }

    #[test]
    fn identity_prompts_pass_images_through() {
        let x = Tensor::from_fn(&[3, 1, 8, 8], |i| ((i * 37) % 11) as f64 - 5.0 + if i == 3 { -0.0 } else { 0.3 });
        let zero_add = Prompt::identity(&[1, 8, 8], CombineOp::Add, PromptSpace::Spatial).unwrap();
        let out = apply_prompt(&x, &zero_add).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out), bits(&x));
        let ones_mul = Prompt::identity(&[1, 8, 8], CombineOp::Mul, PromptSpace::Spatial).unwrap();
        assert_eq!(apply_prompt(&x, &ones_mul).unwrap(), x);
        for combine in [CombineOp::Add, CombineOp::Mul] {
            let p = Prompt::identity(&[1, 8, 8], combine, PromptSpace::Frequency).unwrap();
            assert!(apply_prompt(&x, &p).unwrap().max_abs_diff(&x) < 1e-5);
        }
        let single = Tensor::from_fn(&[1, 8, 8], |i| i as f64);
        assert_eq!(apply_prompt(&single, &zero_add).unwrap(), single);
    }

    #[test]
    fn prompt_validation() {
        let bad = Tensor::new(vec![1, 1, 2], vec![0.0, f64::INFINITY]).unwrap();
        assert!(Prompt::from_tensor(bad, CombineOp::Add, PromptSpace::Spatial).is_err());
        let p = Prompt::identity(&[1, 4, 4], CombineOp::Add, PromptSpace::Spatial).unwrap();
        assert!(apply_prompt(&Tensor::zeros(&[2, 1, 4, 5]), &p).is_err());
    }

    #[test]
    fn prompt_gradient_through_network_matches_finite_differences() {
        let mut model = SegModel::build(tiny_config(), 4).unwrap();
        // Non-trivial stored statistics so every term has a gradient.
        for (i, l) in model.layers_mut().iter_mut().enumerate() {
            for (c, (m, s)) in l.bn.running_mean.iter_mut().zip(l.bn.running_std.iter_mut()).enumerate() {
                *m = 0.1 * (i as f64 + 1.0) * if c % 2 == 0 { 1.0 } else { -1.0 };
                *s = 0.5 + 0.3 * c as f64;
            }
        }
        let stored = model.bn_layer_states();
        let x = Tensor::from_fn(&[2, 1, 8, 8], |i| ((i * 7919) % 97) as f64 / 48.0 - 1.0);
        for combine in [CombineOp::Add, CombineOp::Mul] {
            for space in [PromptSpace::Spatial, PromptSpace::Frequency] {
                let p0 = Tensor::from_fn(&[1, 8, 8], |i| {
                    let base = if combine == CombineOp::Mul { 1.0 } else { 0.0 };
                    base + 0.05 * ((i * 31 % 17) as f64 / 17.0 - 0.5)
                });
                let f = |tape: &mut Tape, p: Var| -> Result<Var> {
                    let xv = tape.constant(x.clone());
                    let altered = apply_on_tape(tape, xv, p, combine, space)?;
                    let pass = model.forward_frozen(tape, altered, BnMode::StatCollect, false)?;
                    statistic_alignment_loss(tape, &stored, &pass.stats, 0.01, BnLayers::All)
                };
                let err = grad_check(f, &p0, 1e-6).unwrap();
                assert!(err <= 1e-5, "{combine:?}/{space:?}: relative error {err}");
            }
        }
    }

    #[test]
    fn pls_leaves_source_untouched_and_reduces_loss() {
        let source = SourceConfig {
            model: tiny_config(),
            epochs: 1,
            batch_size: 4,
            ..SourceConfig::default()
        };
        let model = train_source(&images(32, 16, "source_a", 1), &source).unwrap().model;
        let before = model.to_bytes();
        let imgs: Vec<Tensor> = images(12, 16, "target", 3).into_iter().map(|s| s.image).collect();
        let config = PlsConfig {
            epochs: 5,
            lr0: 0.1,
            batch_size: 4,
            ..PlsConfig::default()
        };
        let out = run_pls(&model, &imgs, &config).unwrap();
        assert_eq!(model.to_bytes(), before);
        assert_eq!(out.trace.len(), 6);
        let losses: Vec<f64> = out.trace.iter().map(|r| r.loss_sa.unwrap()).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
        assert!(out.final_loss() < out.initial_loss());
        let again = run_pls(&model, &imgs, &config).unwrap();
        assert_eq!(again.prompt, out.prompt);
        assert!(run_pls(&model, &[], &config).is_err());
    }

    #[test]
    fn binarization_is_strict() {
        let probs = Tensor::new(vec![1, 1, 3], vec![0.5, 0.9, 0.1]).unwrap();
        assert_eq!(binarize(&probs, 0.5).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn pseudo_labels_follow_predictions() {
        let mut model = SegModel::build(tiny_config(), 2).unwrap();
        // A large head bias saturates class 0 at probability ~1.
        let head_bias = model.params_mut().pop().unwrap();
        head_bias[0] = 40.0;
        head_bias[1] = -40.0;
        let imgs: Vec<Tensor> = images(3, 8, "source_a", 0).into_iter().map(|s| s.image).collect();
        let labels = generate_pseudo_labels(&model, None, &imgs, 0.5).unwrap();
        for m in &labels.masks {
            assert!(m.data()[..64].iter().all(|&v| v == 1.0));
            assert!(m.data()[64..].iter().all(|&v| v == 0.0));
        }
        let again = generate_pseudo_labels(&model, None, &imgs, 0.5).unwrap();
        assert_eq!(labels, again);
    }

    #[test]
    fn fas_loss_identities() {
        let mut model = SegModel::build(tiny_config(), 5).unwrap();
        let samples = images(4, 8, "target", 1);
        let refs: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
        let x = Tensor::stack(&refs).unwrap();
        let y = Tensor::stack(&samples.iter().map(|s| &s.masks).collect::<Vec<_>>()).unwrap();
        let prompt = Prompt::identity(&[1, 8, 8], CombineOp::Add, PromptSpace::Spatial).unwrap();

        let mut tape = Tape::new();
        let l = fas_losses(&mut tape, &mut model, Some(&prompt), &x, &x, &y, 0.1).unwrap();
        assert_eq!(tape.value(l.l_al).item(), 0.0);
        assert_eq!(tape.value(l.total).item(), tape.value(l.l_seg).item());

        let aug = Tensor::from_fn(x.shape(), |i| x.data()[i] * 0.8 + 0.1);
        let mut tape = Tape::new();
        let l = fas_losses(&mut tape, &mut model, None, &x, &aug, &y, 0.0).unwrap();
        assert!(tape.value(l.l_al).item() > 0.0);
        assert_eq!(tape.value(l.total).item(), tape.value(l.l_seg).item());

        let bias = model.params_mut().pop().unwrap();
        bias.fill(60.0);
        let ones = Tensor::full(y.shape(), 1.0);
        let mut tape = Tape::new();
        let l = fas_losses(&mut tape, &mut model, None, &x, &x, &ones, 0.1).unwrap();
        assert!(tape.value(l.l_seg).item() <= 2e-6);

        let mut tape = Tape::new();
        assert!(fas_losses(&mut tape, &mut model, None, &x, &aug, &y.unstack()[0], 0.1).is_err());
    }

    #[test]
    fn fas_gradient_sums_both_branches() {
        let mut model = SegModel::build(tiny_config(), 6).unwrap();
        let samples = images(2, 8, "source_b", 2);
        let x = Tensor::stack(&samples.iter().map(|s| &s.image).collect::<Vec<_>>()).unwrap();
        let y = Tensor::stack(&samples.iter().map(|s| &s.masks).collect::<Vec<_>>()).unwrap();
        let aug = Tensor::from_fn(x.shape(), |i| x.data()[i] + 0.05 * ((i % 5) as f64 - 2.0));
        let head_idx = model.param_lens().len() - 2;
        // Numeric derivative of the total loss with respect to one head weight.
        let total_with = |delta: f64| -> f64 {
            let mut m = model.clone();
            m.params_mut()[head_idx][0] += delta;
            let mut tape = Tape::new();
            let l = fas_losses(&mut tape, &mut m, None, &x, &aug, &y, 0.1).unwrap();
            tape.value(l.total).item()
        };
        let h = 1e-6;
        let numeric = (total_with(h) - total_with(-h)) / (2.0 * h);
        let mut tape = Tape::new();
        let l = fas_losses(&mut tape, &mut model, None, &x, &aug, &y, 0.1).unwrap();
        let analytic = l.param_grads(&tape).unwrap()[head_idx].data()[0];
        assert!((analytic - numeric).abs() <= 1e-5 * analytic.abs().max(numeric.abs()).max(1e-8));
    }

    #[test]
    fn fas_keeps_prompt_and_fits_clean_labels() {
        let source = SegModel::build(tiny_config(), 7).unwrap();
        let samples = images(16, 16, "source_a", 8);
        let imgs: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
        let pseudo = PseudoLabelSet {
            masks: samples.iter().map(|s| s.masks.clone()).collect(),
        };
        let prompt = Prompt::identity(&[1, 16, 16], CombineOp::Add, PromptSpace::Spatial).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.tns");
        prompt.save(&path).unwrap();
        let before = fs::read(&path).unwrap();
        let config = FasConfig {
            gamma: 0.0,
            augment: false,
            epochs: 5,
            batch_size: 4,
            lr0: 0.01,
            ..FasConfig::default()
        };
        let out = run_fas(&source, Some(&prompt), &imgs, &pseudo, &config).unwrap();
        prompt.save(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), before);
        let losses: Vec<f64> = out.trace.iter().map(|r| r.loss_seg.unwrap()).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
        let again = run_fas(&source, Some(&prompt), &imgs, &pseudo, &config).unwrap();
        assert_eq!(again.model, out.model);
    }

    #[test]
    fn source_training_is_deterministic_and_learns() {
        let samples = images(64, 16, "source_a", 9);
        let config = SourceConfig {
            model: tiny_config(),
            epochs: 2,
            batch_size: 4,
            ..SourceConfig::default()
        };
        let a = train_source(&samples, &config).unwrap();
        let b = train_source(&samples, &config).unwrap();
        assert_eq!(a.model.to_bytes(), b.model.to_bytes());
        let first = a.trace[1].loss_seg.unwrap();
        assert!(first < a.trace[0].loss_seg.unwrap());
        assert!(train_source(&[], &config).is_err());
    }

    #[test]
    fn augmentation_moves_image_and_masks_together() {
        let samples = images(6, 16, "source_b", 10);
        let config = SourceConfig {
            noise_sigma: 0.0,
            ..SourceConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in &samples {
            // Use the outer mask as the image so correspondence is checkable.
            let probe = Sample {
                image: Tensor::new(vec![1, 16, 16], s.masks.data()[..256].to_vec()).unwrap(),
                masks: s.masks.clone(),
            };
            let (img, masks) = augment_sample(&probe, &config, &mut rng);
            assert_eq!(img.data(), &masks.data()[..256]);
            assert!((0..256).all(|i| masks.data()[256 + i] <= masks.data()[i]));
        }
    }

    #[test]
    fn trace_csv_layout() {
        let rows = [
            TraceRow {
                stage: Stage::Pls,
                epoch: 0,
                loss_sa: Some(1.5),
                loss_seg: None,
                loss_al: None,
                lr: 0.0,
            },
            TraceRow {
                stage: Stage::Fas,
                epoch: 1,
                loss_sa: None,
                loss_seg: Some(0.25),
                loss_al: Some(0.125),
                lr: 0.001,
            },
        ];
        assert_eq!(
            trace_csv(&rows),
            "stage,epoch,loss_sa,loss_seg,loss_al,lr\npls,0,1.5,,,0\nfas,1,,0.25,0.125,0.001\n"
        );
    }
}
