//! Dice evaluation and metrics reporting.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use crate::data::Sample;
use crate::error::{ensure, Result, SfdaError};
use crate::pipeline::{binarize, predict_probs, Prompt};
use crate::segnet::SegModel;
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "variant,domain,class,dice_mean,dice_std,seed";

/// `2 |P & G| / (|P| + |G|)`; two empty masks score 1.
pub fn dice_score(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    ensure!(
        pred.shape() == gt.shape(),
        "dice shape mismatch: {:?} vs {:?}",
        pred.shape(),
        gt.shape()
    );
    dice_slices(pred.data(), gt.data())
}

fn dice_slices(pred: &[f64], gt: &[f64]) -> Result<f64> {
    let binary = |v: &f64| *v == 0.0 || *v == 1.0;
    ensure!(
        pred.iter().all(binary) && gt.iter().all(binary),
        "dice expects binary masks"
    );
    let (mut both, mut sum) = (0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        both += p * g;
        sum += p + g;
    }
    Ok(if sum == 0.0 { 1.0 } else { 2.0 * both / sum })
}

/// Seed column of a metrics row; aggregate rows cover all seeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedLabel {
    Seed(u64),
    All,
}

impl fmt::Display for SeedLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SeedLabel::Seed(s) => write!(f, "{s}"),
            SeedLabel::All => f.write_str("all"),
        }
    }
}

/// Dice of one class. Per-seed rows hold mean and standard deviation over
/// test samples; aggregate rows hold them over the per-seed means.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub variant: String,
    pub domain: String,
    pub class: usize,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub seed: SeedLabel,
}

/// Population mean and standard deviation.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-class Dice of thresholded predictions, averaged over `samples`.
pub fn evaluate_model(
    model: &SegModel,
    prompt: Option<&Prompt>,
    samples: &[Sample],
    threshold: f64,
    variant: &str,
    domain: &str,
    seed: u64,
) -> Result<Vec<MetricsRecord>> {
    ensure!(!samples.is_empty(), "cannot evaluate on an empty dataset");
    let k = model.config().num_classes;
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let probs = predict_probs(model, prompt, &images)?;
    let mut per_class = vec![Vec::with_capacity(samples.len()); k];
    for (p, s) in probs.iter().zip(samples) {
        ensure!(
            s.masks.shape() == p.shape(),
            "ground truth {:?} does not match prediction {:?}",
            s.masks.shape(),
            p.shape()
        );
        let pred = binarize(p, threshold);
        let plane = pred.len() / k;
        for (c, scores) in per_class.iter_mut().enumerate() {
            let range = c * plane..(c + 1) * plane;
            scores.push(dice_slices(&pred.data()[range.clone()], &s.masks.data()[range])?);
        }
    }
    Ok(per_class
        .iter()
        .enumerate()
        .map(|(class, scores)| {
            let (dice_mean, dice_std) = mean_std(scores);
            MetricsRecord {
                variant: variant.to_string(),
                domain: domain.to_string(),
                class,
                dice_mean,
                dice_std,
                seed: SeedLabel::Seed(seed),
            }
        })
        .collect())
}

/// Mean Dice over all classes of a record set.
pub fn mean_dice(records: &[MetricsRecord]) -> f64 {
    records.iter().map(|r| r.dice_mean).sum::<f64>() / records.len() as f64
}

/// One `seed = all` row per (variant, domain, class), in first-seen order.
pub fn aggregate(records: &[MetricsRecord]) -> Vec<MetricsRecord> {
    let mut keys: Vec<(&str, &str, usize)> = Vec::new();
    for r in records.iter().filter(|r| r.seed != SeedLabel::All) {
        let key = (r.variant.as_str(), r.domain.as_str(), r.class);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(variant, domain, class)| {
            let means: Vec<f64> = records
                .iter()
                .filter(|r| {
                    r.seed != SeedLabel::All && r.variant == variant && r.domain == domain && r.class == class
                })
                .map(|r| r.dice_mean)
                .collect();
            let (dice_mean, dice_std) = mean_std(&means);
            MetricsRecord {
                variant: variant.to_string(),
                domain: domain.to_string(),
                class,
                dice_mean,
                dice_std,
                seed: SeedLabel::All,
            }
        })
        .collect()
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.variant, r.domain, r.class, r.dice_mean, r.dice_std, r.seed
        );
    }
    s
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    fs::write(path, metrics_csv(records)).map_err(|e| SfdaError::io(path, e))
}

/// Parse text produced by [`metrics_csv`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    ensure!(
        lines.next() == Some(METRICS_HEADER),
        "metrics csv must start with {METRICS_HEADER:?}"
    );
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || SfdaError::invalid(format!("metrics csv line {}: {line:?}", i + 2));
            if f.len() != 6 {
                return Err(bad());
            }
            let seed = match f[5] {
                "all" => SeedLabel::All,
                s => SeedLabel::Seed(s.parse().map_err(|_| bad())?),
            };
            Ok(MetricsRecord {
                variant: f[0].to_string(),
                domain: f[1].to_string(),
                class: f[2].parse().map_err(|_| bad())?,
                dice_mean: f[3].parse().map_err(|_| bad())?,
                dice_std: f[4].parse().map_err(|_| bad())?,
                seed,
            })
        })
        .collect()
}
