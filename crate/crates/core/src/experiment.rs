//! Benchmark generation and the adaptation variant grid.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{DataConfig, ExperimentConfig};
use crate::data::{
    derive_seed, gen_domain, list_domains, read_split, split_dir, write_split, Dataset, DomainRole, DomainSpec,
    ImageShape, Sample, Split, MANIFEST_FILE,
};
use crate::error::{ensure, Result, SfdaError};
use crate::eval::{aggregate, evaluate_model, write_metrics_csv, MetricsRecord};
use crate::pipeline::{
    generate_pseudo_labels, run_fas, run_pls, write_trace_csv, FasConfig, PlsConfig, PlsOutcome, Prompt,
    PseudoLabelSet, TraceRow,
};
use crate::segnet::SegModel;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Source model on raw target images.
    NoDa,
    /// Fine-tuning on the raw source model's own pseudo labels.
    SelfTrain,
    /// Source model on prompted target images.
    PlsOnly,
    /// Prompt only generates pseudo labels; training and testing are unprompted.
    FasOnly,
    /// Prompt learning, then feature alignment on prompted images.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::NoDa,
        Variant::SelfTrain,
        Variant::PlsOnly,
        Variant::FasOnly,
        Variant::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::NoDa => "no_da",
            Variant::SelfTrain => "self_train",
            Variant::PlsOnly => "pls_only",
            Variant::FasOnly => "fas_only",
            Variant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Variant::ALL.into_iter().find(|v| v.as_str() == s)
    }

    /// Whether the variant fine-tunes the model.
    pub fn trains(self) -> bool {
        matches!(self, Variant::SelfTrain | Variant::FasOnly | Variant::Full)
    }
}

/// Write train and test splits for every configured domain under `data.root`.
pub fn generate_datasets(data: &DataConfig) -> Result<Vec<PathBuf>> {
    let shape = ImageShape::new(data.height, data.width, data.channels)?;
    let domains = data
        .sources
        .iter()
        .map(|d| (d, DomainRole::Source))
        .chain([(&data.target, DomainRole::Target)]);
    let mut written = Vec::new();
    for (domain, role) in domains {
        let spec = DomainSpec::preset(domain)?;
        for (split, n) in [(Split::Train, data.train_count), (Split::Test, data.test_count)] {
            let seed = derive_seed(data.seed, &format!("{domain}/{}", split.as_str()));
            let samples = gen_domain(&spec, n, shape, seed)?;
            let dir = split_dir(&data.root, domain, split);
            write_split(&dir, domain, split, role, seed, &samples)?;
            written.push(dir);
        }
    }
    Ok(written)
}

/// Every domain with the given role that has `split`, in name order.
pub fn load_role(root: &Path, split: Split, role: DomainRole) -> Result<Vec<Dataset>> {
    let mut out = Vec::new();
    for (name, manifest) in list_domains(root, split)? {
        if manifest.role == role {
            out.push(read_split(&split_dir(root, &name, split))?);
        }
    }
    ensure!(
        !out.is_empty(),
        "no {} domains with a {} split under {}",
        role.as_str(),
        split.as_str(),
        root.display()
    );
    Ok(out)
}

pub fn pooled_samples(sets: &[Dataset]) -> Vec<Sample> {
    sets.iter().flat_map(|d| d.samples.iter().cloned()).collect()
}

/// Result of adapting to a target domain with one variant.
#[derive(Clone, Debug)]
pub struct AdaptRun {
    pub variant: Variant,
    pub seed: u64,
    /// Model used at test time.
    pub model: SegModel,
    /// Prompt applied at test time.
    pub prompt: Option<Prompt>,
    /// Prompt used only to generate pseudo labels.
    pub label_prompt: Option<Prompt>,
    pub trace: Vec<TraceRow>,
}

/// Runs variants for one seed, sharing the learned prompt and its pseudo
/// labels between variants.
pub struct Adapter<'a> {
    source: &'a SegModel,
    images: &'a [Tensor],
    pls: PlsConfig,
    fas: FasConfig,
    seed: u64,
    learned: Option<PlsOutcome>,
    pseudo: Option<PseudoLabelSet>,
}

impl<'a> Adapter<'a> {
    pub fn new(source: &'a SegModel, images: &'a [Tensor], pls: &PlsConfig, fas: &FasConfig, seed: u64) -> Self {
        Adapter {
            source,
            images,
            pls: PlsConfig { seed, ..pls.clone() },
            fas: FasConfig { seed, ..fas.clone() },
            seed,
            learned: None,
            pseudo: None,
        }
    }

    fn learned(&mut self) -> Result<&PlsOutcome> {
        if self.learned.is_none() {
            self.learned = Some(run_pls(self.source, self.images, &self.pls)?);
        }
        Ok(self.learned.as_ref().expect("just set"))
    }

    fn prompted_labels(&mut self) -> Result<&PseudoLabelSet> {
        if self.pseudo.is_none() {
            let prompt = self.learned()?.prompt.clone();
            self.pseudo = Some(generate_pseudo_labels(
                self.source,
                Some(&prompt),
                self.images,
                self.fas.threshold,
            )?);
        }
        Ok(self.pseudo.as_ref().expect("just set"))
    }

    pub fn run(&mut self, variant: Variant) -> Result<AdaptRun> {
        let mut run = AdaptRun {
            variant,
            seed: self.seed,
            model: self.source.clone(),
            prompt: None,
            label_prompt: None,
            trace: Vec::new(),
        };
        match variant {
            Variant::NoDa => {}
            Variant::SelfTrain => {
                let pseudo = generate_pseudo_labels(self.source, None, self.images, self.fas.threshold)?;
                let config = FasConfig {
                    gamma: 0.0,
                    augment: false,
                    ..self.fas.clone()
                };
                let out = run_fas(self.source, None, self.images, &pseudo, &config)?;
                run.model = out.model;
                run.trace = out.trace;
            }
            Variant::PlsOnly => {
                let learned = self.learned()?;
                run.prompt = Some(learned.prompt.clone());
                run.trace = learned.trace.clone();
            }
            Variant::FasOnly | Variant::Full => {
                let pseudo = self.prompted_labels()?.clone();
                let learned = self.learned()?;
                let prompt = learned.prompt.clone();
                run.trace = learned.trace.clone();
                let fas_prompt = (variant == Variant::Full).then_some(&prompt);
                let out = run_fas(self.source, fas_prompt, self.images, &pseudo, &self.fas)?;
                run.model = out.model;
                run.trace.extend(out.trace);
                if variant == Variant::Full {
                    run.prompt = Some(prompt);
                } else {
                    run.label_prompt = Some(prompt);
                }
            }
        }
        Ok(run)
    }
}

pub const PROMPT_FILE: &str = "prompt.tns";
pub const LABEL_PROMPT_FILE: &str = "label_prompt.tns";
pub const MODEL_FILE: &str = "model.bin";
pub const TRACE_FILE: &str = "trace.csv";
pub const METRICS_FILE: &str = "metrics.csv";

/// Write the run's artifacts into `dir`: the test-time model, the prompts it
/// uses, and its loss trace.
pub fn write_run(dir: &Path, run: &AdaptRun) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SfdaError::io(dir, e))?;
    run.model.save(&dir.join(MODEL_FILE))?;
    if let Some(p) = &run.prompt {
        p.save(&dir.join(PROMPT_FILE))?;
    }
    if let Some(p) = &run.label_prompt {
        p.save(&dir.join(LABEL_PROMPT_FILE))?;
    }
    write_trace_csv(&dir.join(TRACE_FILE), &run.trace)
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(SfdaError::Config(format!("{what} not found: {}", path.display())))
    }
}

/// Fail before any computation if an input artifact is missing.
pub fn check_artifacts(config: &ExperimentConfig) -> Result<()> {
    require_file(&config.model_path, "source model")?;
    for split in [Split::Train, Split::Test] {
        let dir = split_dir(&config.data.root, &config.data.target, split);
        require_file(&dir.join(MANIFEST_FILE), &format!("target {} split", split.as_str()))?;
    }
    if config.seeds.is_empty() || config.variants.is_empty() {
        return Err(SfdaError::Config("at least one seed and one variant are required".into()));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    /// Per-seed rows in run order followed by the aggregate rows.
    pub records: Vec<MetricsRecord>,
    /// Every run in execution order.
    pub runs: Vec<AdaptRun>,
}

/// Run every configured variant for every seed on the target domain. Writes
/// `metrics.csv` and per-run artifacts under `out/<variant>/seed_<s>/`.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    check_artifacts(config)?;
    let source = SegModel::load(&config.model_path)?;
    let target = &config.data.target;
    let train = read_split(&split_dir(&config.data.root, target, Split::Train))?;
    let test = read_split(&split_dir(&config.data.root, target, Split::Test))?;
    let images = train.images();
    fs::create_dir_all(out).map_err(|e| SfdaError::io(out, e))?;
    let mut records = Vec::new();
    let mut runs = Vec::new();
    for &seed in &config.seeds {
        let mut adapter = Adapter::new(&source, &images, &config.pls, &config.fas, seed);
        for &variant in &config.variants {
            let run = adapter.run(variant)?;
            records.extend(evaluate_model(
                &run.model,
                run.prompt.as_ref(),
                &test.samples,
                config.fas.threshold,
                variant.as_str(),
                target,
                seed,
            )?);
            write_run(&out.join(variant.as_str()).join(format!("seed_{seed}")), &run)?;
            runs.push(run);
        }
    }
    let summary = aggregate(&records);
    records.extend(summary);
    write_metrics_csv(&out.join(METRICS_FILE), &records)?;
    Ok(ExperimentReport { records, runs })
}
