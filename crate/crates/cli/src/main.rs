use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sfda_core::config::{parse_config, ExperimentConfig};
use sfda_core::data::{read_split, Dataset, DomainRole, Split, MANIFEST_FILE};
use sfda_core::eval::{evaluate_model, mean_dice, write_metrics_csv, SeedLabel};
use sfda_core::experiment::{
    generate_datasets, load_role, pooled_samples, run_experiment, write_run, Adapter, Variant, METRICS_FILE,
};
use sfda_core::pipeline::{train_source, write_trace_csv, BnLayers, CombineOp, Prompt, PromptSpace};
use sfda_core::segnet::SegModel;
use sfda_core::{Result, SfdaError};

#[derive(Parser)]
#[command(name = "sfda", version, about = "Source-free domain adaptation for synthetic segmentation benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source and target domains described by a config file.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a source model on every source-role domain under a data root.
    TrainSource {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Read the [model] and [source] sections from this file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        base_channels: Option<usize>,
        #[arg(long)]
        depth: Option<usize>,
    },
    /// Adapt a source model to an unlabeled target split.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        /// Split directory, or a domain directory whose train split is used.
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "full", value_parser = parse_variant)]
        variant: Variant,
        /// Read the [pls] and [fas] sections from this file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        pls_epochs: Option<usize>,
        #[arg(long)]
        fas_epochs: Option<usize>,
        #[arg(long, value_parser = parse_bn_layers)]
        bn_layers: Option<BnLayers>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-class Dice of a model on a labeled split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        prompt: Option<PathBuf>,
        /// Split directory, or a domain directory whose test split is used.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Value of the variant column.
        #[arg(long, default_value = "eval")]
        variant: String,
        /// Value of the seed column.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value = "add", value_parser = parse_combine)]
        combine: CombineOp,
        #[arg(long, default_value = "spatial", value_parser = parse_space)]
        space: PromptSpace,
    },
    /// Run every configured variant and seed, writing metrics.csv and run artifacts.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    Variant::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Variant::ALL.iter().map(|v| v.as_str()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

fn parse_bn_layers(s: &str) -> std::result::Result<BnLayers, String> {
    BnLayers::parse(s).ok_or_else(|| "expected \"all\" or a positive integer".to_string())
}

fn parse_combine(s: &str) -> std::result::Result<CombineOp, String> {
    CombineOp::parse(s).ok_or_else(|| "expected add or mul".to_string())
}

fn parse_space(s: &str) -> std::result::Result<PromptSpace, String> {
    PromptSpace::parse(s).ok_or_else(|| "expected spatial or frequency".to_string())
}

fn read_config(path: &Path) -> Result<ExperimentConfig> {
    require_file(path, "config file")?;
    parse_config(path)
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => read_config(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn config_err(e: SfdaError) -> SfdaError {
    if e.is_config_error() {
        e
    } else {
        SfdaError::Config(e.to_string())
    }
}

/// A split directory as given, or `dir/<fallback>` when `dir` is a domain.
fn resolve_split(dir: &Path, fallback: Split) -> Result<Dataset> {
    let split = if dir.join(MANIFEST_FILE).is_file() {
        dir.to_path_buf()
    } else {
        dir.join(fallback.as_str())
    };
    if !split.join(MANIFEST_FILE).is_file() {
        return Err(SfdaError::Config(format!(
            "no dataset manifest in {} or {}",
            dir.display(),
            split.display()
        )));
    }
    read_split(&split)
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(SfdaError::Config(format!("{what} not found: {}", path.display())))
    }
}

fn gen_data(config: &Path, out: &Path) -> Result<()> {
    let mut c = read_config(config)?;
    c.data.root = out.to_path_buf();
    let dirs = generate_datasets(&c.data)?;
    for d in dirs {
        println!("wrote {}", d.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    data: &Path,
    out: &Path,
    seed: u64,
    config: Option<&Path>,
    epochs: Option<usize>,
    base_channels: Option<usize>,
    depth: Option<usize>,
) -> Result<()> {
    let mut source = load_config(config)?.source;
    source.seed = seed;
    if let Some(e) = epochs {
        source.epochs = e;
    }
    if let Some(b) = base_channels {
        source.model.base_channels = b;
    }
    if let Some(d) = depth {
        source.model.depth = d;
    }
    source.validate().map_err(config_err)?;
    if !data.is_dir() {
        return Err(SfdaError::Config(format!("data root not found: {}", data.display())));
    }
    let train_sets = load_role(data, Split::Train, DomainRole::Source).map_err(config_err)?;
    source.model.in_channels = train_sets[0].manifest.shape.channels;
    let outcome = train_source(&pooled_samples(&train_sets), &source)?;
    outcome.model.save(out)?;
    write_trace_csv(&out.with_extension("trace.csv"), &outcome.trace)?;
    if let Ok(test_sets) = load_role(data, Split::Test, DomainRole::Source) {
        for set in test_sets {
            let r = evaluate_model(&outcome.model, None, &set.samples, 0.5, "source", &set.manifest.domain, seed)?;
            println!(
                "{}: outer dice {:.4}, mean dice {:.4}",
                set.manifest.domain,
                r[0].dice_mean,
                mean_dice(&r)
            );
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn adapt(
    model: &Path,
    target: &Path,
    out: &Path,
    variant: Variant,
    config: Option<&Path>,
    alpha: Option<f64>,
    gamma: Option<f64>,
    pls_epochs: Option<usize>,
    fas_epochs: Option<usize>,
    bn_layers: Option<BnLayers>,
    seed: u64,
) -> Result<()> {
    let c = load_config(config)?;
    let (mut pls, mut fas) = (c.pls, c.fas);
    if let Some(a) = alpha {
        pls.alpha = a;
    }
    if let Some(g) = gamma {
        fas.gamma = g;
    }
    if let Some(e) = pls_epochs {
        pls.epochs = e;
    }
    if let Some(e) = fas_epochs {
        fas.epochs = e;
    }
    if let Some(k) = bn_layers {
        pls.bn_layers = k;
    }
    pls.validate().map_err(config_err)?;
    fas.validate().map_err(config_err)?;
    require_file(model, "source model")?;
    let data = resolve_split(target, Split::Train)?;
    let source = SegModel::load(model)?;
    pls.bn_layers.resolve(source.bn_layer_states().len()).map_err(config_err)?;
    let images = data.images();
    let run = Adapter::new(&source, &images, &pls, &fas, seed).run(variant)?;
    write_run(out, &run)?;
    println!("{} on {}: wrote {}", variant.as_str(), data.manifest.domain, out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    model: &Path,
    prompt: Option<&Path>,
    data: &Path,
    out: &Path,
    variant: &str,
    seed: u64,
    threshold: f64,
    combine: CombineOp,
    space: PromptSpace,
) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(SfdaError::Config(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    if variant.is_empty() || variant.contains([',', '\n']) {
        return Err(SfdaError::Config(format!("invalid variant label {variant:?}")));
    }
    require_file(model, "model")?;
    if let Some(p) = prompt {
        require_file(p, "prompt")?;
    }
    let set = resolve_split(data, Split::Test)?;
    let model = SegModel::load(model)?;
    let prompt = prompt.map(|p| Prompt::load(p, combine, space)).transpose()?;
    let records = evaluate_model(
        &model,
        prompt.as_ref(),
        &set.samples,
        threshold,
        variant,
        &set.manifest.domain,
        seed,
    )?;
    write_metrics_csv(out, &records)?;
    for r in &records {
        println!("class {}: dice {:.4} +- {:.4}", r.class, r.dice_mean, r.dice_std);
    }
    Ok(())
}

fn ablate(config: &Path, out: &Path) -> Result<()> {
    let c = read_config(config)?;
    let report = run_experiment(&c, out)?;
    for r in report.records.iter().filter(|r| r.seed == SeedLabel::All) {
        println!(
            "{:>10} class {}: dice {:.4} +- {:.4}",
            r.variant, r.class, r.dice_mean, r.dice_std
        );
    }
    println!("wrote {}", out.join(METRICS_FILE).display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => gen_data(&config, &out),
        Command::TrainSource {
            data,
            out,
            seed,
            config,
            epochs,
            base_channels,
            depth,
        } => train(&data, &out, seed, config.as_deref(), epochs, base_channels, depth),
        Command::Adapt {
            model,
            target,
            out,
            variant,
            config,
            alpha,
            gamma,
            pls_epochs,
            fas_epochs,
            bn_layers,
            seed,
        } => adapt(
            &model,
            &target,
            &out,
            variant,
            config.as_deref(),
            alpha,
            gamma,
            pls_epochs,
            fas_epochs,
            bn_layers,
            seed,
        ),
        Command::Eval {
            model,
            prompt,
            data,
            out,
            variant,
            seed,
            threshold,
            combine,
            space,
        } => eval(
            &model,
            prompt.as_deref(),
            &data,
            &out,
            &variant,
            seed,
            threshold,
            combine,
            space,
        ),
        Command::Ablate { config, out } => ablate(&config, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 1 } else { 2 })
        }
    }
}
