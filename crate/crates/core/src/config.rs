//! Experiment configuration files.
//!
//! Plain `key = value` lines. Top-level keys come before any section header;
//! sections are `[data]`, `[model]`, `[source]`, `[pls]` and `[fas]`. Blank
//! lines and lines starting with `#` are ignored. Relative paths are resolved
//! against the directory of the file by [`parse_config`].

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::DomainSpec;
use crate::error::{Result, SfdaError};
use crate::experiment::Variant;
use crate::pipeline::{BnLayers, CombineOp, FasConfig, PlsConfig, PromptSpace, SourceConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub root: PathBuf,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
    pub sources: Vec<String>,
    pub target: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: PathBuf::from("data"),
            height: 64,
            width: 64,
            channels: 1,
            train_count: 200,
            test_count: 50,
            seed: 0,
            sources: vec!["source_a".into(), "source_b".into()],
            target: "target".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    /// Source model used by adaptation variants.
    pub model_path: PathBuf,
    /// Architecture and recipe for training the source model.
    pub source: SourceConfig,
    pub pls: PlsConfig,
    pub fas: FasConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            model_path: PathBuf::from("source.bin"),
            source: SourceConfig::default(),
            pls: PlsConfig::default(),
            fas: FasConfig::default(),
            variants: Variant::ALL.to_vec(),
            seeds: vec![0, 1, 2],
        }
    }
}

impl ExperimentConfig {
    /// Cross-field checks that no single line can violate.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: SfdaError| SfdaError::Config(e.to_string());
        self.source.validate().map_err(cfg)?;
        self.pls.validate().map_err(cfg)?;
        self.fas.validate().map_err(cfg)?;
        let m = self.source.model.size_multiple();
        if !self.data.height.is_multiple_of(m) || !self.data.width.is_multiple_of(m) {
            return Err(SfdaError::Config(format!(
                "image size {}x{} must be divisible by {m} for model depth {}",
                self.data.height, self.data.width, self.source.model.depth
            )));
        }
        if self.data.channels != self.source.model.in_channels {
            return Err(SfdaError::Config(format!(
                "data has {} channels but the model expects {}",
                self.data.channels, self.source.model.in_channels
            )));
        }
        if self.data.sources.contains(&self.data.target) {
            return Err(SfdaError::Config(format!(
                "target domain {:?} is also listed as a source",
                self.data.target
            )));
        }
        Ok(())
    }
}

fn line_err(line: usize, message: impl Into<String>) -> SfdaError {
    SfdaError::ConfigLine {
        line,
        message: message.into(),
    }
}

fn parse_list<T>(v: &str, mut item: impl FnMut(&str) -> Option<T>) -> Option<Vec<T>> {
    let items: Option<Vec<T>> = v.split(',').map(|s| item(s.trim())).collect();
    items.filter(|xs| !xs.is_empty())
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    }
}

/// Value parsers that report what they expected.
struct Field<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

impl Field<'_> {
    fn err(&self, expected: &str) -> SfdaError {
        line_err(self.line, format!("{} = {:?}: expected {expected}", self.key, self.value))
    }

    fn count(&self, min: usize) -> Result<usize> {
        self.value
            .parse()
            .ok()
            .filter(|&n| n >= min)
            .ok_or_else(|| self.err(&format!("an integer >= {min}")))
    }

    fn seed(&self) -> Result<u64> {
        self.value.parse().map_err(|_| self.err("a non-negative integer"))
    }

    fn real(&self, ok: impl Fn(f64) -> bool, expected: &str) -> Result<f64> {
        self.value
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite() && ok(*v))
            .ok_or_else(|| self.err(expected))
    }

    fn non_negative(&self) -> Result<f64> {
        self.real(|v| v >= 0.0, "a finite number >= 0")
    }

    fn positive(&self) -> Result<f64> {
        self.real(|v| v > 0.0, "a finite number > 0")
    }

    fn momentum(&self) -> Result<f64> {
        self.real(|v| (0.0..1.0).contains(&v), "a number in [0, 1)")
    }

    fn domain(&self) -> Result<String> {
        DomainSpec::preset(self.value)
            .map(|_| self.value.to_string())
            .map_err(|_| self.err("a domain preset name"))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    Top,
    Data,
    Model,
    Source,
    Pls,
    Fas,
}

impl Section {
    fn parse(name: &str) -> Option<Self> {
        match name {
            "data" => Some(Section::Data),
            "model" => Some(Section::Model),
            "source" => Some(Section::Source),
            "pls" => Some(Section::Pls),
            "fas" => Some(Section::Fas),
            _ => None,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Section::Top => "top level",
            Section::Data => "[data]",
            Section::Model => "[model]",
            Section::Source => "[source]",
            Section::Pls => "[pls]",
            Section::Fas => "[fas]",
        }
    }
}

fn apply(c: &mut ExperimentConfig, section: Section, f: &Field) -> Result<()> {
    match (section, f.key) {
        (Section::Top, "variants") => {
            c.variants = parse_list(f.value, Variant::parse)
                .ok_or_else(|| f.err("a comma-separated list of variant names"))?;
        }
        (Section::Top, "seeds") => {
            c.seeds = parse_list(f.value, |s| s.parse().ok())
                .ok_or_else(|| f.err("a non-empty comma-separated list of seeds"))?;
        }
        (Section::Data, "root") => c.data.root = PathBuf::from(f.value),
        (Section::Data, "height") => c.data.height = f.count(1)?,
        (Section::Data, "width") => c.data.width = f.count(1)?,
        (Section::Data, "channels") => c.data.channels = f.count(1)?,
        (Section::Data, "train") => c.data.train_count = f.count(1)?,
        (Section::Data, "test") => c.data.test_count = f.count(1)?,
        (Section::Data, "seed") => c.data.seed = f.seed()?,
        (Section::Data, "sources") => {
            c.data.sources = parse_list(f.value, |s| DomainSpec::preset(s).ok().map(|_| s.to_string()))
                .ok_or_else(|| f.err("a comma-separated list of domain preset names"))?;
        }
        (Section::Data, "target") => c.data.target = f.domain()?,
        (Section::Model, "path") => c.model_path = PathBuf::from(f.value),
        (Section::Model, "base_channels") => c.source.model.base_channels = f.count(2)?,
        (Section::Model, "depth") => {
            c.source.model.depth = f.count(2)?;
            if c.source.model.depth > 12 {
                return Err(f.err("a depth of at most 12"));
            }
        }
        (Section::Source, "epochs") => c.source.epochs = f.count(1)?,
        (Section::Source, "lr0") => c.source.lr0 = f.positive()?,
        (Section::Source, "batch_size") => c.source.batch_size = f.count(1)?,
        (Section::Source, "momentum") => c.source.momentum = f.momentum()?,
        (Section::Source, "noise_sigma") => c.source.noise_sigma = f.non_negative()?,
        (Section::Source, "max_shift") => c.source.max_shift = f.count(0)?,
        (Section::Source, "seed") => c.source.seed = f.seed()?,
        (Section::Pls, "alpha") => c.pls.alpha = f.non_negative()?,
        (Section::Pls, "bn_layers") => {
            c.pls.bn_layers = BnLayers::parse(f.value).ok_or_else(|| f.err("\"all\" or an integer >= 1"))?;
        }
        (Section::Pls, "epochs") => c.pls.epochs = f.count(1)?,
        (Section::Pls, "lr0") => c.pls.lr0 = f.positive()?,
        (Section::Pls, "batch_size") => c.pls.batch_size = f.count(1)?,
        (Section::Pls, "momentum") => c.pls.momentum = f.momentum()?,
        (Section::Pls, "combine") => {
            c.pls.combine = CombineOp::parse(f.value).ok_or_else(|| f.err("add or mul"))?;
        }
        (Section::Pls, "space") => {
            c.pls.space = PromptSpace::parse(f.value).ok_or_else(|| f.err("spatial or frequency"))?;
        }
        (Section::Fas, "gamma") => c.fas.gamma = f.non_negative()?,
        (Section::Fas, "epochs") => c.fas.epochs = f.count(1)?,
        (Section::Fas, "lr0") => c.fas.lr0 = f.positive()?,
        (Section::Fas, "threshold") => {
            c.fas.threshold = f.real(|v| v > 0.0 && v < 1.0, "a number in (0, 1)")?;
        }
        (Section::Fas, "batch_size") => c.fas.batch_size = f.count(1)?,
        (Section::Fas, "momentum") => c.fas.momentum = f.momentum()?,
        (Section::Fas, "beta_max") => {
            c.fas.beta_max = f.real(|v| v > 0.0 && v <= 0.5, "a number in (0, 0.5]")?;
        }
        (Section::Fas, "augment") => c.fas.augment = parse_bool(f.value).ok_or_else(|| f.err("true or false"))?,
        (section, key) => {
            return Err(line_err(f.line, format!("unknown key {key:?} in {}", section.label())));
        }
    }
    Ok(())
}

/// Parse configuration text. Paths are kept as written.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::default();
    let mut section = Section::Top;
    let mut seen: Vec<(Section, String)> = Vec::new();
    let mut sections_seen = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line_no = no + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| line_err(line_no, format!("malformed section header {line:?}")))?;
            section = Section::parse(name.trim())
                .ok_or_else(|| line_err(line_no, format!("unknown section [{}]", name.trim())))?;
            if sections_seen.contains(&section) {
                return Err(line_err(line_no, format!("section {} appears twice", section.label())));
            }
            sections_seen.push(section);
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| line_err(line_no, format!("expected key = value, found {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(line_err(line_no, format!("expected key = value, found {line:?}")));
        }
        if seen.iter().any(|(s, k)| *s == section && k == key) {
            return Err(line_err(line_no, format!("duplicate key {key:?} in {}", section.label())));
        }
        seen.push((section, key.to_string()));
        apply(&mut config, section, &Field { line: line_no, key, value })?;
    }
    config.validate()?;
    Ok(config)
}

/// Read and parse a configuration file, resolving relative paths against its
/// directory.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| SfdaError::io(path, e))?;
    let mut config = parse_config_str(&text)?;
    let base = path.parent().unwrap_or(Path::new(""));
    for p in [&mut config.data.root, &mut config.model_path] {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(config)
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Canonical text: every key, fixed order, one blank line between sections.
pub fn serialize_config(c: &ExperimentConfig) -> String {
    let mut s = String::new();
    let variants: Vec<&str> = c.variants.iter().map(|v| v.as_str()).collect();
    let _ = writeln!(s, "variants = {}", variants.join(","));
    let _ = writeln!(s, "seeds = {}", join(&c.seeds));
    let d = &c.data;
    let _ = writeln!(s, "\n[data]");
    let _ = writeln!(s, "root = {}", d.root.display());
    let _ = writeln!(s, "height = {}", d.height);
    let _ = writeln!(s, "width = {}", d.width);
    let _ = writeln!(s, "channels = {}", d.channels);
    let _ = writeln!(s, "train = {}", d.train_count);
    let _ = writeln!(s, "test = {}", d.test_count);
    let _ = writeln!(s, "seed = {}", d.seed);
    let _ = writeln!(s, "sources = {}", d.sources.join(","));
    let _ = writeln!(s, "target = {}", d.target);
    let _ = writeln!(s, "\n[model]");
    let _ = writeln!(s, "path = {}", c.model_path.display());
    let _ = writeln!(s, "base_channels = {}", c.source.model.base_channels);
    let _ = writeln!(s, "depth = {}", c.source.model.depth);
    let src = &c.source;
    let _ = writeln!(s, "\n[source]");
    let _ = writeln!(s, "epochs = {}", src.epochs);
    let _ = writeln!(s, "lr0 = {}", src.lr0);
    let _ = writeln!(s, "batch_size = {}", src.batch_size);
    let _ = writeln!(s, "momentum = {}", src.momentum);
    let _ = writeln!(s, "noise_sigma = {}", src.noise_sigma);
    let _ = writeln!(s, "max_shift = {}", src.max_shift);
    let _ = writeln!(s, "seed = {}", src.seed);
    let p = &c.pls;
    let _ = writeln!(s, "\n[pls]");
    let _ = writeln!(s, "alpha = {}", p.alpha);
    let _ = writeln!(s, "bn_layers = {}", p.bn_layers.to_text());
    let _ = writeln!(s, "epochs = {}", p.epochs);
    let _ = writeln!(s, "lr0 = {}", p.lr0);
    let _ = writeln!(s, "batch_size = {}", p.batch_size);
    let _ = writeln!(s, "momentum = {}", p.momentum);
    let _ = writeln!(s, "combine = {}", p.combine.as_str());
    let _ = writeln!(s, "space = {}", p.space.as_str());
    let f = &c.fas;
    let _ = writeln!(s, "\n[fas]");
    let _ = writeln!(s, "gamma = {}", f.gamma);
    let _ = writeln!(s, "epochs = {}", f.epochs);
    let _ = writeln!(s, "lr0 = {}", f.lr0);
    let _ = writeln!(s, "threshold = {}", f.threshold);
    let _ = writeln!(s, "batch_size = {}", f.batch_size);
    let _ = writeln!(s, "momentum = {}", f.momentum);
    let _ = writeln!(s, "beta_max = {}", f.beta_max);
    let _ = writeln!(s, "augment = {}", f.augment);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_of(err: SfdaError) -> usize {
        match err {
            SfdaError::ConfigLine { line, .. } => line,
            other => panic!("expected a line error, got {other}"),
        }
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse_config_str("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.pls.alpha, 0.01);
        assert_eq!(c.fas.gamma, 0.1);
        assert_eq!(c.fas.threshold, 0.5);
        assert_eq!(c.pls.bn_layers, BnLayers::All);
        assert_eq!(c.seeds, vec![0, 1, 2]);
    }

    #[test]
    fn values_are_applied() {
        let text = "seeds = 4, 5\nvariants = full,no_da\n# note\n\n[pls]\nalpha = 0.5\nbn_layers = 3\ncombine = mul\n[fas]\ngamma=0\naugment = false\n[data]\nroot = /tmp/x\nheight = 32\nwidth = 32\n";
        let c = parse_config_str(text).unwrap();
        assert_eq!(c.seeds, vec![4, 5]);
        assert_eq!(c.variants, vec![Variant::Full, Variant::NoDa]);
        assert_eq!(c.pls.alpha, 0.5);
        assert_eq!(c.pls.bn_layers, BnLayers::First(3));
        assert_eq!(c.pls.combine, CombineOp::Mul);
        assert_eq!(c.fas.gamma, 0.0);
        assert!(!c.fas.augment);
        assert_eq!(c.data.root, PathBuf::from("/tmp/x"));
        assert_eq!((c.data.height, c.data.width), (32, 32));
    }

    #[test]
    fn errors_name_the_line() {
        assert_eq!(line_of(parse_config_str("[pls]\nalpha=-1\n").unwrap_err()), 2);
        assert_eq!(line_of(parse_config_str("\n\n[fas]\nthreshold = 1\n").unwrap_err()), 4);
        assert_eq!(line_of(parse_config_str("[pls]\nbogus = 1\n").unwrap_err()), 2);
        assert_eq!(line_of(parse_config_str("alpha = 0.1\n").unwrap_err()), 1);
        assert_eq!(line_of(parse_config_str("[pls]\njust words\n").unwrap_err()), 2);
        assert_eq!(line_of(parse_config_str("[pls]\nalpha =\n").unwrap_err()), 2);
        assert_eq!(line_of(parse_config_str("[nope]\n").unwrap_err()), 1);
        assert_eq!(line_of(parse_config_str("[pls\n").unwrap_err()), 1);
        assert_eq!(line_of(parse_config_str("[fas]\ngamma=1\ngamma=2\n").unwrap_err()), 3);
        assert_eq!(line_of(parse_config_str("[fas]\n[pls]\n[fas]\n").unwrap_err()), 3);
        assert_eq!(line_of(parse_config_str("seeds = 1,x\n").unwrap_err()), 1);
        assert_eq!(line_of(parse_config_str("[data]\ntarget = mars\n").unwrap_err()), 2);
        assert_eq!(line_of(parse_config_str("[pls]\nalpha = nan\n").unwrap_err()), 2);
    }

    #[test]
    fn cross_field_errors() {
        let err = parse_config_str("[data]\nheight = 30\n").unwrap_err();
        assert!(matches!(err, SfdaError::Config(_)), "{err}");
        assert!(err.is_config_error());
        let err = parse_config_str("[data]\nsources = target\n").unwrap_err();
        assert!(matches!(err, SfdaError::Config(_)), "{err}");
    }

    #[test]
    fn canonical_round_trip() {
        let text = "[fas]\n  gamma = 0.25\n[pls]\nalpha=1e-2\nbn_layers = all\n";
        let c = parse_config_str(text).unwrap();
        let canon = serialize_config(&c);
        assert_eq!(parse_config_str(&canon).unwrap(), c);
        assert_eq!(serialize_config(&parse_config_str(&canon).unwrap()), canon);
        assert!(canon.contains("alpha = 0.01\n"));
        assert!(canon.contains("gamma = 0.25\n"));
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.cfg");
        fs::write(&path, "[data]\nroot = d\n[model]\npath = /abs/m.bin\n").unwrap();
        let c = parse_config(&path).unwrap();
        assert_eq!(c.data.root, dir.path().join("d"));
        assert_eq!(c.model_path, PathBuf::from("/abs/m.bin"));
    }
}
