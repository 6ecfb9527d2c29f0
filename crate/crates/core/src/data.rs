//! Synthetic multi-domain segmentation benchmark.
//!
//! Every sample shows two nested ellipses on a textured background. Class 0
//! is the outer region, class 1 the inner one. Domains differ only in a
//! style transform (multiplicative bias field, contrast, brightness, blur,
//! noise) whose effect survives per-image normalization mostly as a
//! low-frequency change.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Result, SfdaError};
use crate::tensor::Tensor;
use crate::tensor_io::{read_tensor, write_tensor};

pub const NUM_CLASSES: usize = 2;

/// Style transform that distinguishes one domain from another.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub bias_amplitude: f64,
    /// Direction of the bias-field ramp, radians.
    pub bias_orientation: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
    /// Gaussian blur sigma in pixels; 0 disables blurring.
    pub blur_radius: usize,
}

impl DomainSpec {
    pub fn identity() -> Self {
        DomainSpec {
            bias_amplitude: 0.0,
            bias_orientation: 0.0,
            brightness: 0.0,
            contrast: 1.0,
            noise_sigma: 0.0,
            blur_radius: 0,
        }
    }

    /// Names accepted by [`DomainSpec::preset`].
    pub const PRESETS: [&'static str; 3] = ["source_a", "source_b", "target"];

    pub fn preset(name: &str) -> Result<Self> {
        let spec = match name {
            "source_a" => DomainSpec {
                bias_amplitude: 0.1,
                bias_orientation: 0.0,
                brightness: 0.0,
                contrast: 1.0,
                noise_sigma: 0.01,
                blur_radius: 0,
            },
            "source_b" => DomainSpec {
                bias_amplitude: 0.1,
                bias_orientation: PI / 2.0,
                brightness: 0.1,
                contrast: 0.9,
                noise_sigma: 0.01,
                blur_radius: 0,
            },
            "target" => DomainSpec {
                bias_amplitude: 0.2,
                bias_orientation: PI / 4.0,
                brightness: -0.1,
                contrast: 0.7,
                noise_sigma: 0.01,
                blur_radius: 0,
            },
            other => {
                return Err(SfdaError::invalid(format!(
                    "unknown domain preset {other:?}; expected one of {:?}",
                    Self::PRESETS
                )))
            }
        };
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.contrast > 0.0, "contrast must be positive, got {}", self.contrast);
        ensure!(
            self.noise_sigma >= 0.0,
            "noise_sigma must be non-negative, got {}",
            self.noise_sigma
        );
        ensure!(
            [self.bias_amplitude, self.bias_orientation, self.brightness, self.contrast, self.noise_sigma]
                .iter()
                .all(|v| v.is_finite()),
            "domain spec values must be finite"
        );
        Ok(())
    }

    /// `1 + bias_amplitude * cos(2 pi (x/W cos theta + y/H sin theta))` at row `y`, column `x`.
    pub fn bias_gain(&self, y: usize, x: usize, h: usize, w: usize) -> f64 {
        let (s, c) = self.bias_orientation.sin_cos();
        let phase = x as f64 / w as f64 * c + y as f64 / h as f64 * s;
        1.0 + self.bias_amplitude * (2.0 * PI * phase).cos()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        ensure!(
            height >= 2 && width >= 2 && channels >= 1,
            "image shape {height}x{width}x{channels} is too small"
        );
        Ok(ImageShape {
            height,
            width,
            channels,
        })
    }
}

/// One labeled image. Tensors are channel-major: image `[C,H,W]`, masks
/// `[NUM_CLASSES,H,W]` with values in {0,1}.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub masks: Tensor,
}

/// Ellipse with center `(cy, cx)`, semi-axes `(ay, ax)` and rotation `theta`.
struct Ellipse {
    cy: f64,
    cx: f64,
    ay: f64,
    ax: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.ax).powi(2) + (v / self.ay).powi(2) <= 1.0
    }
}

struct Scene {
    outer: Ellipse,
    inner: Ellipse,
    background: f64,
    outer_level: f64,
    inner_level: f64,
    /// `(amplitude, fy, fx, phase)` texture gratings.
    gratings: Vec<(f64, f64, f64, f64)>,
    style_seed: u64,
}

fn draw_scene(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Scene {
    let (hf, wf) = (h as f64, w as f64);
    let side = hf.min(wf);
    let outer = Ellipse {
        cy: hf / 2.0 + rng.random_range(-0.12..0.12) * hf,
        cx: wf / 2.0 + rng.random_range(-0.12..0.12) * wf,
        ay: rng.random_range(0.18..0.32) * side,
        ax: rng.random_range(0.18..0.32) * side,
        theta: rng.random_range(0.0..PI),
    };
    let ratio = rng.random_range(0.35..0.6);
    let shift = (1.0 - ratio) * 0.5;
    let inner = Ellipse {
        cy: outer.cy + rng.random_range(-shift..shift) * outer.ay,
        cx: outer.cx + rng.random_range(-shift..shift) * outer.ax,
        ay: outer.ay * ratio,
        ax: outer.ax * ratio,
        theta: outer.theta + rng.random_range(-0.3..0.3),
    };
    let gratings = (0..3)
        .map(|_| {
            (
                rng.random_range(0.01..0.04),
                rng.random_range(2.0..8.0),
                rng.random_range(2.0..8.0),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    Scene {
        outer,
        inner,
        background: rng.random_range(0.3..0.5),
        outer_level: rng.random_range(0.2..0.35),
        inner_level: rng.random_range(0.2..0.35),
        gratings,
        style_seed: rng.random(),
    }
}

fn render(scene: &Scene, shape: ImageShape) -> (Tensor, Tensor) {
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    let mut masks = Tensor::zeros(&[NUM_CLASSES, h, w]);
    let mut image = Tensor::zeros(&[c, h, w]);
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
            let in_outer = scene.outer.contains(yf, xf);
            // The inner region is clipped to the outer one so nesting holds
            // whatever the drawn geometry.
            let in_inner = in_outer && scene.inner.contains(yf, xf);
            let i = y * w + x;
            masks.data_mut()[i] = f64::from(u8::from(in_outer));
            masks.data_mut()[plane + i] = f64::from(u8::from(in_inner));
            let texture: f64 = scene
                .gratings
                .iter()
                .map(|&(a, fy, fx, ph)| a * (2.0 * PI * (fy * yf / h as f64 + fx * xf / w as f64) + ph).sin())
                .sum();
            let mut v = scene.background + texture;
            if in_outer {
                v += scene.outer_level;
            }
            if in_inner {
                v += scene.inner_level;
            }
            for ch in 0..c {
                // Later channels are dimmer copies so multi-channel data is not degenerate.
                image.data_mut()[ch * plane + i] = v * (1.0 - 0.15 * ch as f64);
            }
        }
    }
    (image, masks)
}

/// Generate `n` styled and normalized samples of one domain.
pub fn gen_domain(spec: &DomainSpec, n: usize, shape: ImageShape, seed: u64) -> Result<Vec<Sample>> {
    ensure!(n >= 1, "gen_domain needs at least one sample");
    spec.validate()?;
    let shape = ImageShape::new(shape.height, shape.width, shape.channels)?;
    let samples = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let scene = draw_scene(&mut rng, shape.height, shape.width);
            let (image, masks) = render(&scene, shape);
            let image = apply_domain_style(&image, spec, scene.style_seed)?;
            Ok(Sample { image, masks })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut samples = normalize_dataset(samples)?;
    // Stored on disk as f32; keep the in-memory copy identical to the file.
    samples.iter_mut().for_each(|s| s.image.round_to_f32());
    Ok(samples)
}

/// Apply the domain style to an image `[C,H,W]`:
/// `contrast * image * bias_field + brightness`, then blur, then noise.
pub fn apply_domain_style(image: &Tensor, spec: &DomainSpec, seed: u64) -> Result<Tensor> {
    ensure!(image.rank() == 3, "styling expects [C,H,W], got {:?}", image.shape());
    ensure!(image.is_finite(), "styling input is not finite");
    spec.validate()?;
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut out = image.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let (y, x) = ((i / w) % h, i % w);
        *v = spec.contrast * (*v * spec.bias_gain(y, x, h, w)) + spec.brightness;
    }
    if spec.blur_radius > 0 {
        for ch in 0..c {
            let plane = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
            gaussian_blur(plane, h, w, spec.blur_radius as f64);
        }
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        for v in out.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(out)
}

/// Reflect an out-of-range index back into `0..n` (edge sample not repeated).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable Gaussian blur with half-width `2 sigma` and reflected borders.
fn gaussian_blur(plane: &mut [f64], h: usize, w: usize, sigma: f64) {
    let half = (2.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-half..=half)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / total).collect();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * plane[y * w + reflect(x as isize + k as isize - half, w)])
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            plane[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * tmp[reflect(y as isize + k as isize - half, h) * w + x])
                .sum();
        }
    }
}

/// Standardize every channel of every image to zero mean and unit
/// (population) standard deviation. Masks are untouched.
pub fn normalize_dataset(mut samples: Vec<Sample>) -> Result<Vec<Sample>> {
    ensure!(!samples.is_empty(), "cannot normalize an empty dataset");
    for (idx, sample) in samples.iter_mut().enumerate() {
        ensure!(
            sample.image.rank() == 3,
            "sample {idx}: image must be [C,H,W], got {:?}",
            sample.image.shape()
        );
        let plane = sample.image.shape()[1] * sample.image.shape()[2];
        for (ch, values) in sample.image.data_mut().chunks_mut(plane).enumerate() {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            ensure!(
                std > 1e-12 * mean.abs().max(1.0),
                "sample {idx}: channel {ch} has zero variance"
            );
            values.iter_mut().for_each(|v| *v = (*v - mean) / std);
        }
    }
    Ok(samples)
}

/// `[C,H,W]` to `[H,W,C]`.
pub fn chw_to_hwc(t: &Tensor) -> Result<Tensor> {
    ensure!(t.rank() == 3, "expected [C,H,W], got {:?}", t.shape());
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let d = t.data();
    Ok(Tensor::from_fn(&[h, w, c], |i| {
        let (p, ch) = (i / c, i % c);
        d[ch * h * w + p]
    }))
}

/// `[H,W,C]` to `[C,H,W]`.
pub fn hwc_to_chw(t: &Tensor) -> Result<Tensor> {
    ensure!(t.rank() == 3, "expected [H,W,C], got {:?}", t.shape());
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let d = t.data();
    Ok(Tensor::from_fn(&[c, h, w], |i| {
        let (ch, p) = (i / (h * w), i % (h * w));
        d[p * c + ch]
    }))
}

/// Stable 64-bit seed for a named sub-stream of `base`.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(base.to_le_bytes())
        .chain_update(tag.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DomainRole {
    Source,
    Target,
}

impl DomainRole {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainRole::Source => "source",
            DomainRole::Target => "target",
        }
    }
}

/// Description of one `<root>/<domain>/<split>` directory.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub domain: String,
    pub split: Split,
    pub role: DomainRole,
    pub count: usize,
    pub shape: ImageShape,
    pub classes: usize,
    pub seed: u64,
    /// `(relative path, sha256 hex)` for every image and mask file.
    pub checksums: Vec<(String, String)>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "domain={}", self.domain);
        let _ = writeln!(s, "split={}", self.split.as_str());
        let _ = writeln!(s, "role={}", self.role.as_str());
        let _ = writeln!(s, "count={}", self.count);
        let _ = writeln!(s, "height={}", self.shape.height);
        let _ = writeln!(s, "width={}", self.shape.width);
        let _ = writeln!(s, "channels={}", self.shape.channels);
        let _ = writeln!(s, "classes={}", self.classes);
        let _ = writeln!(s, "seed={}", self.seed);
        for (file, sum) in &self.checksums {
            let _ = writeln!(s, "sha256.{file}={sum}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = std::collections::BTreeMap::new();
        let mut checksums = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| SfdaError::ConfigLine {
                line: no + 1,
                message: format!("manifest line is not key=value: {line:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if let Some(file) = k.strip_prefix("sha256.") {
                checksums.push((file.to_string(), v.to_string()));
            } else if fields.insert(k.to_string(), v.to_string()).is_some() {
                return Err(SfdaError::ConfigLine {
                    line: no + 1,
                    message: format!("duplicate manifest key {k:?}"),
                });
            }
        }
        let get = |k: &str| {
            fields
                .get(k)
                .ok_or_else(|| SfdaError::Config(format!("manifest is missing {k:?}")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| SfdaError::Config(format!("manifest {k:?} is not a non-negative integer")))
        };
        let split = Split::parse(get("split")?)
            .ok_or_else(|| SfdaError::Config(format!("manifest split {:?} is unknown", get("split").unwrap())))?;
        let role = match get("role")?.as_str() {
            "source" => DomainRole::Source,
            "target" => DomainRole::Target,
            other => return Err(SfdaError::Config(format!("manifest role {other:?} is unknown"))),
        };
        Ok(DatasetManifest {
            domain: get("domain")?.clone(),
            split,
            role,
            count: num("count")? as usize,
            shape: ImageShape::new(num("height")? as usize, num("width")? as usize, num("channels")? as usize)
                .map_err(|e| SfdaError::Config(format!("manifest shape: {e}")))?,
            classes: num("classes")? as usize,
            seed: num("seed")?,
            checksums,
        })
    }
}

/// A loaded `<root>/<domain>/<split>` directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn images(&self) -> Vec<Tensor> {
        self.samples.iter().map(|s| s.image.clone()).collect()
    }
}

pub fn split_dir(root: &Path, domain: &str, split: Split) -> PathBuf {
    root.join(domain).join(split.as_str())
}

fn file_name(i: usize) -> String {
    format!("{i:04}.tns")
}

/// Write samples to `dir` (`images/`, `masks/`, manifest). Images and masks
/// are stored channel-last.
pub fn write_split(
    dir: &Path,
    domain: &str,
    split: Split,
    role: DomainRole,
    seed: u64,
    samples: &[Sample],
) -> Result<DatasetManifest> {
    ensure!(!samples.is_empty(), "refusing to write an empty split");
    let (c, h, w) = {
        let s = samples[0].image.shape();
        (s[0], s[1], s[2])
    };
    let mut checksums = Vec::with_capacity(2 * samples.len());
    for sub in ["images", "masks"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| SfdaError::io(dir.join(sub), e))?;
    }
    for (i, sample) in samples.iter().enumerate() {
        ensure!(
            sample.image.shape() == [c, h, w] && sample.masks.shape() == [NUM_CLASSES, h, w],
            "sample {i} does not match the split's shape"
        );
        for (sub, t) in [("images", &sample.image), ("masks", &sample.masks)] {
            let rel = format!("{sub}/{}", file_name(i));
            let path = dir.join(&rel);
            write_tensor(&path, &chw_to_hwc(t)?)?;
            let bytes = fs::read(&path).map_err(|e| SfdaError::io(&path, e))?;
            checksums.push((rel, hex(&Sha256::digest(&bytes))));
        }
    }
    let manifest = DatasetManifest {
        domain: domain.to_string(),
        split,
        role,
        count: samples.len(),
        shape: ImageShape::new(h, w, c)?,
        classes: NUM_CLASSES,
        seed,
        checksums,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(|e| SfdaError::io(&path, e))?;
    Ok(manifest)
}

/// Load a split directory, verifying counts, shapes and checksums.
pub fn read_split(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| SfdaError::io(&path, e))?;
    let manifest = DatasetManifest::parse(&text)?;
    let mut samples = Vec::with_capacity(manifest.count);
    let expected: std::collections::HashMap<&str, &str> = manifest
        .checksums
        .iter()
        .map(|(f, s)| (f.as_str(), s.as_str()))
        .collect();
    let shape = manifest.shape;
    for i in 0..manifest.count {
        let load = |sub: &str, c: usize| -> Result<Tensor> {
            let rel = format!("{sub}/{}", file_name(i));
            let path = dir.join(&rel);
            let bytes = fs::read(&path).map_err(|e| SfdaError::io(&path, e))?;
            if let Some(sum) = expected.get(rel.as_str()) {
                ensure!(
                    hex(&Sha256::digest(&bytes)) == *sum,
                    "{}: checksum mismatch",
                    path.display()
                );
            }
            let t = read_tensor(&path)?;
            ensure!(
                t.shape() == [shape.height, shape.width, c],
                "{}: shape {:?} does not match manifest",
                path.display(),
                t.shape()
            );
            hwc_to_chw(&t)
        };
        let image = load("images", shape.channels)?;
        let masks = load("masks", manifest.classes)?;
        samples.push(Sample { image, masks });
    }
    let extra = fs::read_dir(dir.join("images"))
        .map_err(|e| SfdaError::io(dir.join("images"), e))?
        .count();
    ensure!(
        extra == manifest.count,
        "{}: manifest lists {} samples but {} image files exist",
        dir.display(),
        manifest.count,
        extra
    );
    Ok(Dataset { manifest, samples })
}

/// Domains found under `root`, in sorted order, that have a `split` directory.
pub fn list_domains(root: &Path, split: Split) -> Result<Vec<(String, DatasetManifest)>> {
    let entries = fs::read_dir(root).map_err(|e| SfdaError::io(root, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| SfdaError::io(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let manifest_path = split_dir(root, &name, split).join(MANIFEST_FILE);
        if manifest_path.is_file() {
            let text = fs::read_to_string(&manifest_path).map_err(|e| SfdaError::io(&manifest_path, e))?;
            out.push((name, DatasetManifest::parse(&text)?));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}
