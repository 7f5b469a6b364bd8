//! Datasets, checkpoints, run configuration, metrics files, rank reports and
//! the convolution benchmark.
//!
//! # Raw-binary dataset
//!
//! ```text
//! bytes 0..4    magic "CSTD"
//! bytes 4..24   five u32 little-endian: count, channels, height, width, classes
//! then          count·channels·height·width image bytes (N, C, H, W order), pixel = byte / 255
//! then          count label bytes
//! ```
//!
//! # Checkpoint
//!
//! A UTF-8 manifest terminated by a line `end`, followed immediately by every
//! array as little-endian `f64`, in manifest order:
//!
//! ```text
//! CSTAR-CKPT 1
//! input <C> <H> <W>
//! classes <N>
//! compressible <name>,<name>,...      ("-" when empty)
//! layer <name> <kind> [key=value ...] arrays=<array>:<d0>x<d1>...,...
//! ...
//! end
//! ```
//!
//! Kinds and their keys: `conv_dense stride padding` (arrays weight, bias);
//! `conv_factorized stride padding r1 r2` (u1, u2, g, bias); `linear` (weight,
//! bias); `batchnorm momentum eps` (gamma, beta, running_mean, running_var);
//! `maxpool window stride`; `relu`, `avgpool_global`, `flatten`.
//!
//! # Metrics CSV
//!
//! Header [`METRICS_HEADER`]. Per-layer columns are `;`-joined; ranks are
//! written `r1xr2`; a missing evaluation is an empty field.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attack::AdvConfig;
use crate::conv;
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{Batch, BatchNorm, ConvDense, ConvFactorized, Layer, Linear, MiniConvNetConfig, Model, NamedLayer};
use crate::rank_select::{select_uniform, LayerRanks, RankPlan, RankScheme, DEFAULT_MIN_RANK};
use crate::tensor::Tensor;
use crate::train::{median, CstarConfig, DualUpdate, TrainReport, TrainRow};
use crate::tucker::{dense_param_count, factorized_forward, Tucker2Factors};

// ---------------------------------------------------------------- datasets

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[C, H, W]`.
    pub image_shape: [usize; 3],
    /// `N·C·H·W` pixels in `[0, 1]`, sample-major.
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(image_shape: [usize; 3], pixels: Vec<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if image_shape.contains(&0) {
            return shape_err(format!("invalid image shape {:?}", image_shape));
        }
        let per: usize = image_shape.iter().product();
        if pixels.len() != per * labels.len() {
            return shape_err(format!("{} pixels for {} images of shape {:?}", pixels.len(), labels.len(), image_shape));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return invalid(format!("label {bad} outside 0..{num_classes}"));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return invalid("dataset pixels must lie in [0, 1]");
        }
        Ok(Self { image_shape, pixels, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    /// Images `idx` as an `n × C × H × W` batch; `idx` must be non-empty.
    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        let d = self.subset(idx)?;
        let [c, h, w] = self.image_shape;
        Batch::new(Tensor::new(vec![idx.len(), c, h, w], d.pixels)?, d.labels)
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let per = self.image_len();
        let mut pixels = Vec::with_capacity(idx.len() * per);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return invalid(format!("sample index {i} outside dataset of {}", self.len()));
            }
            pixels.extend_from_slice(&self.pixels[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok(Dataset { image_shape: self.image_shape, pixels, labels, num_classes: self.num_classes })
    }

    /// First `len − n_test` samples for training, the rest for testing.
    pub fn split(&self, n_test: usize) -> Result<(Dataset, Dataset)> {
        if n_test > self.len() {
            return invalid(format!("test split of {n_test} from {} samples", self.len()));
        }
        let cut = self.len() - n_test;
        let a: Vec<usize> = (0..cut).collect();
        let b: Vec<usize> = (cut..self.len()).collect();
        Ok((self.subset(&a)?, self.subset(&b)?))
    }
}

/// Class-conditioned Gaussian images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub channels: usize,
    pub image_size: usize,
    pub samples: usize,
    /// L2 distance of every class mean from the all-0.5 image.
    pub radius: f64,
    /// Per-pixel noise standard deviation.
    pub noise: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self { classes: 10, channels: 3, image_size: 8, samples: 2000, radius: 2.0, noise: 0.15, seed: 0 }
    }
}

/// Class means on a sphere around the all-0.5 image plus per-pixel Gaussian
/// noise, clamped to `[0, 1]`. Labels cycle through the classes in order.
pub fn synthetic_blobs(classes: usize, channels: usize, image_size: usize, samples: usize, noise: f64, seed: u64) -> Result<Dataset> {
    blobs(&BlobSpec { classes, channels, image_size, samples, noise, seed, ..BlobSpec::default() })
}

pub fn blobs(spec: &BlobSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.channels == 0 || spec.image_size == 0 {
        return invalid("blob dataset needs positive classes, channels and image size");
    }
    if !(spec.noise >= 0.0 && spec.radius >= 0.0) {
        return invalid("blob radius and noise must be non-negative");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.channels * spec.image_size * spec.image_size;
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x: &f64| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| 0.5 + spec.radius * x / n).collect()
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut data = Vec::with_capacity(spec.samples * d);
    let mut labels = Vec::with_capacity(spec.samples);
    for s in 0..spec.samples {
        let y = s % spec.classes;
        labels.push(y);
        data.extend(means[y].iter().map(|m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0)));
    }
    Dataset::new([spec.channels, spec.image_size, spec.image_size], data, labels, spec.classes)
}

const DATASET_MAGIC: &[u8; 4] = b"CSTD";

pub fn read_raw_dataset(path: &Path) -> Result<Dataset> {
    parse_raw_dataset(&fs::read(path)?)
}

pub fn parse_raw_dataset(bytes: &[u8]) -> Result<Dataset> {
    let fmt = |offset: usize, msg: String| Error::Format { offset: offset as u64, msg };
    if bytes.len() < 24 {
        return Err(fmt(bytes.len(), "dataset header truncated".into()));
    }
    if &bytes[..4] != DATASET_MAGIC {
        return Err(fmt(0, "bad dataset magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (n, c, h, w, classes) = (word(0), word(1), word(2), word(3), word(4));
    let per = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| fmt(8, "image dimensions overflow".into()))?;
    let need = n.checked_mul(per + 1).and_then(|v| v.checked_add(24)).ok_or_else(|| fmt(4, "sample count overflows".into()))?;
    if bytes.len() != need {
        return Err(fmt(bytes.len().min(need), format!("dataset body is {} bytes, header implies {}", bytes.len() - 24, need - 24)));
    }
    let img_end = 24 + n * per;
    let images: Vec<f64> = bytes[24..img_end].iter().map(|&b| b as f64 / 255.0).collect();
    let mut labels = Vec::with_capacity(n);
    for (j, &b) in bytes[img_end..].iter().enumerate() {
        if b as usize >= classes {
            return Err(fmt(img_end + j, format!("label {b} outside 0..{classes}")));
        }
        labels.push(b as usize);
    }
    Dataset::new([c, h, w], images, labels, classes)
}

/// Quantizes pixels to bytes (`round(255·x)`).
pub fn write_raw_dataset(data: &Dataset, path: &Path) -> Result<()> {
    if data.num_classes > 256 {
        return invalid("raw-binary labels are single bytes");
    }
    let [c, h, w] = data.image_shape;
    let mut out = Vec::with_capacity(24 + data.pixels.len() + data.len());
    out.extend_from_slice(DATASET_MAGIC);
    for v in [data.len(), c, h, w, data.num_classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend(data.pixels.iter().map(|&x| (x * 255.0).round() as u8));
    out.extend(data.labels.iter().map(|&y| y as u8));
    fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------- checkpoints

const CKPT_MAGIC: &str = "CSTAR-CKPT 1";

fn shape_str(s: &[usize]) -> String {
    s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn layer_arrays(layer: &Layer) -> Vec<(&'static str, &Tensor)> {
    match layer {
        Layer::ConvDense(c) => vec![("weight", &c.weight), ("bias", &c.bias)],
        Layer::ConvFactorized(c) => vec![("u1", &c.factors.u1), ("u2", &c.factors.u2), ("g", &c.factors.g), ("bias", &c.bias)],
        Layer::Linear(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
        Layer::BatchNorm(b) => vec![("gamma", &b.gamma), ("beta", &b.beta), ("running_mean", &b.running_mean), ("running_var", &b.running_var)],
        _ => vec![],
    }
}

pub fn checkpoint_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut m = String::new();
    let [c, h, w] = model.input_shape;
    writeln!(m, "{CKPT_MAGIC}").unwrap();
    writeln!(m, "input {c} {h} {w}").unwrap();
    writeln!(m, "classes {}", model.num_classes).unwrap();
    let comp = if model.compressible.is_empty() { "-".to_string() } else { model.compressible.join(",") };
    writeln!(m, "compressible {comp}").unwrap();
    let mut body = Vec::new();
    for nl in &model.layers {
        if nl.name.is_empty() || nl.name.contains(|ch: char| ch.is_whitespace() || ch == ',') {
            return invalid(format!("layer name {:?} cannot be stored in a checkpoint", nl.name));
        }
        let attrs = match &nl.layer {
            Layer::ConvDense(c) => format!(" stride={} padding={}", c.stride, c.padding),
            Layer::ConvFactorized(c) => {
                let (r1, r2) = c.factors.ranks();
                format!(" stride={} padding={} r1={r1} r2={r2}", c.stride, c.padding)
            }
            Layer::BatchNorm(b) => format!(" momentum={:?} eps={:?}", b.momentum, b.eps),
            Layer::MaxPool { window, stride } => format!(" window={window} stride={stride}"),
            _ => String::new(),
        };
        let arrays = layer_arrays(&nl.layer);
        let arr = if arrays.is_empty() {
            String::new()
        } else {
            format!(" arrays={}", arrays.iter().map(|(n, t)| format!("{n}:{}", shape_str(t.shape()))).collect::<Vec<_>>().join(","))
        };
        writeln!(m, "layer {} {}{attrs}{arr}", nl.name, nl.layer.kind()).unwrap();
        for (_, t) in arrays {
            for v in t.data() {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    writeln!(m, "end").unwrap();
    let mut out = m.into_bytes();
    out.extend(body);
    Ok(out)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(model)?;
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    parse_checkpoint(&fs::read(path)?)
}

struct ManifestLayer {
    offset: usize,
    name: String,
    kind: String,
    attrs: BTreeMap<String, String>,
    arrays: Vec<(String, Vec<usize>)>,
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Model> {
    let fmt = |offset: usize, msg: String| Error::Format { offset: offset as u64, msg };
    let mut pos = 0;
    let mut lines: Vec<(usize, String)> = Vec::new();
    loop {
        let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            return Err(fmt(pos, "manifest has no `end` line".into()));
        };
        let line = std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| fmt(pos, "manifest is not UTF-8".into()))?;
        let start = pos;
        pos += nl + 1;
        if line == "end" {
            break;
        }
        lines.push((start, line.to_string()));
    }
    let body_start = pos;
    let mut it = lines.into_iter();
    let mut next = |what: &str| it.next().ok_or_else(|| fmt(body_start, format!("manifest is missing the {what} line")));
    let (o, magic) = next("magic")?;
    if magic != CKPT_MAGIC {
        return Err(fmt(o, format!("bad checkpoint magic {magic:?}")));
    }
    let (o, input) = next("input")?;
    let dims: Vec<usize> = match input.strip_prefix("input ") {
        Some(rest) => rest.split(' ').map(|t| t.parse()).collect::<std::result::Result<_, _>>().map_err(|_| fmt(o, "bad input line".into()))?,
        None => return Err(fmt(o, "expected `input C H W`".into())),
    };
    if dims.len() != 3 {
        return Err(fmt(o, "expected `input C H W`".into()));
    }
    let (o, classes) = next("classes")?;
    let classes: usize = classes
        .strip_prefix("classes ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| fmt(o, "expected `classes N`".into()))?;
    let (o, comp) = next("compressible")?;
    let comp = comp.strip_prefix("compressible ").ok_or_else(|| fmt(o, "expected `compressible ...`".into()))?;
    let compressible: Vec<String> = if comp == "-" { vec![] } else { comp.split(',').map(str::to_string).collect() };

    let mut manifest = Vec::new();
    for (offset, line) in it {
        let mut tok = line.split(' ');
        if tok.next() != Some("layer") {
            return Err(fmt(offset, format!("expected a layer line, got {line:?}")));
        }
        let name = tok.next().ok_or_else(|| fmt(offset, "layer line without a name".into()))?.to_string();
        let kind = tok.next().ok_or_else(|| fmt(offset, "layer line without a kind".into()))?.to_string();
        let mut attrs = BTreeMap::new();
        let mut arrays = Vec::new();
        for t in tok {
            let (k, v) = t.split_once('=').ok_or_else(|| fmt(offset, format!("bad layer attribute {t:?}")))?;
            if k == "arrays" {
                for a in v.split(',') {
                    let (an, sh) = a.split_once(':').ok_or_else(|| fmt(offset, format!("bad array spec {a:?}")))?;
                    let shape: Vec<usize> = sh
                        .split('x')
                        .map(|d| d.parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| fmt(offset, format!("bad array shape {sh:?}")))?;
                    arrays.push((an.to_string(), shape));
                }
            } else {
                attrs.insert(k.to_string(), v.to_string());
            }
        }
        manifest.push(ManifestLayer { offset, name, kind, attrs, arrays });
    }

    let body = &bytes[body_start..];
    let expected: usize = manifest.iter().flat_map(|l| &l.arrays).map(|(_, s)| s.iter().product::<usize>() * 8).sum();
    if body.len() != expected {
        return Err(fmt(body_start + body.len().min(expected), format!("checkpoint body has {} bytes, manifest needs {expected}", body.len())));
    }
    let mut cursor = 0;
    let mut layers = Vec::with_capacity(manifest.len());
    for ml in manifest {
        let mut arrays: BTreeMap<String, Tensor> = BTreeMap::new();
        for (an, shape) in &ml.arrays {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = body[cursor..cursor + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            cursor += 8 * n;
            arrays.insert(an.clone(), Tensor::new(shape.clone(), data).map_err(|e| fmt(ml.offset, e.to_string()))?);
        }
        let layer = build_layer(&ml, arrays).map_err(|e| match e {
            Error::Format { .. } => e,
            other => fmt(ml.offset, format!("layer {:?}: {other}", ml.name)),
        })?;
        layers.push(NamedLayer { name: ml.name, layer });
    }
    Model::new(layers, [dims[0], dims[1], dims[2]], classes, compressible).map_err(|e| fmt(0, e.to_string()))
}

fn build_layer(ml: &ManifestLayer, mut arrays: BTreeMap<String, Tensor>) -> Result<Layer> {
    let num = |k: &str| -> Result<usize> {
        ml.attrs
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::InvalidArgument(format!("missing or bad {k}")))
    };
    let float = |k: &str| -> Result<f64> {
        ml.attrs
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::InvalidArgument(format!("missing or bad {k}")))
    };
    let mut take = |k: &str| arrays.remove(k).ok_or_else(|| Error::InvalidArgument(format!("missing array {k}")));
    Ok(match ml.kind.as_str() {
        "conv_dense" => Layer::ConvDense(ConvDense { weight: take("weight")?, bias: take("bias")?, stride: num("stride")?, padding: num("padding")? }),
        "conv_factorized" => {
            let factors = Tucker2Factors::new(take("u1")?, take("u2")?, take("g")?)?;
            if factors.ranks() != (num("r1")?, num("r2")?) {
                return invalid("stored ranks disagree with factor shapes");
            }
            Layer::ConvFactorized(ConvFactorized { factors, bias: take("bias")?, stride: num("stride")?, padding: num("padding")? })
        }
        "linear" => Layer::Linear(Linear { weight: take("weight")?, bias: take("bias")? }),
        "batchnorm" => Layer::BatchNorm(BatchNorm {
            gamma: take("gamma")?,
            beta: take("beta")?,
            running_mean: take("running_mean")?,
            running_var: take("running_var")?,
            momentum: float("momentum")?,
            eps: float("eps")?,
        }),
        "maxpool" => Layer::MaxPool { window: num("window")?, stride: num("stride")? },
        "relu" => Layer::ReLU,
        "avgpool_global" => Layer::AvgPoolGlobal,
        "flatten" => Layer::Flatten,
        other => return invalid(format!("unknown layer kind {other:?}")),
    })
}

// ---------------------------------------------------------------- run configuration

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Synthetic(BlobSpec),
    Raw(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSource,
    pub test_samples: usize,
    pub model: MiniConvNetConfig,
    pub cstar: CstarConfig,
    pub pretrain_epochs: usize,
    pub output_dir: PathBuf,
}

/// Every key accepted in a run configuration file.
pub const CONFIG_KEYS: &[&str] = &[
    "seed",
    "dataset",
    "classes",
    "channels",
    "image_size",
    "samples",
    "blob_radius",
    "blob_noise",
    "test_samples",
    "stem_width",
    "block_widths",
    "kernel",
    "batch_norm",
    "rho",
    "rho_warmup",
    "lr",
    "momentum",
    "weight_decay",
    "batch_size",
    "pretrain_epochs",
    "t1",
    "t2",
    "target_ratio",
    "refresh_period",
    "scheme",
    "min_rank",
    "dual_update",
    "delta",
    "step",
    "train_iters",
    "eval_iters",
    "train_random_init",
    "eval_random_init",
    "eval_every",
    "output_dir",
];

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// `key = value` lines; `#` starts a comment. `seed` and `dataset` are
    /// required, everything else has a default. `dataset` is `synthetic` or a
    /// path to a raw-binary file. Real-valued keys accept `a/b`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", ln + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !CONFIG_KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key {k:?}", ln + 1)));
            }
            if kv.insert(k.to_string(), (ln + 1, v.to_string())).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", ln + 1)));
            }
        }
        let get = |k: &str| kv.get(k).map(|(l, v)| (*l, v.as_str()));
        fn bad<T>(line: usize, k: &str, v: &str) -> Result<T> {
            Err(Error::Config(format!("line {line}: bad value {v:?} for {k}")))
        }
        let uint = |k: &str, d: usize| -> Result<usize> {
            match get(k) {
                None => Ok(d),
                Some((l, v)) => v.parse().or_else(|_| bad(l, k, v)),
            }
        };
        let real = |k: &str, d: f64| -> Result<f64> {
            match get(k) {
                None => Ok(d),
                Some((l, v)) => parse_real(v).map_or_else(|| bad(l, k, v), Ok),
            }
        };
        let flag = |k: &str, d: bool| -> Result<bool> {
            match get(k) {
                None => Ok(d),
                Some((_, "true")) => Ok(true),
                Some((_, "false")) => Ok(false),
                Some((l, v)) => bad(l, k, v),
            }
        };

        let seed: u64 = match get("seed") {
            None => return Err(Error::Config("missing required key \"seed\"".into())),
            Some((l, v)) => v.parse().or_else(|_| bad(l, "seed", v))?,
        };
        let bd = BlobSpec::default();
        let md = MiniConvNetConfig::default();
        let cd = CstarConfig::default();
        let dataset = match get("dataset") {
            None => return Err(Error::Config("missing required key \"dataset\"".into())),
            Some((_, "synthetic")) => DatasetSource::Synthetic(BlobSpec {
                classes: uint("classes", bd.classes)?,
                channels: uint("channels", bd.channels)?,
                image_size: uint("image_size", bd.image_size)?,
                samples: uint("samples", bd.samples)?,
                radius: real("blob_radius", bd.radius)?,
                noise: real("blob_noise", bd.noise)?,
                seed,
            }),
            Some((_, path)) => DatasetSource::Raw(PathBuf::from(path)),
        };
        let block_widths = match get("block_widths") {
            None => md.block_widths.clone(),
            Some((l, v)) => v
                .split(',')
                .map(|t| t.trim().parse())
                .collect::<std::result::Result<Vec<usize>, _>>()
                .or_else(|_| bad(l, "block_widths", v))?,
        };
        let (classes, channels, image_size) = match &dataset {
            DatasetSource::Synthetic(b) => (b.classes, b.channels, b.image_size),
            DatasetSource::Raw(_) => (uint("classes", md.num_classes)?, uint("channels", md.in_channels)?, uint("image_size", md.image_size)?),
        };
        let model = MiniConvNetConfig {
            in_channels: channels,
            image_size,
            num_classes: classes,
            stem_width: uint("stem_width", md.stem_width)?,
            block_widths,
            kernel: uint("kernel", md.kernel)?,
            batch_norm: flag("batch_norm", md.batch_norm)?,
        };
        let scheme = match get("scheme") {
            None => cd.scheme,
            Some((l, v)) => RankScheme::parse(v).map_err(|e| Error::Config(format!("line {l}: {e}")))?,
        };
        let dual_update = match get("dual_update") {
            None => cd.dual_update,
            Some((_, "epoch")) => DualUpdate::PerEpoch,
            Some((_, "batch")) => DualUpdate::PerBatch,
            Some((l, v)) => return bad(l, "dual_update", v),
        };
        let delta = real("delta", cd.adv_train.delta)?;
        let step = real("step", cd.adv_train.step)?;
        let adv_train = AdvConfig::new(delta, step, uint("train_iters", cd.adv_train.iters)?, flag("train_random_init", true)?)
            .map_err(|e| Error::Config(e.to_string()))?;
        let adv_eval = AdvConfig::new(delta, step, uint("eval_iters", cd.adv_eval.iters)?, flag("eval_random_init", false)?)
            .map_err(|e| Error::Config(e.to_string()))?;
        let cstar = CstarConfig {
            rho: real("rho", cd.rho)?,
            rho_warmup: flag("rho_warmup", cd.rho_warmup)?,
            lr: real("lr", cd.lr)?,
            momentum: real("momentum", cd.momentum)?,
            weight_decay: real("weight_decay", cd.weight_decay)?,
            batch_size: uint("batch_size", cd.batch_size)?,
            t1: uint("t1", cd.t1)?,
            t2: uint("t2", cd.t2)?,
            target_ratio: real("target_ratio", cd.target_ratio)?,
            refresh_period: uint("refresh_period", cd.refresh_period)?,
            scheme,
            min_rank: uint("min_rank", DEFAULT_MIN_RANK)?,
            dual_update,
            adv_train,
            adv_eval,
            eval_every: uint("eval_every", cd.eval_every)?,
            seed,
        };
        cstar.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self {
            seed,
            dataset,
            test_samples: uint("test_samples", 500)?,
            model,
            cstar,
            pretrain_epochs: uint("pretrain_epochs", 10)?,
            output_dir: get("output_dir").map_or_else(|| PathBuf::from("runs"), |(_, v)| PathBuf::from(v)),
        })
    }

    /// Train/test datasets described by this configuration.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let all = match &self.dataset {
            DatasetSource::Synthetic(spec) => {
                blobs(&BlobSpec { samples: spec.samples + self.test_samples, ..spec.clone() })?
            }
            DatasetSource::Raw(p) => read_raw_dataset(p)?,
        };
        if all.image_shape != [self.model.in_channels, self.model.image_size, self.model.image_size] || all.num_classes != self.model.num_classes {
            return Err(Error::Config(format!(
                "dataset images {:?} with {} classes do not match the model configuration",
                all.image_shape,
                all.num_classes
            )));
        }
        all.split(self.test_samples.min(all.len()))
    }
}

fn parse_real(v: &str) -> Option<f64> {
    let x = match v.split_once('/') {
        Some((a, b)) => a.trim().parse::<f64>().ok()? / b.trim().parse::<f64>().ok()?,
        None => v.parse().ok()?,
    };
    x.is_finite().then_some(x)
}

// ---------------------------------------------------------------- metrics

pub const METRICS_HEADER: &str = "phase,epoch,lr,rho,loss,train_accuracy,benign,robust,median_gap,gaps,residuals,ranks,achieved_ratio,wall_ms";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

fn joined(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(";")
}

pub fn metrics_row(r: &TrainRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.phase,
        r.epoch,
        r.lr,
        r.rho,
        r.loss,
        r.train_accuracy,
        opt(r.benign),
        opt(r.robust),
        opt(median(&r.gaps)),
        joined(&r.gaps),
        joined(&r.residuals),
        r.ranks.iter().map(|(a, b)| format!("{a}x{b}")).collect::<Vec<_>>().join(";"),
        r.achieved_ratio,
        r.wall_ms
    )
}

/// Appends rows to a metrics CSV, writing the header only when the file is new
/// or empty. An existing file with a different header is rejected.
pub struct MetricsWriter {
    file: File,
}

impl MetricsWriter {
    pub fn open(path: &Path) -> Result<Self> {
        if let Ok(f) = File::open(path) {
            let mut first = String::new();
            BufReader::new(f).read_line(&mut first)?;
            if !first.is_empty() && first.trim_end() != METRICS_HEADER {
                return Err(Error::Format { offset: 0, msg: format!("{} has a different metrics header", path.display()) });
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if file.metadata()?.len() == 0 {
            writeln!(file, "{METRICS_HEADER}")?;
        }
        Ok(Self { file })
    }

    pub fn append(&mut self, row: &TrainRow) -> Result<()> {
        writeln!(self.file, "{}", metrics_row(row))?;
        self.file.flush()?;
        Ok(())
    }
}

/// Header plus one row per epoch, replacing any existing file.
pub fn write_metrics(report: &TrainReport, path: &Path) -> Result<()> {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in &report.rows {
        s.push_str(&metrics_row(r));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub achieved_ratio: f64,
    pub dense_params: usize,
    pub compressed_params: usize,
    pub total_params: usize,
    pub benign: Option<f64>,
    pub robust: Option<f64>,
    pub final_median_gap: Option<f64>,
    pub plan: Option<RankPlan>,
}

pub fn summarize(report: &TrainReport, model: &Model) -> Summary {
    let (dense, compressed) = report.plan.as_ref().map_or((0, 0), |p| (p.dense_params, p.compressed_params));
    let last = report.rows.last();
    Summary {
        achieved_ratio: report.plan.as_ref().map_or(1.0, |p| p.achieved_ratio),
        dense_params: dense,
        compressed_params: compressed,
        total_params: model.param_count(),
        benign: last.and_then(|r| r.benign),
        robust: last.and_then(|r| r.robust),
        final_median_gap: report.final_median_gap(),
        plan: report.plan.clone(),
    }
}

pub fn write_summary(summary: &Summary, path: &Path) -> Result<()> {
    let s = serde_json::to_string_pretty(summary).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    fs::write(path, s + "\n")?;
    Ok(())
}

// ---------------------------------------------------------------- rank report

/// Three significant figures with a `K`/`M` suffix, trailing zeros dropped:
/// `8175 → "8.18K"`, `36864 → "36.9K"`, `2359296 → "2.36M"`, `512 → "512"`.
pub fn compact_count(n: usize) -> String {
    let (v, suffix) = if n >= 1_000_000 {
        (n as f64 / 1e6, "M")
    } else if n >= 1_000 {
        (n as f64 / 1e3, "K")
    } else {
        return n.to_string();
    };
    let decimals = if v >= 100.0 { 0 } else if v >= 10.0 { 1 } else { 2 };
    let mut s = format!("{v:.decimals$}");
    if s.contains('.') {
        s = s.trim_end_matches('0').trim_end_matches('.').to_string();
    }
    // rounding may carry into a fourth digit (e.g. 999.95K)
    if suffix == "K" && s.parse::<f64>().map_or(false, |x| x >= 1000.0) {
        return compact_count(1_000_000);
    }
    format!("{s}{suffix}")
}

/// Per-layer ranks of a factorized model's compressible layers.
pub fn model_ranks(model: &Model) -> Result<RankPlan> {
    let mut layers = Vec::new();
    for name in &model.compressible {
        let li = model.layer_index(name).ok_or_else(|| Error::InvalidArgument(format!("no layer {name:?}")))?;
        let lr = match &model.layers[li].layer {
            Layer::ConvFactorized(c) => {
                let (r1, r2) = c.factors.ranks();
                LayerRanks { name: name.clone(), dims: c.factors.dims(), r1, r2 }
            }
            Layer::ConvDense(c) => {
                let s = c.weight.shape();
                LayerRanks { name: name.clone(), dims: (s[0], s[1], s[2]), r1: s[0], r2: s[1] }
            }
            _ => return invalid(format!("layer {name:?} is not a convolution")),
        };
        layers.push(lr);
    }
    Ok(RankPlan::from_layers(layers, 1.0))
}

/// Text table: layer, weight shape, ranks, uncompressed and compressed
/// parameter counts, layer compression ratio, and a total line.
pub fn rank_report(plan: &RankPlan) -> String {
    let mut s = String::new();
    writeln!(s, "{:<20} {:<18} {:<10} {:>12} {:>12} {:>8}", "layer", "shape", "ranks", "uncompressed", "compressed", "C.R.").unwrap();
    for l in &plan.layers {
        let (o, i, k) = l.dims;
        writeln!(
            s,
            "{:<20} {:<18} {:<10} {:>12} {:>12} {:>8.1}",
            l.name,
            format!("({o},{i},{k},{k})"),
            format!("[{},{}]", l.r1, l.r2),
            compact_count(l.dense_params()),
            compact_count(l.params()),
            l.ratio()
        )
        .unwrap();
    }
    writeln!(
        s,
        "{:<20} {:<18} {:<10} {:>12} {:>12} {:>8.2}",
        "total",
        "",
        "",
        compact_count(plan.dense_params),
        compact_count(plan.compressed_params),
        plan.achieved_ratio
    )
    .unwrap();
    s
}

// ---------------------------------------------------------------- benchmark

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub channels_in: usize,
    pub channels_out: usize,
    pub kernel: usize,
    pub spatial: usize,
    pub ranks: (usize, usize),
    pub dense_params: usize,
    pub factorized_params: usize,
    /// Median milliseconds per image.
    pub dense_ms: f64,
    pub factorized_ms: f64,
    pub speedup: f64,
}

pub const BENCH_WARMUP: usize = 5;

/// Times dense vs factorized convolution forward at batch size 1 (stride 1,
/// same padding). Ranks follow the uniform equal-fraction rule for `ratio`.
pub fn bench_conv(cin: usize, cout: usize, k: usize, spatial: usize, ratio: f64, runs: usize, seed: u64) -> Result<BenchResult> {
    if runs == 0 {
        return invalid("benchmark needs at least one timed run");
    }
    let plan = select_uniform(&[("bench".to_string(), (cout, cin, k))], ratio, 1)?;
    let (r1, r2) = (plan.layers[0].r1, plan.layers[0].r2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 0.1).expect("valid normal");
    let mut rand = |shape: &[usize]| Tensor::from_fn(shape, |_| n.sample(&mut rng));
    let w = rand(&[cout, cin, k, k]);
    let factors = Tucker2Factors::new(rand(&[cout, r1]), rand(&[cin, r2]), rand(&[r1, r2, k, k]))?;
    let x = rand(&[1, cin, spatial, spatial]);
    let pad = k / 2;
    let dense = time_median(runs, || conv::conv2d(&x, &w, None, 1, pad).map(|f| f.y))?;
    let fact = time_median(runs, || factorized_forward(&factors, &x, 1, pad))?;
    Ok(BenchResult {
        channels_in: cin,
        channels_out: cout,
        kernel: k,
        spatial,
        ranks: (r1, r2),
        dense_params: dense_param_count(cout, cin, k),
        factorized_params: factors.param_count(),
        dense_ms: dense,
        factorized_ms: fact,
        speedup: dense / fact,
    })
}

fn time_median(runs: usize, mut f: impl FnMut() -> Result<Tensor>) -> Result<f64> {
    for _ in 0..BENCH_WARMUP {
        std::hint::black_box(f()?);
    }
    let mut t = Vec::with_capacity(runs);
    for _ in 0..runs {
        let s = Instant::now();
        std::hint::black_box(f()?);
        t.push(s.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(&t).expect("non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::MiniConvNetConfig;
    use crate::train::decompose_model;

    fn model() -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        MiniConvNetConfig { in_channels: 2, image_size: 4, num_classes: 3, stem_width: 3, block_widths: vec![4, 5], kernel: 3, batch_norm: true }
            .build(&mut rng)
            .unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let m = model();
        let bytes = checkpoint_bytes(&m).unwrap();
        assert_eq!(parse_checkpoint(&bytes).unwrap(), m);
        let ranks = model_ranks(&m).unwrap();
        let small: Vec<LayerRanks> = ranks.layers.iter().map(|l| LayerRanks { r1: 2, r2: 2, ..l.clone() }).collect();
        let f = decompose_model(&m, &RankPlan::from_layers(small, 1.0)).unwrap();
        assert_eq!(parse_checkpoint(&checkpoint_bytes(&f).unwrap()).unwrap(), f);
    }

    #[test]
    fn truncated_checkpoint_is_rejected_with_offset() {
        let bytes = checkpoint_bytes(&model()).unwrap();
        for cut in [3, 40, bytes.len() - 1] {
            match parse_checkpoint(&bytes[..cut]) {
                Err(Error::Format { .. }) => {}
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(parse_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn compact_count_matches_table_style() {
        for (n, s) in [(8175, "8.18K"), (8768, "8.77K"), (36864, "36.9K"), (2359296, "2.36M"), (512, "512"), (1000, "1K"), (147456, "147K"), (999_999, "1M")] {
            assert_eq!(compact_count(n), s, "{n}");
        }
    }

    #[test]
    fn raw_dataset_round_trip_and_errors() {
        let d = synthetic_blobs(4, 1, 3, 10, 0.1, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        write_raw_dataset(&d, &p).unwrap();
        let back = read_raw_dataset(&p).unwrap();
        assert_eq!(back.labels, d.labels);
        assert!(back.pixels.iter().zip(&d.pixels).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
        let bytes = fs::read(&p).unwrap();
        assert!(matches!(parse_raw_dataset(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        *bad.last_mut().unwrap() = 9;
        assert!(matches!(parse_raw_dataset(&bad), Err(Error::Format { .. })));
    }

    #[test]
    fn blobs_are_balanced_and_in_range() {
        let d = synthetic_blobs(10, 3, 8, 200, 0.2, 0).unwrap();
        for c in 0..10 {
            assert_eq!(d.labels.iter().filter(|&&y| y == c).count(), 20);
        }
        assert!(d.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(d, synthetic_blobs(10, 3, 8, 200, 0.2, 0).unwrap());
    }

    #[test]
    fn config_parsing() {
        let c = RunConfig::parse("seed = 3\ndataset = synthetic\ndelta = 8/255\nblock_widths = 8,16\n# comment\nscheme = uniform\n").unwrap();
        assert_eq!(c.seed, 3);
        assert!((c.cstar.adv_train.delta - 8.0 / 255.0).abs() < 1e-15);
        assert_eq!(c.model.block_widths, vec![8, 16]);
        assert_eq!(c.cstar.scheme, RankScheme::Uniform);
        assert!(RunConfig::parse("seed = 1\n").is_err());
        assert!(RunConfig::parse("dataset = synthetic\n").is_err());
        let e = RunConfig::parse("seed = 1\ndataset = synthetic\nbogus = 2\n").unwrap_err().to_string();
        assert!(e.contains("bogus"), "{e}");
        assert!(RunConfig::parse("seed = 1\ndataset = synthetic\nrho = abc\n").is_err());
    }

    #[test]
    fn metrics_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_metrics(&TrainReport::default(), &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), format!("{METRICS_HEADER}\n"));
        let row = TrainRow {
            phase: 1,
            epoch: 0,
            lr: 0.1,
            rho: 0.01,
            loss: 1.5,
            train_accuracy: 40.0,
            benign: None,
            robust: Some(20.0),
            gaps: vec![0.1, 0.3],
            residuals: vec![1.0, 2.0],
            ranks: vec![(3, 4), (5, 6)],
            achieved_ratio: 4.2,
            wall_ms: 12.0,
        };
        let mut w = MetricsWriter::open(&p).unwrap();
        w.append(&row).unwrap();
        drop(w);
        let mut w = MetricsWriter::open(&p).unwrap();
        w.append(&row).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "1,0,0.1,0.01,1.5,40,,20,0.2,0.1;0.3,1;2,3x4;5x6,4.2,12");
        assert_eq!(lines[1].split(',').count(), METRICS_HEADER.split(',').count());
        fs::write(&p, "other\n").unwrap();
        assert!(MetricsWriter::open(&p).is_err());
        assert!(write_metrics(&TrainReport::default(), &dir.path().join("missing/m.csv")).is_err());
    }

    #[test]
    fn summary_ratio_recounts() {
        let m = model();
        let ranks = model_ranks(&m).unwrap();
        let small: Vec<LayerRanks> = ranks.layers.iter().map(|l| LayerRanks { r1: 2, r2: 3, ..l.clone() }).collect();
        let plan = RankPlan::from_layers(small, 1.0);
        let f = decompose_model(&m, &plan).unwrap();
        let report = TrainReport { rows: vec![], plan: Some(plan) };
        let s = summarize(&report, &f);
        let dense: usize = m.compressible_weights().unwrap().iter().map(|(_, w)| w.tensor().len()).sum();
        assert_eq!(s.achieved_ratio, dense as f64 / f.compressible_weight_params() as f64);
    }
}
