//! Synthetic partial-overlap scenarios, the dataset text format, and seeded
//! batching.
//!
//! Source classes are isotropic Gaussian blobs with means on a circle in the
//! first two input coordinates. The target domain holds only the first
//! `target_classes` classes, rotated and translated, optionally with extra
//! class-dependent noise.
//!
//! Target ground truth is kept out of [`TrainView`]: training code receives
//! only that view, and the labels stay in [`ScenarioDataset::hidden`].

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DATASET_FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "pda-dataset";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config: {0}")]
    Config(String),
    #[error("cannot batch an empty dataset")]
    Empty,
    #[error("batch size must be at least 1")]
    BatchSize,
}

/// Parameters of a synthetic scenario. Loadable from a flat TOML file with
/// the field names as keys; missing keys take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    /// Input dimension `d` (at least 2).
    pub dim: usize,
    /// `|C_s|`.
    pub source_classes: usize,
    /// `|C_t|`; the shared classes are `0..target_classes`.
    pub target_classes: usize,
    pub source_per_class: usize,
    pub target_per_class: usize,
    /// Radius of the circle holding the class means.
    pub radius: f64,
    /// Standard deviation of every blob.
    pub blob_std: f64,
    /// Target rotation in the first two coordinates, radians.
    pub rotation: f64,
    /// Target translation, length `dim`.
    pub translation: Vec<f64>,
    /// Extra target noise: class `c` gets std `shift_noise * (c + 1) / |C_t|`.
    pub shift_noise: f64,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            dim: 2,
            source_classes: 5,
            target_classes: 3,
            source_per_class: 200,
            target_per_class: 100,
            radius: 4.0,
            blob_std: 1.0,
            rotation: 30f64.to_radians(),
            translation: vec![1.0, 0.5],
            shift_noise: 0.0,
            seed: 0,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if self.dim < 2 {
            return bad("dim must be at least 2");
        }
        if self.target_classes == 0 {
            return bad("target_classes must be at least 1");
        }
        if self.target_classes >= self.source_classes {
            return bad("target_classes must be smaller than source_classes");
        }
        if self.source_per_class == 0 || self.target_per_class == 0 {
            return bad("per-class sample counts must be at least 1");
        }
        if self.translation.len() != self.dim {
            return bad("translation length must equal dim");
        }
        let reals = [self.radius, self.blob_std, self.rotation, self.shift_noise];
        if reals.iter().chain(&self.translation).any(|v| !v.is_finite()) {
            return bad("non-finite parameter");
        }
        if self.blob_std < 0.0 || self.shift_noise < 0.0 || self.radius < 0.0 {
            return bad("radius and noise scales must be non-negative");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, DataError> {
        let spec: Self = toml::from_str(text).map_err(|e| DataError::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::from_toml(&read(path)?)
    }

    /// Mean of source class `c`.
    pub fn class_mean(&self, c: usize) -> Vec<f64> {
        let angle = 2.0 * std::f64::consts::PI * c as f64 / self.source_classes as f64;
        let mut m = vec![0.0; self.dim];
        m[0] = self.radius * angle.cos();
        m[1] = self.radius * angle.sin();
        m
    }

    /// Applies the domain shift (rotation then translation) to one point.
    pub fn shift(&self, x: &[f64]) -> Vec<f64> {
        let (s, c) = self.rotation.sin_cos();
        let mut out = x.to_vec();
        out[0] = c * x[0] - s * x[1];
        out[1] = s * x[0] + c * x[1];
        for (o, t) in out.iter_mut().zip(&self.translation) {
            *o += t;
        }
        out
    }
}

/// Everything training may see: labelled source samples and unlabelled
/// target samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainView {
    pub source_x: Array2<f64>,
    pub source_y: Vec<usize>,
    pub target_x: Array2<f64>,
    /// `|C_s|`.
    pub num_classes: usize,
}

impl TrainView {
    pub fn dim(&self) -> usize {
        self.source_x.ncols()
    }

    pub fn n_source(&self) -> usize {
        self.source_x.nrows()
    }

    pub fn n_target(&self) -> usize {
        self.target_x.nrows()
    }
}

/// Target ground truth, for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLabels {
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioDataset {
    pub train: TrainView,
    /// `|C_t|`; the shared classes are `0..target_classes`.
    pub target_classes: usize,
    /// `None` when loaded from a file without target labels.
    pub hidden: Option<HiddenLabels>,
}

impl ScenarioDataset {
    pub fn evaluation_enabled(&self) -> bool {
        self.hidden.is_some()
    }

    /// Checks the structural invariants of a dataset.
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        let t = &self.train;
        if t.source_y.len() != t.n_source() {
            return bad("source label count differs from sample count".into());
        }
        if t.target_x.ncols() != t.dim() {
            return bad("source and target dimensions differ".into());
        }
        if self.target_classes == 0 || self.target_classes >= t.num_classes {
            return bad(format!(
                "need 0 < |C_t| < |C_s|, got {} and {}",
                self.target_classes, t.num_classes
            ));
        }
        let mut seen = vec![false; t.num_classes];
        for &y in &t.source_y {
            if y >= t.num_classes {
                return bad(format!("source label {y} out of range"));
            }
            seen[y] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return bad(format!("class {c} missing from source"));
        }
        if let Some(h) = &self.hidden {
            if h.labels.len() != t.n_target() {
                return bad("target label count differs from sample count".into());
            }
            if let Some(y) = h.labels.iter().find(|&&y| y >= self.target_classes) {
                return bad(format!("target label {y} is not a shared class"));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut out = format!(
            "{MAGIC} v{DATASET_FORMAT_VERSION} dim={} source_classes={} target_classes={} source_samples={} target_samples={}\n",
            t.dim(),
            t.num_classes,
            self.target_classes,
            t.n_source(),
            t.n_target()
        );
        let write_row = |out: &mut String, row: ndarray::ArrayView1<f64>| {
            for v in row {
                let _ = write!(out, "{v},");
            }
        };
        for (row, y) in t.source_x.rows().into_iter().zip(&t.source_y) {
            write_row(&mut out, row);
            let _ = writeln!(out, "source,{y}");
        }
        for (i, row) in t.target_x.rows().into_iter().enumerate() {
            write_row(&mut out, row);
            match &self.hidden {
                Some(h) => {
                    let _ = writeln!(out, "target,{}", h.labels[i]);
                }
                None => out.push_str("target,?\n"),
            }
        }
        out
    }

    /// Parses the dataset text format. Nothing is returned unless the whole
    /// file is well formed.
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let err = |line: usize, msg: String| DataError::Parse { line, msg };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(MAGIC) {
            return Err(err(1, format!("expected `{MAGIC}` header")));
        }
        let version = fields.next().unwrap_or("");
        if version != format!("v{DATASET_FORMAT_VERSION}") {
            return Err(err(1, format!("unsupported format version `{version}`")));
        }
        let mut get = |key: &str| -> Result<usize, DataError> {
            let f = fields.next().ok_or_else(|| err(1, format!("missing `{key}`")))?;
            f.strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| err(1, format!("expected `{key}=<n>`, found `{f}`")))
        };
        let dim = get("dim")?;
        let num_classes = get("source_classes")?;
        let target_classes = get("target_classes")?;
        let n_source = get("source_samples")?;
        let n_target = get("target_samples")?;

        let mut source = Vec::with_capacity(n_source * dim);
        let mut source_y = Vec::with_capacity(n_source);
        let mut target = Vec::with_capacity(n_target * dim);
        let mut target_y: Vec<Option<usize>> = Vec::with_capacity(n_target);
        let mut last_line = 1;
        for (n, line) in lines {
            last_line = n;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != dim + 2 {
                return Err(err(n, format!("expected {} fields, found {}", dim + 2, parts.len())));
            }
            let mut features = Vec::with_capacity(dim);
            for tok in &parts[..dim] {
                let v: f64 = tok.trim().parse().map_err(|_| err(n, format!("bad feature `{tok}`")))?;
                features.push(v);
            }
            let label = parts[dim + 1].trim();
            match parts[dim].trim() {
                "source" => {
                    let y = label
                        .parse()
                        .map_err(|_| err(n, format!("bad source label `{label}`")))?;
                    source.extend(features);
                    source_y.push(y);
                }
                "target" => {
                    let y = if label == "?" {
                        None
                    } else {
                        Some(
                            label
                                .parse()
                                .map_err(|_| err(n, format!("bad target label `{label}`")))?,
                        )
                    };
                    if let Some(prev) = target_y.first() {
                        if prev.is_some() != y.is_some() {
                            return Err(err(n, "target labels must be all present or all `?`".into()));
                        }
                    }
                    target.extend(features);
                    target_y.push(y);
                }
                other => return Err(err(n, format!("unknown domain `{other}`"))),
            }
        }
        if source_y.len() != n_source || target_y.len() != n_target {
            return Err(err(
                last_line,
                format!(
                    "truncated: header promises {n_source} source and {n_target} target samples, found {} and {}",
                    source_y.len(),
                    target_y.len()
                ),
            ));
        }
        let hidden = if target_y.iter().all(Option::is_some) && !target_y.is_empty() {
            Some(HiddenLabels {
                labels: target_y.into_iter().flatten().collect(),
            })
        } else {
            None
        };
        let shape_err = |e: ndarray::ShapeError| err(1, e.to_string());
        let ds = ScenarioDataset {
            train: TrainView {
                source_x: Array2::from_shape_vec((n_source, dim), source).map_err(shape_err)?,
                source_y,
                target_x: Array2::from_shape_vec((n_target, dim), target).map_err(shape_err)?,
                num_classes,
            },
            target_classes,
            hidden,
        };
        ds.validate().map_err(|e| err(1, e.to_string()))?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_text()).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::parse(&read(path)?)
    }
}

fn read(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Draws a dataset from `spec`. The same spec always gives the same data.
pub fn generate_scenario(spec: &ScenarioSpec) -> Result<ScenarioDataset, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let n_source = spec.source_classes * spec.source_per_class;
    let mut source = Vec::with_capacity(n_source * d);
    let mut source_y = Vec::with_capacity(n_source);
    for c in 0..spec.source_classes {
        let mean = spec.class_mean(c);
        for _ in 0..spec.source_per_class {
            source.extend(mean.iter().map(|m| m + spec.blob_std * normal(&mut rng)));
            source_y.push(c);
        }
    }

    let n_target = spec.target_classes * spec.target_per_class;
    let mut target = Vec::with_capacity(n_target * d);
    let mut target_y = Vec::with_capacity(n_target);
    for c in 0..spec.target_classes {
        let mean = spec.class_mean(c);
        let extra = spec.shift_noise * (c + 1) as f64 / spec.target_classes as f64;
        for _ in 0..spec.target_per_class {
            let x: Vec<f64> = mean.iter().map(|m| m + spec.blob_std * normal(&mut rng)).collect();
            let shifted = spec.shift(&x);
            target.extend(shifted.iter().map(|v| v + extra * normal(&mut rng)));
            target_y.push(c);
        }
    }

    let ds = ScenarioDataset {
        train: TrainView {
            source_x: Array2::from_shape_vec((n_source, d), source).expect("sized above"),
            source_y,
            target_x: Array2::from_shape_vec((n_target, d), target).expect("sized above"),
            num_classes: spec.source_classes,
        },
        target_classes: spec.target_classes,
        hidden: Some(HiddenLabels { labels: target_y }),
    };
    Ok(ds)
}

/// Which domain a batch stream draws from; also separates their seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

/// Mixes a base seed with stream tags (splitmix64 finaliser).
pub fn stream_seed(base: u64, tags: &[u64]) -> u64 {
    let mut h = base ^ 0x9E37_79B9_7F4A_7C15;
    for &t in tags {
        h = h
            .wrapping_add(t.wrapping_mul(0xBF58_476D_1CE4_E5B9))
            .wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// Endless stream of index batches. Each epoch is a fresh seeded
/// permutation cut into `batch_size` pieces, the last one possibly short.
/// The k-th batch is a pure function of `(seed, domain, k)`, so a stream can
/// be resumed at any position.
#[derive(Debug, Clone)]
pub struct BatchIterator {
    n: usize,
    batch_size: usize,
    seed: u64,
    domain: Domain,
    next: usize,
    cached_epoch: Option<(usize, Vec<usize>)>,
}

impl BatchIterator {
    pub fn new(n: usize, batch_size: usize, seed: u64, domain: Domain) -> Result<Self, DataError> {
        if n == 0 {
            return Err(DataError::Empty);
        }
        if batch_size == 0 {
            return Err(DataError::BatchSize);
        }
        Ok(Self {
            n,
            batch_size,
            seed,
            domain,
            next: 0,
            cached_epoch: None,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    /// Permutation used for `epoch`.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let tag = match self.domain {
            Domain::Source => 1,
            Domain::Target => 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, &[tag, epoch as u64]));
        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// All batches of one epoch.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        self.epoch_order(epoch)
            .chunks(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Batch number `k` of the stream.
    pub fn batch_at(&mut self, k: usize) -> Vec<usize> {
        let per = self.batches_per_epoch();
        let (epoch, j) = (k / per, k % per);
        if self.cached_epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.cached_epoch = Some((epoch, self.epoch_order(epoch)));
        }
        let order = &self.cached_epoch.as_ref().expect("filled above").1;
        let start = j * self.batch_size;
        order[start..(start + self.batch_size).min(self.n)].to_vec()
    }

    /// Moves the stream so the next batch returned is number `k`.
    pub fn seek(&mut self, k: usize) {
        self.next = k;
    }
}

impl Iterator for BatchIterator {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let b = self.batch_at(self.next);
        self.next += 1;
        Some(b)
    }
}
