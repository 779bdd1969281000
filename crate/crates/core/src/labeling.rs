//! Non-parametric pseudo-labeling and class-importance weights.
//!
//! Source latents give one center per class. A target latent is compared to
//! every center with a Jensen-Shannon similarity, the similarities go
//! through a softmax to give soft pseudo-labels, and targets whose top
//! probability clears the source-derived threshold vote on the class
//! weights.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

use crate::math::{self, MathError, SimplexVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabelError {
    #[error("class {0} has no source samples")]
    MissingClass(usize),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("{what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("no source similarities to derive a threshold from")]
    EmptySource,
    #[error("malformed diagnostics record: {0}")]
    Parse(String),
    #[error(transparent)]
    Math(#[from] MathError),
}

/// Per-class means of source latents.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterBank {
    /// `|C_s| x d'`.
    pub centers: Array2<f64>,
    pub counts: Vec<usize>,
    normalized: Vec<SimplexVector>,
}

impl CenterBank {
    pub fn num_classes(&self) -> usize {
        self.centers.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.centers.ncols()
    }
}

/// Mean latent of each source class. Every class in `0..num_classes` must
/// have at least one sample.
pub fn class_centers(latents: ArrayView2<f64>, labels: &[usize], num_classes: usize) -> Result<CenterBank, LabelError> {
    if latents.nrows() != labels.len() {
        return Err(LabelError::Dimension {
            what: "source labels",
            expected: latents.nrows(),
            got: labels.len(),
        });
    }
    let mut centers = Array2::zeros((num_classes, latents.ncols()));
    let mut counts = vec![0usize; num_classes];
    for (row, &y) in latents.rows().into_iter().zip(labels) {
        if y >= num_classes {
            return Err(LabelError::Label {
                label: y,
                classes: num_classes,
            });
        }
        let mut c = centers.row_mut(y);
        c += &row;
        counts[y] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(LabelError::MissingClass(missing));
    }
    for (mut c, &n) in centers.rows_mut().into_iter().zip(&counts) {
        c /= n as f64;
    }
    let normalized = centers
        .rows()
        .into_iter()
        .map(|r| math::softmax(&r.to_vec()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CenterBank {
        centers,
        counts,
        normalized,
    })
}

/// `(2 - JS(softmax(z), softmax(center_c))) / 2` for every class; each
/// entry lies in `[0.5, 1]`.
pub fn similarity(z: &[f64], bank: &CenterBank) -> Result<Vec<f64>, LabelError> {
    if z.len() != bank.latent_dim() {
        return Err(LabelError::Dimension {
            what: "latent",
            expected: bank.latent_dim(),
            got: z.len(),
        });
    }
    let p = math::softmax(z)?;
    bank.normalized
        .iter()
        .map(|c| Ok((2.0 - math::js_divergence(&p, c)?) / 2.0))
        .collect()
}

/// Soft pseudo-label `softmax(sim)` and its argmax (lowest index on ties).
pub fn pseudo_label(sim: &[f64]) -> Result<(SimplexVector, usize), LabelError> {
    let p = math::softmax(sim)?;
    let y = p.argmax();
    Ok((p, y))
}

/// Mean over source samples of the top soft-label probability.
pub fn confidence_threshold(src_sims: &[Vec<f64>]) -> Result<f64, LabelError> {
    if src_sims.is_empty() {
        return Err(LabelError::EmptySource);
    }
    let mut total = 0.0;
    for s in src_sims {
        total += math::softmax(s)?.max();
    }
    Ok(total / src_sims.len() as f64)
}

/// A target sample admitted to the confident set.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidentTarget {
    /// Position of the sample in the target set.
    pub index: usize,
    pub label: usize,
    pub probs: SimplexVector,
}

/// Keeps the targets whose top probability is at least `threshold`, in
/// input order.
pub fn confident_targets(pseudo: &[(SimplexVector, usize)], threshold: f64) -> Vec<ConfidentTarget> {
    pseudo
        .iter()
        .enumerate()
        .filter(|(_, (p, _))| p.max() >= threshold)
        .map(|(index, (p, y))| ConfidentTarget {
            index,
            label: *y,
            probs: p.clone(),
        })
        .collect()
}

/// Mean of the given probability vectors, rescaled so the largest entry is
/// one. An empty input gives all-ones.
pub fn normalized_mean<'a>(probs: impl IntoIterator<Item = &'a SimplexVector>, num_classes: usize) -> Vec<f64> {
    let mut sum = vec![0.0; num_classes];
    let mut n = 0usize;
    for p in probs {
        for (s, v) in sum.iter_mut().zip(p.as_slice()) {
            *s += v;
        }
        n += 1;
    }
    if n == 0 {
        return vec![1.0; num_classes];
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let max = mean.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return vec![1.0; num_classes];
    }
    mean.iter().map(|m| m / max).collect()
}

/// Class-importance weights from the confident set's soft pseudo-labels.
pub fn class_weights(confident: &[ConfidentTarget], num_classes: usize) -> Vec<f64> {
    normalized_mean(confident.iter().map(|c| &c.probs), num_classes)
}

/// Output of one pseudo-labeling round.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelingState {
    pub threshold: f64,
    pub confident: Vec<ConfidentTarget>,
    /// Class-importance weights, one per source class.
    pub weights: Vec<f64>,
    /// Hard pseudo-label of every target sample, confident or not.
    pub target_labels: Vec<usize>,
}

impl LabelingState {
    /// State before any estimate exists: all-ones weights, nothing confident.
    pub fn fallback(num_classes: usize, num_targets: usize) -> Self {
        Self {
            threshold: 1.0,
            confident: Vec::new(),
            weights: vec![1.0; num_classes],
            target_labels: vec![0; num_targets],
        }
    }

    /// Pseudo-label per target index, `None` outside the confident set.
    pub fn confident_lookup(&self, num_targets: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_targets];
        for c in &self.confident {
            out[c.index] = Some(c.label);
        }
        out
    }

    /// One diagnostics record:
    /// `epoch=<e> threshold=<T> confident=<n> weights=<w0>,<w1>,...`.
    pub fn diagnostics_line(&self, epoch: usize) -> String {
        let mut out = format!(
            "epoch={epoch} threshold={} confident={} weights=",
            self.threshold,
            self.confident.len()
        );
        for (i, w) in self.weights.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{w}");
        }
        out
    }
}

/// A parsed diagnostics record.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsRecord {
    pub epoch: usize,
    pub threshold: f64,
    pub confident: usize,
    pub weights: Vec<f64>,
}

impl std::str::FromStr for DiagnosticsRecord {
    type Err = LabelError;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let bad = || LabelError::Parse(line.to_string());
        let mut epoch = None;
        let mut threshold = None;
        let mut confident = None;
        let mut weights = None;
        for field in line.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(bad)?;
            match k {
                "epoch" => epoch = v.parse().ok(),
                "threshold" => threshold = v.parse().ok(),
                "confident" => confident = v.parse().ok(),
                "weights" => {
                    weights = v
                        .split(',')
                        .map(|w| w.parse::<f64>())
                        .collect::<Result<Vec<_>, _>>()
                        .ok()
                }
                _ => return Err(bad()),
            }
        }
        Ok(Self {
            epoch: epoch.ok_or_else(bad)?,
            threshold: threshold.ok_or_else(bad)?,
            confident: confident.ok_or_else(bad)?,
            weights: weights.ok_or_else(bad)?,
        })
    }
}

/// Full pipeline: centers from labelled source latents, similarities for
/// both domains, threshold from the source side, pseudo-labels, confident
/// set and weights.
pub fn estimate(
    source_latents: ArrayView2<f64>,
    source_labels: &[usize],
    target_latents: ArrayView2<f64>,
    num_classes: usize,
) -> Result<LabelingState, LabelError> {
    let bank = class_centers(source_latents, source_labels, num_classes)?;
    let src_sims = source_latents
        .rows()
        .into_iter()
        .map(|r| similarity(&r.to_vec(), &bank))
        .collect::<Result<Vec<_>, _>>()?;
    let threshold = confidence_threshold(&src_sims)?;
    let pseudo = target_latents
        .rows()
        .into_iter()
        .map(|r| similarity(&r.to_vec(), &bank).and_then(|s| pseudo_label(&s)))
        .collect::<Result<Vec<_>, _>>()?;
    let confident = confident_targets(&pseudo, threshold);
    let weights = class_weights(&confident, num_classes);
    Ok(LabelingState {
        threshold,
        target_labels: pseudo.iter().map(|(_, y)| *y).collect(),
        confident,
        weights,
    })
}
