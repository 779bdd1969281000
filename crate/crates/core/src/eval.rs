//! Target-domain evaluation, the ablation harness and plot-data export.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::data::{ScenarioDataset, TrainView};
use crate::engine::{self, EngineError, StepRecord, TrainConfig, TrainState, Variant};
use crate::labeling::LabelingState;

pub const REPORT_HEADER: &str = "pda-report v1";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset has no hidden target labels; evaluation is disabled")]
    NoHiddenLabels,
    #[error("report line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Accuracy on each target class, indexed by class.
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[predicted][true]`, `|C_s| x |C_t|`.
    pub confusion: Vec<Vec<usize>>,
    pub weights: Vec<f64>,
    pub config_hash: String,
    pub seed: u64,
}

impl EvalReport {
    /// Builds a report from hard predictions and true target labels.
    pub fn from_predictions(
        predictions: &[usize],
        truth: &[usize],
        num_classes: usize,
        target_classes: usize,
        weights: Vec<f64>,
        config_hash: String,
        seed: u64,
    ) -> Self {
        assert_eq!(predictions.len(), truth.len());
        let mut confusion = vec![vec![0usize; target_classes]; num_classes];
        for (&p, &t) in predictions.iter().zip(truth) {
            confusion[p][t] += 1;
        }
        let correct: usize = (0..target_classes).map(|c| confusion[c][c]).sum();
        let per_class_accuracy = (0..target_classes)
            .map(|c| {
                let total: usize = confusion.iter().map(|row| row[c]).sum();
                if total == 0 {
                    0.0
                } else {
                    confusion[c][c] as f64 / total as f64
                }
            })
            .collect();
        Self {
            accuracy: correct as f64 / truth.len().max(1) as f64,
            per_class_accuracy,
            confusion,
            weights,
            config_hash,
            seed,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        writeln!(out, "{REPORT_HEADER}").unwrap();
        writeln!(out, "config_hash {}", self.config_hash).unwrap();
        writeln!(out, "seed {}", self.seed).unwrap();
        writeln!(out, "accuracy {}", self.accuracy).unwrap();
        writeln!(out, "per_class_accuracy {}", join(&self.per_class_accuracy)).unwrap();
        writeln!(out, "weights {}", join(&self.weights)).unwrap();
        let cols = self.confusion.first().map_or(0, Vec::len);
        writeln!(out, "confusion {} {}", self.confusion.len(), cols).unwrap();
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            writeln!(out, "{}", cells.join(",")).unwrap();
        }
        writeln!(out, "end").unwrap();
        out
    }

    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end()));
        let mut next = |want: &str| -> Result<(usize, String), EvalError> {
            let (n, line) = lines.next().ok_or_else(|| EvalError::Parse {
                line: 0,
                msg: format!("unexpected end of report, expected `{want}`"),
            })?;
            Ok((n, line.to_string()))
        };
        let bad = |line: usize, msg: &str| EvalError::Parse {
            line,
            msg: msg.to_string(),
        };
        let (n, header) = next("header")?;
        if header != REPORT_HEADER {
            return Err(bad(n, "unsupported report header"));
        }
        let mut field = |key: &str| -> Result<(usize, String), EvalError> {
            let (n, line) = next(key)?;
            match line.split_once(' ') {
                Some((k, v)) if k == key => Ok((n, v.to_string())),
                None if line == key => Ok((n, String::new())),
                _ => Err(bad(n, &format!("expected `{key}`"))),
            }
        };
        let floats = |n: usize, v: &str| -> Result<Vec<f64>, EvalError> {
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|s| s.parse().map_err(|_| bad(n, "bad number")))
                .collect()
        };
        let (_, config_hash) = field("config_hash")?;
        let (n, seed) = field("seed")?;
        let seed = seed.parse().map_err(|_| bad(n, "bad seed"))?;
        let (n, acc) = field("accuracy")?;
        let accuracy = acc.parse().map_err(|_| bad(n, "bad accuracy"))?;
        let (n, pca) = field("per_class_accuracy")?;
        let per_class_accuracy = floats(n, &pca)?;
        let (n, w) = field("weights")?;
        let weights = floats(n, &w)?;
        let (n, dims) = field("confusion")?;
        let dims: Vec<usize> = dims
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad(n, "bad confusion shape")))
            .collect::<Result<_, _>>()?;
        let [rows, cols] = dims[..] else {
            return Err(bad(n, "confusion needs rows and columns"));
        };
        let mut confusion = Vec::with_capacity(rows);
        for _ in 0..rows {
            let (n, line) = next("confusion row")?;
            let row: Vec<usize> = line
                .split(',')
                .map(|s| s.parse().map_err(|_| bad(n, "bad count")))
                .collect::<Result<_, _>>()?;
            if row.len() != cols {
                return Err(bad(n, "confusion row length"));
            }
            confusion.push(row);
        }
        let (n, end) = next("end")?;
        if end != "end" {
            return Err(bad(n, "expected `end`"));
        }
        Ok(Self {
            accuracy,
            per_class_accuracy,
            confusion,
            weights,
            config_hash,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }
}

/// Evaluates the classifier on posterior-mean target latents.
pub fn evaluate(state: &TrainState, ds: &ScenarioDataset) -> Result<EvalReport, EvalError> {
    let hidden = ds.hidden.as_ref().ok_or(EvalError::NoHiddenLabels)?;
    let predictions = engine::predict(state, &ds.train.target_x)?;
    Ok(EvalReport::from_predictions(
        &predictions,
        &hidden.labels,
        ds.train.num_classes,
        ds.target_classes,
        state.labeling.weights.clone(),
        state.config_hash.clone(),
        state.seed,
    ))
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub reports: Vec<EvalReport>,
}

impl AblationRow {
    pub fn accuracies(&self) -> Vec<f64> {
        self.reports.iter().map(|r| r.accuracy).collect()
    }

    pub fn median(&self) -> f64 {
        median(&self.accuracies())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Tab-separated table: variant, one accuracy per seed, median.
    pub fn to_text(&self) -> String {
        let mut out = String::from("variant");
        for s in &self.seeds {
            write!(out, "\tseed{s}").unwrap();
        }
        out.push_str("\tmedian\n");
        for row in &self.rows {
            out.push_str(row.variant.name());
            for a in row.accuracies() {
                write!(out, "\t{a:.4}").unwrap();
            }
            writeln!(out, "\t{:.4}", row.median()).unwrap();
        }
        out
    }
}

/// Median of a non-empty slice; the mean of the middle pair for even length.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Trains `variant` of `base` with each seed and evaluates it.
pub fn run_variant(
    base: &TrainConfig,
    ds: &ScenarioDataset,
    variant: Variant,
    seeds: &[u64],
) -> Result<AblationRow, EvalError> {
    let mut reports = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = variant.apply(&TrainConfig { seed, ..base.clone() });
        let state = engine::fit(&cfg, &ds.train)?;
        reports.push(evaluate(&state, ds)?);
    }
    Ok(AblationRow { variant, reports })
}

/// The full model and its three ablations over a shared seed list.
pub fn run_ablation(base: &TrainConfig, ds: &ScenarioDataset, seeds: &[u64]) -> Result<AblationTable, EvalError> {
    if ds.hidden.is_none() {
        return Err(EvalError::NoHiddenLabels);
    }
    let rows = Variant::ABLATIONS
        .iter()
        .map(|&v| run_variant(base, ds, v, seeds))
        .collect::<Result<_, _>>()?;
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

/// Comma-separated loss curves with a header row.
pub fn loss_curve_csv(history: &[StepRecord]) -> String {
    let mut out = format!("{}\n", crate::losses::LOSS_LOG_HEADER);
    for r in history {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Posterior-mean latents of every sample:
/// `domain,label,z0,z1,...` with `?` for unlabeled targets.
pub fn latent_csv(state: &TrainState, view: &TrainView) -> Result<String, EvalError> {
    let d = state.params.latent_dim();
    let mut out = String::from("domain,label");
    for j in 0..d {
        write!(out, ",z{j}").unwrap();
    }
    out.push('\n');
    let src = engine::mean_latents(state, &view.source_x)?;
    for (row, y) in src.rows().into_iter().zip(&view.source_y) {
        write!(out, "source,{y}").unwrap();
        for v in row {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    let tgt = engine::mean_latents(state, &view.target_x)?;
    for row in tgt.rows() {
        out.push_str("target,?");
        for v in row {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

/// Class weights per re-estimation: `epoch,threshold,confident,w0,w1,...`.
pub fn weight_trajectory_csv(records: &[(usize, LabelingState)]) -> String {
    let k = records.first().map_or(0, |(_, s)| s.weights.len());
    let mut out = String::from("epoch,threshold,confident");
    for j in 0..k {
        write!(out, ",w{j}").unwrap();
    }
    out.push('\n');
    for (epoch, s) in records {
        write!(out, "{epoch},{},{}", s.threshold, s.confident.len()).unwrap();
        for w in &s.weights {
            write!(out, ",{w}").unwrap();
        }
        out.push('\n');
    }
    out
}
