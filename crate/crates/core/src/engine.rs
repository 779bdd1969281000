//! Training loop: SGD with momentum, annealed learning rate, ramped
//! adversarial weight, periodic pseudo-label re-estimation, ablation
//! switches and checkpoints.
//!
//! Randomness (initialisation, batch order, latent noise, dropout) is drawn
//! from streams keyed by `(seed, purpose, counter)`, so a run is a pure
//! function of its config and data, and a checkpoint only needs counters to
//! resume exactly.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{stream_seed, BatchIterator, DataError, Domain, TrainView};
use crate::labeling::{self, ConfidentTarget, LabelError, LabelingState};
use crate::losses::{self, BatchRows, CdaInputs, LossBreakdown, LossError, TermVars, TradeOff};
use crate::math::SimplexVector;
use crate::networks::{ClassPriorBank, Dropout, ModelParams, NetError, NetworkShape, ParamGroup};
use crate::tape::Tape;
use crate::tensors::{TensorFileError, TensorMap};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("progress {0} outside [0, 1]")]
    Progress(f64),
    #[error("non-finite gradient for `{0}`")]
    NonFiniteGradient(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        /// State after the last finite step.
        last_good: Box<TrainState>,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    File(#[from] TensorFileError),
}

/// How the "no class-distribution alignment" ablation is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CdlMode {
    /// Drop the alignment term, keep reconstruction.
    CdaOnly,
    /// Drop reconstruction and alignment together.
    AllVar,
}

impl std::str::FromStr for CdlMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cda-only" => Ok(Self::CdaOnly),
            "all-var" => Ok(Self::AllVar),
            other => Err(format!("unknown cdl mode `{other}` (cda-only | all-var)")),
        }
    }
}

/// Training hyper-parameters. Loadable from a flat TOML file; missing keys
/// take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Backbone learning rate at progress 0.
    pub lr: f64,
    /// Multiplier applied to every non-backbone parameter group.
    pub head_lr_multiplier: f64,
    pub momentum: f64,
    /// Final value of the adversarial ramp.
    pub alpha_max: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Re-estimate pseudo-labels and class weights every this many epochs.
    pub reestimate_every: usize,
    /// Confident-subset voting; off falls back to averaging classifier
    /// predictions over all targets.
    pub ast: bool,
    pub adv: bool,
    pub cdl: bool,
    pub cdl_mode: CdlMode,
    /// Off gives a source-only run: no pseudo-labels, all-ones weights.
    pub pseudo_labels: bool,
    pub seed: u64,
    pub latent_dim: usize,
    pub encoder_hidden: usize,
    pub bottleneck: usize,
    pub decoder_hidden: usize,
    pub classifier_hidden: usize,
    pub discriminator_hidden: usize,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            lr: 1e-3,
            head_lr_multiplier: 10.0,
            momentum: 0.9,
            alpha_max: 1.0,
            beta: TradeOff::OFFICE31.beta,
            gamma: TradeOff::OFFICE31.gamma,
            reestimate_every: 1,
            ast: true,
            adv: true,
            cdl: true,
            cdl_mode: CdlMode::CdaOnly,
            pseudo_labels: true,
            seed: 0,
            latent_dim: 8,
            encoder_hidden: 64,
            bottleneck: 16,
            decoder_hidden: 64,
            classifier_hidden: 64,
            discriminator_hidden: 64,
            dropout: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.reestimate_every == 0 {
            return bad("reestimate_every must be at least 1");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        for (name, v) in [
            ("alpha_max", self.alpha_max),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("head_lr_multiplier", self.head_lr_multiplier),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(EngineError::Config(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, EngineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| EngineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EngineError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    /// First 16 hex digits of the SHA-256 of the TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn shape(&self, view: &TrainView) -> NetworkShape {
        NetworkShape {
            input_dim: view.dim(),
            latent_dim: self.latent_dim,
            num_classes: view.num_classes,
            encoder_hidden: self.encoder_hidden,
            bottleneck: self.bottleneck,
            decoder_hidden: self.decoder_hidden,
            classifier_hidden: self.classifier_hidden,
            discriminator_hidden: self.discriminator_hidden,
        }
    }

    /// Trade-off weights in effect at adversarial ramp value `alpha`, with
    /// the ablation switches applied.
    fn trade_off(&self, alpha: f64) -> TradeOff {
        TradeOff {
            alpha: if self.adv { alpha } else { 0.0 },
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    fn use_recon(&self) -> bool {
        self.beta > 0.0 && (self.cdl || self.cdl_mode == CdlMode::CdaOnly)
    }

    fn use_cda(&self) -> bool {
        self.beta > 0.0 && self.cdl
    }
}

/// Model variants compared by the ablation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoAst,
    NoAdv,
    NoCdl,
    /// Same architecture, classification loss on source only.
    SourceOnly,
}

impl Variant {
    pub const ABLATIONS: [Variant; 4] = [Variant::Full, Variant::NoAst, Variant::NoAdv, Variant::NoCdl];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAst => "w/o ast",
            Variant::NoAdv => "w/o adv",
            Variant::NoCdl => "w/o cdl",
            Variant::SourceOnly => "source-only",
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoAst => cfg.ast = false,
            Variant::NoAdv => cfg.adv = false,
            Variant::NoCdl => cfg.cdl = false,
            Variant::SourceOnly => {
                cfg.adv = false;
                cfg.beta = 0.0;
                cfg.gamma = 0.0;
                cfg.pseudo_labels = false;
            }
        }
        cfg
    }
}

/// `lr0 * (1 + 10 p)^(-0.75)` for progress `p` in `[0, 1]`.
pub fn lr_schedule(progress: f64, lr0: f64) -> Result<f64, EngineError> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(EngineError::Progress(progress));
    }
    Ok(lr0 * (1.0 + 10.0 * progress).powf(-0.75))
}

/// `2 / (1 + exp(-10 p)) - 1`, rising from 0 towards 1.
pub fn alpha_schedule(progress: f64) -> f64 {
    2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0
}

/// One momentum step on every tensor: `v <- m v + g`, `p <- p - lr v`.
/// Nothing is modified unless every gradient is finite; the error carries
/// the index of the first offending tensor.
pub fn sgd_step(
    params: &mut [&mut Array2<f64>],
    grads: &[Array2<f64>],
    velocities: &mut [Array2<f64>],
    lrs: &[f64],
    momentum: f64,
) -> Result<(), usize> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), velocities.len());
    assert_eq!(params.len(), lrs.len());
    if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(i);
    }
    for (((p, g), v), &lr) in params.iter_mut().zip(grads).zip(velocities.iter_mut()).zip(lrs) {
        assert_eq!(p.dim(), g.dim(), "gradient shape");
        v.zip_mut_with(g, |vi, &gi| *vi = momentum * *vi + gi);
        p.zip_mut_with(v, |pi, &vi| *pi -= lr * vi);
    }
    Ok(())
}

/// One logged optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub alpha: f64,
    pub losses: LossBreakdown,
}

impl StepRecord {
    pub fn csv_line(&self) -> String {
        self.losses.csv_line(self.step, self.lr, self.alpha)
    }
}

/// Fixed per-feature affine map `(x - shift) / scale` applied before the
/// encoder, fitted on pooled source and target features.
#[derive(Debug, Clone, PartialEq)]
pub struct InputScaler {
    pub shift: Array2<f64>,
    pub scale: Array2<f64>,
}

impl InputScaler {
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: Array2::zeros((1, dim)),
            scale: Array2::ones((1, dim)),
        }
    }

    pub fn fit(view: &TrainView) -> Self {
        let n = (view.n_source() + view.n_target()) as f64;
        let rows = || view.source_x.rows().into_iter().chain(view.target_x.rows());
        let mut mean = Array2::zeros((1, view.dim()));
        for r in rows() {
            mean.row_mut(0).scaled_add(1.0 / n, &r);
        }
        let mut var = Array2::zeros((1, view.dim()));
        for r in rows() {
            let d = &r - &mean.row(0);
            var.row_mut(0).scaled_add(1.0 / n, &(&d * &d));
        }
        let scale = var.mapv(|v: f64| if v > 1e-24 { v.sqrt() } else { 1.0 });
        Self { shift: mean, scale }
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.shift) / &self.scale
    }

    pub fn apply_view(&self, view: &TrainView) -> TrainView {
        TrainView {
            source_x: self.apply(&view.source_x),
            source_y: view.source_y.clone(),
            target_x: self.apply(&view.target_x),
            num_classes: view.num_classes,
        }
    }
}

/// Everything needed to continue or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Hash of the config that produced this state.
    pub config_hash: String,
    pub seed: u64,
    pub scaler: InputScaler,
    pub params: ModelParams,
    pub priors: ClassPriorBank,
    /// One per tensor of `params`, then one for the prior means.
    pub velocities: Vec<Array2<f64>>,
    pub labeling: LabelingState,
    pub step: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<StepRecord>,
}

pub const CHECKPOINT_KIND: &str = "train-state";

impl TrainState {
    pub fn init(config: &TrainConfig, view: &TrainView) -> Result<Self, EngineError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, &[0]));
        let params = ModelParams::init(&config.shape(view), &mut rng)?;
        let priors = ClassPriorBank::init(view.num_classes, config.latent_dim, &mut rng);
        let mut velocities: Vec<Array2<f64>> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| Array2::zeros(t.dim()))
            .collect();
        velocities.push(Array2::zeros(priors.means.dim()));
        Ok(Self {
            config_hash: config.hash(),
            seed: config.seed,
            scaler: InputScaler::fit(view),
            params,
            priors,
            velocities,
            labeling: LabelingState::fallback(view.num_classes, view.n_target()),
            step: 0,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn to_tensor_map(&self) -> TensorMap {
        let mut map = self.params.to_tensor_map();
        map.set_meta("kind", CHECKPOINT_KIND);
        map.set_meta("config_hash", &self.config_hash);
        map.set_meta("seed", self.seed);
        map.set_meta("step", self.step);
        map.set_meta("epoch", self.epoch);
        map.set_meta("threshold", self.labeling.threshold);
        map.insert("input.shift", self.scaler.shift.clone());
        map.insert("input.scale", self.scaler.scale.clone());
        self.priors.write_to(&mut map);
        for (i, v) in self.velocities.iter().enumerate() {
            map.insert(format!("velocity.{i}"), v.clone());
        }
        let k = self.priors.num_classes();
        map.insert("labeling.weights", row(&self.labeling.weights));
        map.insert(
            "labeling.target_labels",
            row(&self
                .labeling
                .target_labels
                .iter()
                .map(|&y| y as f64)
                .collect::<Vec<_>>()),
        );
        let conf = &self.labeling.confident;
        let mut table = Array2::zeros((conf.len(), 2 + k));
        for (mut r, c) in table.rows_mut().into_iter().zip(conf) {
            r[0] = c.index as f64;
            r[1] = c.label as f64;
            for (j, p) in c.probs.as_slice().iter().enumerate() {
                r[2 + j] = *p;
            }
        }
        map.insert("labeling.confident", table);
        let mut hist = Array2::zeros((self.history.len(), 9));
        for (mut r, h) in hist.rows_mut().into_iter().zip(&self.history) {
            let l = &h.losses;
            let vals = [
                h.step as f64,
                h.lr,
                h.alpha,
                l.class_loss,
                l.adv_loss,
                l.recon_loss,
                l.cda_loss,
                l.em_loss,
                l.total,
            ];
            for (dst, v) in r.iter_mut().zip(vals) {
                *dst = v;
            }
        }
        map.insert("history", hist);
        map
    }

    pub fn from_tensor_map(map: &TensorMap) -> Result<Self, EngineError> {
        if map.meta("kind") != Some(CHECKPOINT_KIND) {
            return Err(EngineError::Config("not a training checkpoint".into()));
        }
        let parse_meta = |key: &str| -> Result<String, EngineError> { Ok(map.require_meta(key)?.to_string()) };
        let bad = |key: &str| EngineError::Config(format!("bad checkpoint field `{key}`"));
        let step: usize = parse_meta("step")?.parse().map_err(|_| bad("step"))?;
        let epoch: usize = parse_meta("epoch")?.parse().map_err(|_| bad("epoch"))?;
        let threshold: f64 = parse_meta("threshold")?.parse().map_err(|_| bad("threshold"))?;
        let seed: u64 = parse_meta("seed")?.parse().map_err(|_| bad("seed"))?;
        let config_hash = parse_meta("config_hash")?;
        let params = ModelParams::from_tensor_map(map)?;
        let priors = ClassPriorBank::read_from(map)?;
        let dim = params.input_dim();
        let scaler = InputScaler {
            shift: map.take_shaped("input.shift", (1, dim))?,
            scale: map.take_shaped("input.scale", (1, dim))?,
        };
        let mut velocities = Vec::new();
        let mut shapes: Vec<(usize, usize)> = params.named_tensors().iter().map(|(_, t)| t.dim()).collect();
        shapes.push(priors.means.dim());
        for (i, shape) in shapes.into_iter().enumerate() {
            velocities.push(map.take_shaped(&format!("velocity.{i}"), shape)?);
        }
        let k = priors.num_classes();
        let weights = map.take("labeling.weights")?.iter().copied().collect::<Vec<_>>();
        if weights.len() != k {
            return Err(bad("labeling.weights"));
        }
        let target_labels = map
            .take("labeling.target_labels")?
            .iter()
            .map(|&y| y as usize)
            .collect();
        let table = map.take("labeling.confident")?;
        let mut confident = Vec::with_capacity(table.nrows());
        for r in table.rows() {
            if r.len() != 2 + k {
                return Err(bad("labeling.confident"));
            }
            confident.push(ConfidentTarget {
                index: r[0] as usize,
                label: r[1] as usize,
                probs: SimplexVector::new(r.iter().skip(2).copied().collect())
                    .map_err(|_| bad("labeling.confident"))?,
            });
        }
        let hist = map.take("history")?;
        if hist.ncols() != 9 && hist.nrows() > 0 {
            return Err(bad("history"));
        }
        let history = hist
            .rows()
            .into_iter()
            .map(|r| StepRecord {
                step: r[0] as usize,
                lr: r[1],
                alpha: r[2],
                losses: LossBreakdown {
                    class_loss: r[3],
                    adv_loss: r[4],
                    recon_loss: r[5],
                    cda_loss: r[6],
                    em_loss: r[7],
                    total: r[8],
                },
            })
            .collect();
        Ok(Self {
            config_hash,
            seed,
            scaler,
            params,
            priors,
            velocities,
            labeling: LabelingState {
                threshold,
                confident,
                weights,
                target_labels,
            },
            step,
            epoch,
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), EngineError> {
        Ok(self.to_tensor_map().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, EngineError> {
        Self::from_tensor_map(&TensorMap::load(path)?)
    }
}

fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("1 x n")
}

/// Hooks for streaming logs out of a run.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) {}
    fn on_reestimate(&mut self, _epoch: usize, _state: &LabelingState) {}
}

/// Observer that ignores everything.
pub struct Silent;
impl TrainObserver for Silent {}

/// Recomputes the labeling state from the current model (posterior means,
/// no sampling). `view` must already be standardized by the state's scaler. With `ast` off the weights come from averaging classifier
/// predictions over all targets instead of confident-set voting.
pub fn reestimate(state: &TrainState, config: &TrainConfig, view: &TrainView) -> Result<LabelingState, EngineError> {
    let (src_mean, _) = state.params.latent_batch(view.source_x.view())?;
    let (tgt_mean, _) = state.params.latent_batch(view.target_x.view())?;
    let mut labeling = labeling::estimate(src_mean.view(), &view.source_y, tgt_mean.view(), view.num_classes)?;
    if !config.ast {
        let probs = state.params.classify_batch(tgt_mean.view())?;
        let rows = probs
            .rows()
            .into_iter()
            .map(|r| SimplexVector::new(r.to_vec()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(NetError::from)?;
        labeling.weights = labeling::normalized_mean(&rows, view.num_classes);
    }
    Ok(labeling)
}

/// Steps in one epoch (one pass over the source set).
pub fn steps_per_epoch(config: &TrainConfig, view: &TrainView) -> usize {
    view.n_source().div_ceil(config.batch_size)
}

/// Runs a full training job from scratch.
pub fn fit(config: &TrainConfig, view: &TrainView) -> Result<TrainState, EngineError> {
    fit_with(config, view, &mut Silent)
}

pub fn fit_with(
    config: &TrainConfig,
    view: &TrainView,
    observer: &mut dyn TrainObserver,
) -> Result<TrainState, EngineError> {
    let mut state = TrainState::init(config, view)?;
    train(&mut state, config, view, config.epochs, observer)?;
    Ok(state)
}

/// Continues `state` until `until_epoch` epochs are complete.
pub fn train(
    state: &mut TrainState,
    config: &TrainConfig,
    view: &TrainView,
    until_epoch: usize,
    observer: &mut dyn TrainObserver,
) -> Result<(), EngineError> {
    config.validate()?;
    if view.n_target() == 0 {
        return Err(DataError::Empty.into());
    }
    let per_epoch = steps_per_epoch(config, view);
    let total_steps = per_epoch * config.epochs;
    let mut src_batches = BatchIterator::new(view.n_source(), config.batch_size, config.seed, Domain::Source)?;
    let mut tgt_batches = BatchIterator::new(view.n_target(), config.batch_size, config.seed, Domain::Target)?;
    let groups = state.params.groups();
    let scaled = state.scaler.apply_view(view);
    let view = &scaled;

    while state.epoch < until_epoch.min(config.epochs) {
        let epoch_end = (state.epoch + 1) * per_epoch;
        while state.step < epoch_end {
            let progress = state.step as f64 / total_steps as f64;
            let lr = lr_schedule(progress, config.lr)?;
            let alpha = config.alpha_max * alpha_schedule(progress);
            let src = src_batches.batch_at(state.step);
            let tgt = tgt_batches.batch_at(state.step);
            let record = match train_step(state, config, view, &groups, &src, &tgt, lr, alpha) {
                Ok(r) => r,
                Err(StepFailure::Diverged(reason)) => {
                    return Err(EngineError::Diverged {
                        step: state.step,
                        reason,
                        last_good: Box::new(state.clone()),
                    })
                }
                Err(StepFailure::Other(e)) => return Err(e),
            };
            observer.on_step(&record);
            state.history.push(record);
            state.step += 1;
        }
        state.epoch += 1;
        if config.pseudo_labels && state.epoch.is_multiple_of(config.reestimate_every) {
            state.labeling = reestimate(state, config, view)?;
            observer.on_reestimate(state.epoch, &state.labeling);
        }
    }
    Ok(())
}

enum StepFailure {
    Diverged(String),
    Other(EngineError),
}

impl<E: Into<EngineError>> From<E> for StepFailure {
    fn from(e: E) -> Self {
        StepFailure::Other(e.into())
    }
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    state: &mut TrainState,
    config: &TrainConfig,
    view: &TrainView,
    groups: &[ParamGroup],
    src: &[usize],
    tgt: &[usize],
    lr: f64,
    alpha: f64,
) -> Result<StepRecord, StepFailure> {
    let n = src.len() + tgt.len();
    let d = view.dim();
    let mut x = Array2::zeros((n, d));
    for (mut r, &i) in x.rows_mut().into_iter().zip(src) {
        r.assign(&view.source_x.row(i));
    }
    for (mut r, &i) in x.rows_mut().into_iter().skip(src.len()).zip(tgt) {
        r.assign(&view.target_x.row(i));
    }
    let confident = if config.pseudo_labels {
        state.labeling.confident_lookup(view.n_target())
    } else {
        vec![None; view.n_target()]
    };
    let rows = BatchRows {
        source_labels: src.iter().map(|&i| view.source_y[i]).collect(),
        target_pseudo: tgt.iter().map(|&i| confident[i]).collect(),
    };
    // the classifier only sees pseudo-labels when confident-subset voting is on
    let class_rows = if config.ast {
        rows.clone()
    } else {
        BatchRows {
            source_labels: rows.source_labels.clone(),
            target_pseudo: vec![None; tgt.len()],
        }
    };
    let weights = state.labeling.weights.clone();
    let trade = config.trade_off(alpha);

    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, &[3, state.step as u64]));
    let mut tape = Tape::new();
    let bound = state.params.bind(&mut tape);
    let prior_means = tape.leaf(state.priors.means.clone());
    let xv = tape.leaf(x);
    let latent = bound.latent(&mut tape, xv);
    let eps = Array2::from_shape_simple_fn((n, config.latent_dim), || {
        let e: f64 = StandardNormal.sample(&mut rng);
        e
    });
    let z = bound.sample(&mut tape, latent.mean, latent.logvar, eps);
    let logits = bound.class_logits(&mut tape, z);

    let mut terms = TermVars {
        class: Some(losses::class_loss(&mut tape, logits, &class_rows, &weights)?),
        ..Default::default()
    };
    if config.adv {
        let reversed = tape.grad_reverse(latent.features, 1.0);
        let mut dropout = Dropout {
            rate: config.dropout,
            rng: &mut rng,
        };
        let dl = bound.discriminator_logits(&mut tape, reversed, Some(&mut dropout));
        terms.adv = Some(losses::adv_loss(&mut tape, dl, &rows, &weights)?);
    }
    if config.use_recon() {
        let rec = bound.decode(&mut tape, z);
        terms.recon = Some(losses::recon_loss(&mut tape, rec, xv, &rows, &weights)?);
    }
    if config.use_cda() {
        let inputs = CdaInputs {
            z,
            mean: latent.mean,
            logvar: latent.logvar,
            class_logits: logits,
            prior_means,
        };
        terms.cda = Some(losses::cda_loss(
            &mut tape,
            inputs,
            &state.priors.logvars,
            &rows,
            &weights,
        )?);
    }
    if config.gamma > 0.0 {
        terms.em = Some(losses::em_loss(&mut tape, logits, &rows)?);
    }

    let breakdown = match losses::total_loss(&terms.parts(&tape), trade) {
        Ok(b) => b,
        Err(LossError::NonFinite(term)) => return Err(StepFailure::Diverged(format!("non-finite {term} loss"))),
        Err(e) => return Err(e.into()),
    };
    let total = terms.combine(&mut tape, trade).expect("class term always present");
    if !tape.scalar(total).is_finite() {
        return Err(StepFailure::Diverged("non-finite total loss".into()));
    }
    let grads = tape.backward(total);

    let mut vars = bound.vars();
    vars.push(prior_means);
    let mut grad_arrays: Vec<Array2<f64>> = Vec::with_capacity(vars.len());
    {
        let names = state.params.named_tensors();
        for (i, v) in vars.iter().enumerate() {
            let shape = if i < names.len() {
                names[i].1.dim()
            } else {
                state.priors.means.dim()
            };
            grad_arrays.push(grads.get(*v, shape));
        }
    }
    let head_lr = lr * config.head_lr_multiplier;
    let mut lrs: Vec<f64> = groups
        .iter()
        .map(|g| match g {
            ParamGroup::Backbone => lr,
            ParamGroup::Head => head_lr,
        })
        .collect();
    lrs.push(head_lr);

    let names: Vec<String> = state
        .params
        .named_tensors()
        .into_iter()
        .map(|(n, _)| n)
        .chain(std::iter::once("prior.means".to_string()))
        .collect();
    let TrainState {
        params,
        priors,
        velocities,
        ..
    } = state;
    let mut tensors = params.tensors_mut();
    tensors.push(&mut priors.means);
    if let Err(i) = sgd_step(&mut tensors, &grad_arrays, velocities, &lrs, config.momentum) {
        return Err(StepFailure::Diverged(format!("non-finite gradient for `{}`", names[i])));
    }

    Ok(StepRecord {
        step: state.step,
        lr,
        alpha: trade.alpha,
        losses: breakdown,
    })
}

/// Posterior means for every row of raw inputs `x`.
pub fn mean_latents(state: &TrainState, x: &Array2<f64>) -> Result<Array2<f64>, EngineError> {
    Ok(state.params.latent_batch(state.scaler.apply(x).view())?.0)
}

/// Hard classifier predictions from posterior means of raw inputs `x`.
pub fn predict(state: &TrainState, x: &Array2<f64>) -> Result<Vec<usize>, EngineError> {
    let mean = mean_latents(state, x)?;
    let probs = state.params.classify_batch(mean.view())?;
    Ok(probs
        .axis_iter(Axis(0))
        .map(|r| crate::math::argmax(r.as_slice().expect("contiguous row")))
        .collect())
}
