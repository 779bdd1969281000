//! Encoder, Gaussian posterior heads, reparameterized sampler, decoder,
//! classifier and domain discriminator, all as small MLPs.
//!
//! Two evaluation paths exist. The plain path (`ModelParams::forward_latent`,
//! `decode`, ...) works on single samples or batches, runs in evaluation mode
//! and reports the first layer that produced a non-finite value. The tape
//! path (`BoundModel`) records the same computation on a [`Tape`] so that
//! gradients can be taken.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::math::{self, DiagGaussianParams, MathError, SimplexVector};
use crate::tape::{self, Tape, Var};
use crate::tensors::{TensorFileError, TensorMap};

/// Negative-side slope of the hidden-layer activation.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Posterior parameters `q(z* | x)` for one sample.
pub type LatentGaussian = DiagGaussianParams;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite activation in layer `{layer}`")]
    NonFinite { layer: String },
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    File(#[from] TensorFileError),
}

/// Layer sizes for every sub-network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkShape {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub num_classes: usize,
    pub encoder_hidden: usize,
    pub bottleneck: usize,
    pub decoder_hidden: usize,
    pub classifier_hidden: usize,
    pub discriminator_hidden: usize,
}

impl NetworkShape {
    pub fn validate(&self) -> Result<(), NetError> {
        let fields = [
            ("input_dim", self.input_dim),
            ("latent_dim", self.latent_dim),
            ("num_classes", self.num_classes),
            ("encoder_hidden", self.encoder_hidden),
            ("bottleneck", self.bottleneck),
            ("decoder_hidden", self.decoder_hidden),
            ("classifier_hidden", self.classifier_hidden),
            ("discriminator_hidden", self.discriminator_hidden),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(NetError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.num_classes < 2 {
            return Err(NetError::Config("need at least two classes".into()));
        }
        Ok(())
    }
}

/// Fully connected layer, `y = x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl Linear {
    /// Weights drawn from `N(0, gain^2 / fan_in)`, zero bias.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, gain: f64, rng: &mut R) -> Self {
        let std = gain / (inputs as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((inputs, outputs), || {
            let n: f64 = StandardNormal.sample(rng);
            n * std
        });
        Self {
            weight,
            bias: Array2::zeros((1, outputs)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }
}

/// Stack of linear layers with leaky-rectifier activations between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    /// Apply the activation after the final layer as well.
    pub activate_output: bool,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], activate_output: bool, rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], 2f64.sqrt(), rng))
            .collect();
        Self {
            layers,
            activate_output,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(Linear::out_dim).unwrap_or(0)
    }

    /// Evaluation-mode forward pass; `name` labels layers in errors.
    pub fn forward(&self, x: ArrayView2<f64>, name: &str) -> Result<Array2<f64>, NetError> {
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(h.view());
            if i < last || self.activate_output {
                h.mapv_inplace(leaky_relu);
            }
            if h.iter().any(|v| !v.is_finite()) {
                return Err(NetError::NonFinite {
                    layer: format!("{name}.{i}"),
                });
            }
        }
        Ok(h)
    }
}

fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

/// Which learning-rate group a parameter tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Encoder layers before the bottleneck.
    Backbone,
    /// Bottleneck, posterior heads, decoder, classifier, discriminator, priors.
    Head,
}

/// All network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `d -> hidden -> hidden -> bottleneck`, activated output.
    pub encoder: Mlp,
    pub mean_head: Linear,
    /// Emits log-variance directly.
    pub logvar_head: Linear,
    /// `d' -> hidden -> d`, linear output.
    pub decoder: Mlp,
    /// `d' -> hidden -> |C_s|` logits.
    pub classifier: Mlp,
    /// `bottleneck -> hidden -> hidden -> 1` logit.
    pub discriminator: Mlp,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(shape: &NetworkShape, rng: &mut R) -> Result<Self, NetError> {
        shape.validate()?;
        let encoder = Mlp::init(
            &[
                shape.input_dim,
                shape.encoder_hidden,
                shape.encoder_hidden,
                shape.bottleneck,
            ],
            true,
            rng,
        );
        let mean_head = Linear::init(shape.bottleneck, shape.latent_dim, 1.0, rng);
        let logvar_head = Linear::init(shape.bottleneck, shape.latent_dim, 0.1, rng);
        let decoder = Mlp::init(&[shape.latent_dim, shape.decoder_hidden, shape.input_dim], false, rng);
        let classifier = Mlp::init(
            &[shape.latent_dim, shape.classifier_hidden, shape.num_classes],
            false,
            rng,
        );
        let discriminator = Mlp::init(
            &[
                shape.bottleneck,
                shape.discriminator_hidden,
                shape.discriminator_hidden,
                1,
            ],
            false,
            rng,
        );
        Ok(Self {
            encoder,
            mean_head,
            logvar_head,
            decoder,
            classifier,
            discriminator,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.out_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.mean_head.out_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.out_dim()
    }

    /// Every parameter tensor with its name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        push_mlp(&mut out, "encoder", &self.encoder);
        push_linear(&mut out, "mean_head", &self.mean_head);
        push_linear(&mut out, "logvar_head", &self.logvar_head);
        push_mlp(&mut out, "decoder", &self.decoder);
        push_mlp(&mut out, "classifier", &self.classifier);
        push_mlp(&mut out, "discriminator", &self.discriminator);
        out
    }

    /// Mutable view of the tensors, same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = Vec::new();
        for l in &mut self.encoder.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for l in [&mut self.mean_head, &mut self.logvar_head] {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for mlp in [&mut self.decoder, &mut self.classifier, &mut self.discriminator] {
            for l in &mut mlp.layers {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out
    }

    /// Learning-rate group per tensor, same order as [`Self::named_tensors`].
    pub fn groups(&self) -> Vec<ParamGroup> {
        let backbone_layers = self.encoder.layers.len() - 1;
        let total = self.named_tensors().len();
        (0..total)
            .map(|i| {
                if i < 2 * backbone_layers {
                    ParamGroup::Backbone
                } else {
                    ParamGroup::Head
                }
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, what: &'static str, expected: usize, got: usize) -> Result<(), NetError> {
        if expected != got {
            return Err(NetError::Dimension { what, expected, got });
        }
        Ok(())
    }

    /// Encoder features for a batch of inputs (`n x d -> n x bottleneck`).
    pub fn encode_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NetError> {
        self.check_input("encoder input", self.input_dim(), x.ncols())?;
        self.encoder.forward(x, "encoder")
    }

    /// Posterior means and log-variances for a batch of inputs.
    pub fn latent_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>), NetError> {
        let f = self.encode_batch(x)?;
        let mean = self.mean_head.forward(f.view());
        check_finite(&mean, "mean_head")?;
        let logvar = self.logvar_head.forward(f.view());
        check_finite(&logvar, "logvar_head")?;
        Ok((mean, logvar))
    }

    /// Posterior `q(z* | x)` for one input.
    pub fn forward_latent(&self, x: &[f64]) -> Result<LatentGaussian, NetError> {
        let (mean, logvar) = self.latent_batch(row_view(x).view())?;
        Ok(DiagGaussianParams::new(mean.row(0).to_vec(), logvar.row(0).to_vec())?)
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        Ok(self.encode_batch(row_view(x).view())?.row(0).to_vec())
    }

    pub fn decode_batch(&self, z: ArrayView2<f64>) -> Result<Array2<f64>, NetError> {
        self.check_input("decoder input", self.latent_dim(), z.ncols())?;
        self.decoder.forward(z, "decoder")
    }

    /// Reconstruction `dec(z)` of length `d`.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>, NetError> {
        Ok(self.decode_batch(row_view(z).view())?.row(0).to_vec())
    }

    /// Class logits for a batch of latents.
    pub fn class_logits_batch(&self, z: ArrayView2<f64>) -> Result<Array2<f64>, NetError> {
        self.check_input("classifier input", self.latent_dim(), z.ncols())?;
        self.classifier.forward(z, "classifier")
    }

    /// Class probabilities for a batch of latents.
    pub fn classify_batch(&self, z: ArrayView2<f64>) -> Result<Array2<f64>, NetError> {
        Ok(tape::softmax_rows(&self.class_logits_batch(z)?))
    }

    /// `q(y | z*)` over the source classes.
    pub fn classify(&self, z: &[f64]) -> Result<SimplexVector, NetError> {
        let logits = self.class_logits_batch(row_view(z).view())?;
        Ok(math::softmax(logits.row(0).as_slice().expect("row is contiguous"))?)
    }

    /// Domain probability (source = 1) for an encoder feature, dropout off.
    pub fn discriminate(&self, f: &[f64]) -> Result<f64, NetError> {
        self.check_input("discriminator input", self.feature_dim(), f.len())?;
        let logit = self.discriminator.forward(row_view(f).view(), "discriminator")?;
        Ok(tape::sigmoid(logit[[0, 0]]))
    }

    pub fn to_tensor_map(&self) -> TensorMap {
        let mut map = TensorMap::new();
        for (name, t) in self.named_tensors() {
            map.insert(name, t.clone());
        }
        map
    }

    /// Rebuilds parameters from a tensor map, checking that the shapes
    /// chain together.
    pub fn from_tensor_map(map: &TensorMap) -> Result<Self, NetError> {
        let encoder = read_mlp(map, "encoder", true)?;
        let mean_head = read_linear(map, "mean_head")?;
        let logvar_head = read_linear(map, "logvar_head")?;
        let decoder = read_mlp(map, "decoder", false)?;
        let classifier = read_mlp(map, "classifier", false)?;
        let discriminator = read_mlp(map, "discriminator", false)?;
        let params = Self {
            encoder,
            mean_head,
            logvar_head,
            decoder,
            classifier,
            discriminator,
        };
        params.check_shapes()?;
        Ok(params)
    }

    fn check_shapes(&self) -> Result<(), NetError> {
        let fb = self.feature_dim();
        let latent = self.latent_dim();
        let pairs = [
            ("mean_head input", fb, self.mean_head.in_dim()),
            ("logvar_head input", fb, self.logvar_head.in_dim()),
            ("logvar_head output", latent, self.logvar_head.out_dim()),
            ("decoder input", latent, self.decoder.in_dim()),
            ("decoder output", self.input_dim(), self.decoder.out_dim()),
            ("classifier input", latent, self.classifier.in_dim()),
            ("discriminator input", fb, self.discriminator.in_dim()),
            ("discriminator output", 1, self.discriminator.out_dim()),
        ];
        for (what, expected, got) in pairs {
            self.check_input(what, expected, got)?;
        }
        for (name, mlp) in [
            ("encoder", &self.encoder),
            ("decoder", &self.decoder),
            ("classifier", &self.classifier),
            ("discriminator", &self.discriminator),
        ] {
            for (i, w) in mlp.layers.windows(2).enumerate() {
                if w[0].out_dim() != w[1].in_dim() {
                    return Err(NetError::Config(format!(
                        "{name}.{i} output does not match {name}.{} input",
                        i + 1
                    )));
                }
            }
            for (i, l) in mlp.layers.iter().enumerate() {
                if l.bias.dim() != (1, l.out_dim()) {
                    return Err(NetError::Config(format!("{name}.{i}.bias has wrong shape")));
                }
            }
        }
        Ok(())
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let bind_mlp = |mlp: &Mlp, tape: &mut Tape| BoundMlp {
            layers: mlp.layers.iter().map(|l| bind_linear(l, tape)).collect(),
            activate_output: mlp.activate_output,
        };
        let encoder = bind_mlp(&self.encoder, tape);
        let mean_head = bind_linear(&self.mean_head, tape);
        let logvar_head = bind_linear(&self.logvar_head, tape);
        let decoder = bind_mlp(&self.decoder, tape);
        let classifier = bind_mlp(&self.classifier, tape);
        let discriminator = bind_mlp(&self.discriminator, tape);
        BoundModel {
            encoder,
            mean_head,
            logvar_head,
            decoder,
            classifier,
            discriminator,
        }
    }
}

fn row_view(x: &[f64]) -> Array2<f64> {
    Array1::from(x.to_vec()).insert_axis(Axis(0))
}

fn check_finite(a: &Array2<f64>, layer: &str) -> Result<(), NetError> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(NetError::NonFinite {
            layer: layer.to_string(),
        });
    }
    Ok(())
}

fn push_linear<'a>(out: &mut Vec<(String, &'a Array2<f64>)>, name: &str, l: &'a Linear) {
    out.push((format!("{name}.weight"), &l.weight));
    out.push((format!("{name}.bias"), &l.bias));
}

fn push_mlp<'a>(out: &mut Vec<(String, &'a Array2<f64>)>, name: &str, mlp: &'a Mlp) {
    for (i, l) in mlp.layers.iter().enumerate() {
        push_linear(out, &format!("{name}.{i}"), l);
    }
}

fn read_linear(map: &TensorMap, name: &str) -> Result<Linear, NetError> {
    let weight = map.take(&format!("{name}.weight"))?;
    let bias = map.take_shaped(&format!("{name}.bias"), (1, weight.ncols()))?;
    Ok(Linear { weight, bias })
}

fn read_mlp(map: &TensorMap, name: &str, activate_output: bool) -> Result<Mlp, NetError> {
    let mut layers = Vec::new();
    while map.get(&format!("{name}.{}.weight", layers.len())).is_some() {
        layers.push(read_linear(map, &format!("{name}.{}", layers.len()))?);
    }
    if layers.is_empty() {
        return Err(TensorFileError::Missing(format!("{name}.0.weight")).into());
    }
    Ok(Mlp {
        layers,
        activate_output,
    })
}

/// Reparameterized draw `z* = mean + exp(logvar / 2) * eps`.
pub fn sample_latent(g: &LatentGaussian, eps: &[f64]) -> Result<Vec<f64>, NetError> {
    if eps.len() != g.dim() {
        return Err(NetError::Dimension {
            what: "noise",
            expected: g.dim(),
            got: eps.len(),
        });
    }
    Ok(g.mean
        .iter()
        .zip(&g.logvar)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// Gradient reversal: identity forward, cotangent scaled by `-lambda` backward.
pub fn grad_reverse(tape: &mut Tape, f: Var, lambda: f64) -> Var {
    tape.grad_reverse(f, lambda)
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

fn bind_linear(l: &Linear, tape: &mut Tape) -> LinearVars {
    LinearVars {
        weight: tape.leaf(l.weight.clone()),
        bias: tape.leaf(l.bias.clone()),
    }
}

#[derive(Debug, Clone)]
pub struct BoundMlp {
    pub layers: Vec<LinearVars>,
    pub activate_output: bool,
}

/// Dropout applied after each hidden activation of the discriminator.
pub struct Dropout<'a, R: Rng + ?Sized> {
    pub rate: f64,
    pub rng: &'a mut R,
}

impl BoundMlp {
    fn forward<R: Rng + ?Sized>(&self, tape: &mut Tape, x: Var, mut dropout: Option<&mut Dropout<'_, R>>) -> Var {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            let pre = tape.matmul(h, l.weight);
            h = tape.add_row(pre, l.bias);
            if i < last || self.activate_output {
                h = tape.leaky_relu(h, LEAKY_SLOPE);
            }
            if i < last {
                if let Some(d) = dropout.as_deref_mut() {
                    if d.rate > 0.0 {
                        let keep = 1.0 - d.rate;
                        let (rows, cols) = tape.shape(h);
                        let mask = Array2::from_shape_simple_fn((rows, cols), || {
                            if d.rng.random::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        });
                        h = tape.mul_const(h, mask);
                    }
                }
            }
        }
        h
    }
}

/// Tape-recorded posterior for a batch.
#[derive(Debug, Clone, Copy)]
pub struct LatentVars {
    pub features: Var,
    pub mean: Var,
    pub logvar: Var,
}

/// [`ModelParams`] recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub encoder: BoundMlp,
    pub mean_head: LinearVars,
    pub logvar_head: LinearVars,
    pub decoder: BoundMlp,
    pub classifier: BoundMlp,
    pub discriminator: BoundMlp,
}

impl BoundModel {
    /// Parameter leaves in [`ModelParams::named_tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        let mut push = |l: &LinearVars| {
            out.push(l.weight);
            out.push(l.bias);
        };
        self.encoder.layers.iter().for_each(&mut push);
        push(&self.mean_head);
        push(&self.logvar_head);
        self.decoder.layers.iter().for_each(&mut push);
        self.classifier.layers.iter().for_each(&mut push);
        self.discriminator.layers.iter().for_each(&mut push);
        out
    }

    pub fn encode(&self, tape: &mut Tape, x: Var) -> Var {
        self.encoder.forward::<rand_chacha::ChaCha8Rng>(tape, x, None)
    }

    pub fn latent(&self, tape: &mut Tape, x: Var) -> LatentVars {
        let features = self.encode(tape, x);
        let m = tape.matmul(features, self.mean_head.weight);
        let mean = tape.add_row(m, self.mean_head.bias);
        let l = tape.matmul(features, self.logvar_head.weight);
        let logvar = tape.add_row(l, self.logvar_head.bias);
        LatentVars { features, mean, logvar }
    }

    /// `z* = mean + exp(logvar / 2) * eps`, differentiable in mean and logvar.
    pub fn sample(&self, tape: &mut Tape, mean: Var, logvar: Var, eps: Array2<f64>) -> Var {
        let half = tape.scale(logvar, 0.5);
        let std = tape.exp(half);
        let noise = tape.mul_const(std, eps);
        tape.add(mean, noise)
    }

    pub fn decode(&self, tape: &mut Tape, z: Var) -> Var {
        self.decoder.forward::<rand_chacha::ChaCha8Rng>(tape, z, None)
    }

    pub fn class_logits(&self, tape: &mut Tape, z: Var) -> Var {
        self.classifier.forward::<rand_chacha::ChaCha8Rng>(tape, z, None)
    }

    /// Discriminator logit (`n x 1`); pass `None` for evaluation mode.
    pub fn discriminator_logits<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        features: Var,
        dropout: Option<&mut Dropout<'_, R>>,
    ) -> Var {
        self.discriminator.forward(tape, features, dropout)
    }
}

/// Per-class Gaussian priors `p(z | y) = N(mu_y, diag(exp(logvar_y)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPriorBank {
    /// `|C_s| x d'`, learnable.
    pub means: Array2<f64>,
    /// `|C_s| x d'`, held fixed at zero (unit variance).
    pub logvars: Array2<f64>,
}

impl ClassPriorBank {
    /// Means from `0.1 * N(0, 1)`, unit variances.
    pub fn init<R: Rng + ?Sized>(num_classes: usize, latent_dim: usize, rng: &mut R) -> Self {
        let means = Array2::from_shape_simple_fn((num_classes, latent_dim), || {
            let n: f64 = StandardNormal.sample(rng);
            0.1 * n
        });
        Self {
            means,
            logvars: Array2::zeros((num_classes, latent_dim)),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.means.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn class_params(&self, y: usize) -> DiagGaussianParams {
        DiagGaussianParams {
            mean: self.means.row(y).to_vec(),
            logvar: self.logvars.row(y).to_vec(),
        }
    }

    pub fn write_to(&self, map: &mut TensorMap) {
        map.insert("prior.means", self.means.clone());
        map.insert("prior.logvars", self.logvars.clone());
    }

    pub fn read_from(map: &TensorMap) -> Result<Self, NetError> {
        let means = map.take("prior.means")?;
        let logvars = map.take_shaped("prior.logvars", means.dim())?;
        Ok(Self { means, logvars })
    }
}
