//! Central-difference gradient oracle for every tape op, every sub-network
//! and every loss term, on tiny random instances.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::losses::{self, BatchRows, CdaInputs, TermVars, TradeOff};
use crate::networks::{ClassPriorBank, ModelParams, NetworkShape, LEAKY_SLOPE};
use crate::tape::{Tape, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so that two vanishing gradients compare as equal.
pub const NORM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    /// Largest per-tensor `|a - n| / max(|a|, |n|, floor)` in the 2-norm.
    pub rel_error: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {:<32} rel_err={:.3e}", self.name, self.rel_error)
    }
}

/// Builds the computation from input values; returns the tape, the output
/// and the leaf of each input.
pub type Builder<'a> = dyn Fn(&[Array2<f64>]) -> (Tape, Var, Vec<Var>) + 'a;

/// Compares the reverse-mode gradient of `sum(output * proj)` with
/// `sign * central difference` for every input. `sign` is -1 when the path
/// runs through a gradient-reversal layer with unit strength.
pub fn check(name: &str, inputs: &[Array2<f64>], sign: f64, build: &Builder<'_>) -> GradCheck {
    let (tape, out, _) = build(inputs);
    let shape = tape.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37);
    let proj = random(&mut rng, shape);
    let objective = |values: &[Array2<f64>]| -> (Tape, Var, Vec<Var>) {
        let (mut tape, out, leaves) = build(values);
        let projected = tape.mul_const(out, proj.clone());
        let rows = tape.row_sum(projected);
        let total = tape.weighted_sum(rows, vec![1.0; shape.0]);
        (tape, total, leaves)
    };

    let (tape, total, leaves) = objective(inputs);
    let grads = tape.backward(total);
    let mut worst = 0.0f64;
    let mut values = inputs.to_vec();
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(*leaf, inputs[k].dim());
        let mut numeric = Array2::zeros(inputs[k].dim());
        for idx in 0..inputs[k].len() {
            let cell = (idx / inputs[k].ncols(), idx % inputs[k].ncols());
            let orig = values[k][cell];
            values[k][cell] = orig + STEP;
            let (t, v, _) = objective(&values);
            let up = t.scalar(v);
            values[k][cell] = orig - STEP;
            let (t, v, _) = objective(&values);
            let down = t.scalar(v);
            values[k][cell] = orig;
            numeric[cell] = sign * (up - down) / (2.0 * STEP);
        }
        let diff = norm(&(&analytic - &numeric));
        let scale = norm(&analytic).max(norm(&numeric)).max(NORM_FLOOR);
        let err = diff / scale;
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
    }
    GradCheck {
        name: name.to_string(),
        rel_error: worst,
        passed: worst < TOLERANCE,
    }
}

fn norm(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn random(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

/// Values bounded away from zero so kinked ops are differentiable there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || {
        let v: f64 = rng.random_range(0.1..1.5);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn leaves(tape: &mut Tape, values: &[Array2<f64>]) -> Vec<Var> {
    values.iter().map(|v| tape.leaf(v.clone())).collect()
}

/// Checks an op on leaves built directly from the inputs.
fn op_check(name: &str, inputs: Vec<Array2<f64>>, f: impl Fn(&mut Tape, &[Var]) -> Var) -> GradCheck {
    check(name, &inputs, 1.0, &|values| {
        let mut tape = Tape::new();
        let vars = leaves(&mut tape, values);
        let out = f(&mut tape, &vars);
        (tape, out, vars)
    })
}

const N: usize = 5;
const D: usize = 4;
const LATENT: usize = 3;
const K: usize = 3;
const WIDTH: usize = 8;

pub fn tiny_shape() -> NetworkShape {
    NetworkShape {
        input_dim: D,
        latent_dim: LATENT,
        num_classes: K,
        encoder_hidden: WIDTH,
        bottleneck: WIDTH,
        decoder_hidden: WIDTH,
        classifier_hidden: WIDTH,
        discriminator_hidden: WIDTH,
    }
}

fn tiny_rows() -> BatchRows {
    BatchRows {
        source_labels: vec![0, 2, 1],
        target_pseudo: vec![Some(1), None],
    }
}

const WEIGHTS: [f64; K] = [1.0, 0.4, 0.7];

fn with_params(template: &ModelParams, values: &[Array2<f64>]) -> ModelParams {
    let mut params = template.clone();
    for (dst, src) in params.tensors_mut().into_iter().zip(values) {
        dst.assign(src);
    }
    params
}

fn param_values(params: &ModelParams) -> Vec<Array2<f64>> {
    params.named_tensors().into_iter().map(|(_, t)| t.clone()).collect()
}

fn op_checks(rng: &mut ChaCha8Rng) -> Vec<GradCheck> {
    let a = random(rng, (N, D));
    let b = random(rng, (N, D));
    let w = random(rng, (D, LATENT));
    let bias = random(rng, (1, D));
    let mask = random(rng, (N, D));
    let col = random(rng, (N, 1));
    let kinked = away_from_zero(rng, (N, D));
    let logvars = random(rng, (K, LATENT)).mapv(|v| 0.3 * v);
    let idx: Vec<usize> = (0..N).map(|i| i % D).collect();
    let coeffs: Vec<f64> = (0..N).map(|i| 0.5 - i as f64 * 0.3).collect();

    vec![
        op_check("op.matmul", vec![a.clone(), w], |t, v| t.matmul(v[0], v[1])),
        op_check("op.add_row", vec![a.clone(), bias], |t, v| t.add_row(v[0], v[1])),
        op_check("op.add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1])),
        op_check("op.sub", vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1])),
        op_check("op.mul", vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1])),
        op_check("op.scale", vec![a.clone()], |t, v| t.scale(v[0], -1.7)),
        op_check("op.add_scalar", vec![a.clone()], |t, v| t.add_scalar(v[0], 0.3)),
        op_check("op.mul_const", vec![a.clone()], move |t, v| {
            t.mul_const(v[0], mask.clone())
        }),
        op_check("op.leaky_relu", vec![kinked.clone()], |t, v| {
            t.leaky_relu(v[0], LEAKY_SLOPE)
        }),
        op_check("op.sigmoid", vec![a.clone()], |t, v| t.sigmoid(v[0])),
        op_check("op.softplus", vec![a.clone()], |t, v| t.softplus(v[0])),
        op_check("op.exp", vec![a.clone()], |t, v| t.exp(v[0])),
        op_check("op.square", vec![a.clone()], |t, v| t.square(v[0])),
        op_check("op.softmax", vec![a.clone()], |t, v| t.softmax(v[0])),
        op_check("op.log_softmax", vec![a.clone()], |t, v| t.log_softmax(v[0])),
        op_check("op.row_sum", vec![a.clone()], |t, v| t.row_sum(v[0])),
        op_check("op.row_norm", vec![kinked], |t, v| t.row_norm(v[0])),
        op_check("op.broadcast_cols", vec![col.clone()], |t, v| t.broadcast_cols(v[0], 3)),
        op_check("op.gather", vec![a.clone()], move |t, v| t.gather(v[0], idx.clone())),
        op_check("op.weighted_sum", vec![col], move |t, v| {
            t.weighted_sum(v[0], coeffs.clone())
        }),
        op_check(
            "op.gaussian_log_density",
            vec![random(rng, (N, LATENT)), random(rng, (K, LATENT))],
            move |t, v| t.gaussian_log_density(v[0], v[1], &logvars),
        ),
        check("op.grad_reverse", std::slice::from_ref(&a), -1.0, &|values| {
            let mut tape = Tape::new();
            let vars = leaves(&mut tape, values);
            let sq = tape.square(vars[0]);
            let out = tape.grad_reverse(sq, 1.0);
            (tape, out, vars)
        }),
        check("op.grad_reverse_scaled", &[a], -0.5, &|values| {
            let mut tape = Tape::new();
            let vars = leaves(&mut tape, values);
            let out = tape.grad_reverse(vars[0], 0.5);
            (tape, out, vars)
        }),
    ]
}

fn network_checks(rng: &mut ChaCha8Rng) -> Vec<GradCheck> {
    let params = ModelParams::init(&tiny_shape(), rng).expect("tiny shape is valid");
    let x = random(rng, (N, D));
    let eps = random(rng, (N, LATENT));
    let z = random(rng, (N, LATENT));
    let f = random(rng, (N, WIDTH));
    let values = param_values(&params);

    let run = |name: &str, forward: &dyn Fn(&mut Tape, &crate::networks::BoundModel) -> Var| {
        check(name, &values, 1.0, &|vals| {
            let p = with_params(&params, vals);
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape);
            let out = forward(&mut tape, &bound);
            (tape, out, bound.vars())
        })
    };

    let mut out = vec![
        run("net.encoder", &|t, m| {
            let xv = t.leaf(x.clone());
            m.encode(t, xv)
        }),
        run("net.latent_mean", &|t, m| {
            let xv = t.leaf(x.clone());
            m.latent(t, xv).mean
        }),
        run("net.latent_logvar", &|t, m| {
            let xv = t.leaf(x.clone());
            m.latent(t, xv).logvar
        }),
        run("net.sample", &|t, m| {
            let xv = t.leaf(x.clone());
            let l = m.latent(t, xv);
            m.sample(t, l.mean, l.logvar, eps.clone())
        }),
        run("net.decoder", &|t, m| {
            let zv = t.leaf(z.clone());
            m.decode(t, zv)
        }),
        run("net.classifier", &|t, m| {
            let zv = t.leaf(z.clone());
            m.class_logits(t, zv)
        }),
        run("net.discriminator", &|t, m| {
            let fv = t.leaf(f.clone());
            m.discriminator_logits::<ChaCha8Rng>(t, fv, None)
        }),
    ];

    // inputs as well as parameters
    out.push(check(
        "net.sample_inputs",
        &[random(rng, (N, LATENT)), random(rng, (N, LATENT))],
        1.0,
        &|vals| {
            let mut tape = Tape::new();
            let vars = leaves(&mut tape, vals);
            let bound = params.bind(&mut tape);
            let s = bound.sample(&mut tape, vars[0], vars[1], eps.clone());
            (tape, s, vars)
        },
    ));
    out
}

fn loss_checks(rng: &mut ChaCha8Rng) -> Vec<GradCheck> {
    let rows = tiny_rows();
    let logits1 = random(rng, (N, 1));
    let logits = random(rng, (N, K));
    let recon = random(rng, (N, D));
    let x = random(rng, (N, D));
    let prior_logvars = Array2::zeros((K, LATENT));
    let cda_inputs = vec![
        random(rng, (N, LATENT)),
        random(rng, (N, LATENT)),
        random(rng, (N, LATENT)).mapv(|v| 0.3 * v),
        random(rng, (N, K)),
        random(rng, (K, LATENT)).mapv(|v| 0.1 * v),
    ];
    vec![
        op_check("loss.adv", vec![logits1], |t, v| {
            losses::adv_loss(t, v[0], &rows, &WEIGHTS).expect("valid instance")
        }),
        op_check("loss.class", vec![logits.clone()], |t, v| {
            losses::class_loss(t, v[0], &rows, &WEIGHTS).expect("valid instance")
        }),
        op_check("loss.recon", vec![recon], |t, v| {
            let xv = t.leaf(x.clone());
            losses::recon_loss(t, v[0], xv, &rows, &WEIGHTS).expect("valid instance")
        }),
        op_check("loss.cda", cda_inputs, |t, v| {
            let inputs = CdaInputs {
                z: v[0],
                mean: v[1],
                logvar: v[2],
                class_logits: v[3],
                prior_means: v[4],
            };
            losses::cda_loss(t, inputs, &prior_logvars, &rows, &WEIGHTS).expect("valid instance")
        }),
        op_check("loss.em", vec![logits], |t, v| {
            losses::em_loss(t, v[0], &rows).expect("valid instance")
        }),
    ]
}

/// Full objective with every term active, fixed noise and no dropout.
/// `reversal` is the gradient-reversal strength on the adversarial path.
fn objective(
    params: &ModelParams,
    priors: &ClassPriorBank,
    values: &[Array2<f64>],
    x: &Array2<f64>,
    eps: &Array2<f64>,
    reversal: f64,
    adv_only: bool,
) -> (Tape, Var, Vec<Var>) {
    let rows = tiny_rows();
    let n_params = values.len() - 1;
    let p = with_params(params, &values[..n_params]);
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let prior_means = tape.leaf(values[n_params].clone());
    let xv = tape.leaf(x.clone());
    let latent = bound.latent(&mut tape, xv);
    let reversed = tape.grad_reverse(latent.features, reversal);
    let dl = bound.discriminator_logits::<ChaCha8Rng>(&mut tape, reversed, None);
    let adv = losses::adv_loss(&mut tape, dl, &rows, &WEIGHTS).expect("valid instance");
    let mut vars = bound.vars();
    vars.push(prior_means);
    if adv_only {
        return (tape, adv, vars);
    }
    let z = bound.sample(&mut tape, latent.mean, latent.logvar, eps.clone());
    let logits = bound.class_logits(&mut tape, z);
    let rec = bound.decode(&mut tape, z);
    let terms = TermVars {
        class: Some(losses::class_loss(&mut tape, logits, &rows, &WEIGHTS).expect("valid instance")),
        adv: Some(adv),
        recon: Some(losses::recon_loss(&mut tape, rec, xv, &rows, &WEIGHTS).expect("valid instance")),
        cda: Some(
            losses::cda_loss(
                &mut tape,
                CdaInputs {
                    z,
                    mean: latent.mean,
                    logvar: latent.logvar,
                    class_logits: logits,
                    prior_means,
                },
                &priors.logvars,
                &rows,
                &WEIGHTS,
            )
            .expect("valid instance"),
        ),
        em: Some(losses::em_loss(&mut tape, logits, &rows).expect("valid instance")),
    };
    let trade = TradeOff {
        alpha: 0.7,
        beta: 0.8,
        gamma: 0.1,
    };
    let total = terms.combine(&mut tape, trade).expect("terms present");
    (tape, total, vars)
}

fn objective_checks(rng: &mut ChaCha8Rng) -> Vec<GradCheck> {
    let params = ModelParams::init(&tiny_shape(), rng).expect("tiny shape is valid");
    let priors = ClassPriorBank::init(K, LATENT, rng);
    let x = random(rng, (N, D));
    let eps = random(rng, (N, LATENT));
    let mut values = param_values(&params);
    values.push(priors.means.clone());
    let enc_layers = params.encoder.layers.len();

    // reversal of -1 makes the backward pass the plain derivative
    let total = check("objective.total", &values, 1.0, &|vals| {
        objective(&params, &priors, vals, &x, &eps, -1.0, false)
    });

    // through a unit reversal the encoder receives minus the adversarial gradient
    let enc_values = values[..2 * enc_layers].to_vec();
    let reversed = check("objective.adv_reversed_encoder", &enc_values, -1.0, &|vals| {
        let mut all = values.clone();
        all[..vals.len()].clone_from_slice(vals);
        let (tape, out, vars) = objective(&params, &priors, &all, &x, &eps, 1.0, true);
        (tape, out, vars[..vals.len()].to_vec())
    });
    vec![total, reversed]
}

/// Runs every check with a fixed seed.
pub fn run_suite() -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = op_checks(&mut rng);
    out.extend(network_checks(&mut rng));
    out.extend(loss_checks(&mut rng));
    out.extend(objective_checks(&mut rng));
    out
}
