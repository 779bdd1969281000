//! Loss terms of the adaptation objective, recorded on a [`Tape`].
//!
//! A mini-batch is laid out as source rows followed by target rows
//! ([`BatchRows`]). Each loss reduces per-row quantities with a coefficient
//! vector, so rows that must not contribute simply get a zero coefficient.

use std::f64::consts::PI;

use ndarray::Array2;
use thiserror::Error;

use crate::tape::{Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("source batch is empty")]
    EmptySource,
    #[error("target batch is empty")]
    EmptyTarget,
    #[error("{what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("non-finite {0} loss")]
    NonFinite(&'static str),
    #[error("negative trade-off weight {name} = {value}")]
    NegativeWeight { name: &'static str, value: f64 },
}

/// Row layout of a mini-batch: `source_labels.len()` source rows first, then
/// one row per target sample. A target row carries its pseudo-label when the
/// sample is in the confident set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchRows {
    pub source_labels: Vec<usize>,
    pub target_pseudo: Vec<Option<usize>>,
}

impl BatchRows {
    pub fn n_source(&self) -> usize {
        self.source_labels.len()
    }

    pub fn n_target(&self) -> usize {
        self.target_pseudo.len()
    }

    pub fn len(&self) -> usize {
        self.n_source() + self.n_target()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_confident(&self) -> usize {
        self.target_pseudo.iter().filter(|p| p.is_some()).count()
    }

    fn check(&self, tape: &Tape, v: Var, what: &'static str, cols: Option<usize>) -> Result<(), LossError> {
        let (rows, c) = tape.shape(v);
        if rows != self.len() {
            return Err(LossError::Dimension {
                what,
                expected: self.len(),
                got: rows,
            });
        }
        if let Some(cols) = cols {
            if c != cols {
                return Err(LossError::Dimension {
                    what,
                    expected: cols,
                    got: c,
                });
            }
        }
        Ok(())
    }

    fn check_labels(&self, classes: usize) -> Result<(), LossError> {
        let labels = self.source_labels.iter().chain(self.target_pseudo.iter().flatten());
        for &label in labels {
            if label >= classes {
                return Err(LossError::Label { label, classes });
            }
        }
        Ok(())
    }

    fn require_source(&self) -> Result<(), LossError> {
        if self.n_source() == 0 {
            return Err(LossError::EmptySource);
        }
        Ok(())
    }

    fn require_target(&self) -> Result<(), LossError> {
        if self.n_target() == 0 {
            return Err(LossError::EmptyTarget);
        }
        Ok(())
    }
}

fn check_weights(weights: &[f64], classes: usize) -> Result<(), LossError> {
    if weights.len() != classes {
        return Err(LossError::Dimension {
            what: "class weights",
            expected: classes,
            got: weights.len(),
        });
    }
    Ok(())
}

/// Importance-weighted domain-adversarial loss from discriminator logits
/// (`n x 1`, source = 1):
///
/// `-(1/n_s) sum_s w_{y_s} log dis(f_s) - (1/n_t) sum_t log(1 - dis(f_t))`.
///
/// Gradient reversal, if wanted, must be applied to the features before the
/// discriminator.
pub fn adv_loss(tape: &mut Tape, logits: Var, rows: &BatchRows, weights: &[f64]) -> Result<Var, LossError> {
    rows.require_source()?;
    rows.require_target()?;
    rows.check(tape, logits, "discriminator logits", Some(1))?;
    if let Some(&label) = rows.source_labels.iter().find(|&&y| y >= weights.len()) {
        return Err(LossError::Label {
            label,
            classes: weights.len(),
        });
    }
    let (ns, nt) = (rows.n_source() as f64, rows.n_target() as f64);
    // -log sigmoid(l) = softplus(-l), -log(1 - sigmoid(l)) = softplus(l)
    let neg = tape.scale(logits, -1.0);
    let src_nll = tape.softplus(neg);
    let tgt_nll = tape.softplus(logits);
    let mut src_coeffs = vec![0.0; rows.len()];
    let mut tgt_coeffs = vec![0.0; rows.len()];
    for (i, &y) in rows.source_labels.iter().enumerate() {
        src_coeffs[i] = weights[y] / ns;
    }
    for c in &mut tgt_coeffs[rows.n_source()..] {
        *c = 1.0 / nt;
    }
    let s = tape.weighted_sum(src_nll, src_coeffs);
    let t = tape.weighted_sum(tgt_nll, tgt_coeffs);
    Ok(tape.add(s, t))
}

/// Weighted source cross-entropy plus cross-entropy of confident targets
/// against their pseudo-labels. With no confident target in the batch the
/// target term is omitted.
pub fn class_loss(tape: &mut Tape, class_logits: Var, rows: &BatchRows, weights: &[f64]) -> Result<Var, LossError> {
    rows.require_source()?;
    let classes = tape.shape(class_logits).1;
    rows.check(tape, class_logits, "class logits", None)?;
    check_weights(weights, classes)?;
    rows.check_labels(classes)?;
    let ns = rows.n_source() as f64;
    let nc = rows.n_confident();
    let mut idx = vec![0usize; rows.len()];
    let mut coeffs = vec![0.0; rows.len()];
    for (i, &y) in rows.source_labels.iter().enumerate() {
        idx[i] = y;
        coeffs[i] = -weights[y] / ns;
    }
    for (j, pseudo) in rows.target_pseudo.iter().enumerate() {
        if let Some(y) = *pseudo {
            let i = rows.n_source() + j;
            idx[i] = y;
            coeffs[i] = -1.0 / nc as f64;
        }
    }
    let logp = tape.log_softmax(class_logits);
    let picked = tape.gather(logp, idx);
    Ok(tape.weighted_sum(picked, coeffs))
}

/// Weighted source plus plain target Euclidean reconstruction error,
/// `(1/n_s) sum w_{y_s} ||dec(z_s) - x_s|| + (1/n_t) sum ||dec(z_t) - x_t||`.
pub fn recon_loss(
    tape: &mut Tape,
    reconstruction: Var,
    inputs: Var,
    rows: &BatchRows,
    weights: &[f64],
) -> Result<Var, LossError> {
    rows.require_source()?;
    rows.require_target()?;
    let d = tape.shape(inputs).1;
    rows.check(tape, inputs, "inputs", None)?;
    rows.check(tape, reconstruction, "reconstruction", Some(d))?;
    rows.check_labels(weights.len())?;
    let (ns, nt) = (rows.n_source() as f64, rows.n_target() as f64);
    let mut coeffs = vec![1.0 / nt; rows.len()];
    for (i, &y) in rows.source_labels.iter().enumerate() {
        coeffs[i] = weights[y] / ns;
    }
    let diff = tape.sub(reconstruction, inputs);
    let norms = tape.row_norm(diff);
    Ok(tape.weighted_sum(norms, coeffs))
}

/// Tape handles the class-distribution alignment term needs.
#[derive(Debug, Clone, Copy)]
pub struct CdaInputs {
    /// Reparameterized latent draws (`n x d'`).
    pub z: Var,
    pub mean: Var,
    pub logvar: Var,
    pub class_logits: Var,
    /// Prior means (`|C_s| x d'`).
    pub prior_means: Var,
}

/// Class-distribution alignment:
/// `sum_y q(y|z*) [log q(z*|x) - log p(z*|y)]` per row, averaged over the
/// source rows and confident target rows of the batch. Source rows are
/// scaled by `w_{y_s}`.
pub fn cda_loss(
    tape: &mut Tape,
    inputs: CdaInputs,
    prior_logvars: &Array2<f64>,
    rows: &BatchRows,
    weights: &[f64],
) -> Result<Var, LossError> {
    rows.require_source()?;
    let (prior_classes, latent) = tape.shape(inputs.prior_means);
    let classes = tape.shape(inputs.class_logits).1;
    if prior_classes != classes {
        return Err(LossError::Dimension {
            what: "prior class count",
            expected: classes,
            got: prior_classes,
        });
    }
    if prior_logvars.dim() != (prior_classes, latent) {
        return Err(LossError::Dimension {
            what: "prior log-variances",
            expected: prior_classes * latent,
            got: prior_logvars.len(),
        });
    }
    rows.check(tape, inputs.z, "latent draws", Some(latent))?;
    rows.check(tape, inputs.mean, "posterior means", Some(latent))?;
    rows.check(tape, inputs.logvar, "posterior log-variances", Some(latent))?;
    rows.check(tape, inputs.class_logits, "class logits", None)?;
    check_weights(weights, classes)?;
    rows.check_labels(classes)?;

    let count = (rows.n_source() + rows.n_confident()) as f64;
    let mut coeffs = vec![0.0; rows.len()];
    for (i, &y) in rows.source_labels.iter().enumerate() {
        coeffs[i] = weights[y] / count;
    }
    for (j, pseudo) in rows.target_pseudo.iter().enumerate() {
        if pseudo.is_some() {
            coeffs[rows.n_source() + j] = 1.0 / count;
        }
    }

    // log q(z*|x) = -1/2 sum_j [ln 2pi + lv_j + (z_j - m_j)^2 exp(-lv_j)]
    let diff = tape.sub(inputs.z, inputs.mean);
    let sq = tape.square(diff);
    let neg_lv = tape.scale(inputs.logvar, -1.0);
    let inv_var = tape.exp(neg_lv);
    let scaled = tape.mul(sq, inv_var);
    let inner = tape.add(scaled, inputs.logvar);
    let summed = tape.row_sum(inner);
    let half = tape.scale(summed, -0.5);
    let log_q = tape.add_scalar(half, -0.5 * latent as f64 * (2.0 * PI).ln());

    let log_p = tape.gaussian_log_density(inputs.z, inputs.prior_means, prior_logvars);
    let log_q_wide = tape.broadcast_cols(log_q, classes);
    let ratio = tape.sub(log_q_wide, log_p);
    let q_y = tape.softmax(inputs.class_logits);
    let weighted = tape.mul(q_y, ratio);
    let per_row = tape.row_sum(weighted);
    Ok(tape.weighted_sum(per_row, coeffs))
}

/// Mean prediction entropy (nats) over the target rows.
pub fn em_loss(tape: &mut Tape, class_logits: Var, rows: &BatchRows) -> Result<Var, LossError> {
    rows.require_target()?;
    rows.check(tape, class_logits, "class logits", None)?;
    let nt = rows.n_target() as f64;
    let mut coeffs = vec![0.0; rows.len()];
    for c in &mut coeffs[rows.n_source()..] {
        *c = -1.0 / nt;
    }
    let p = tape.softmax(class_logits);
    let logp = tape.log_softmax(class_logits);
    let plogp = tape.mul(p, logp);
    let per_row = tape.row_sum(plogp);
    Ok(tape.weighted_sum(per_row, coeffs))
}

/// Trade-off weights of the overall objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TradeOff {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl TradeOff {
    /// `beta = 0.8, gamma = 0.1`.
    pub const OFFICE31: TradeOff = TradeOff {
        alpha: 1.0,
        beta: 0.8,
        gamma: 0.1,
    };
    /// `beta = 1, gamma = 0.1`.
    pub const OFFICE_HOME: TradeOff = TradeOff {
        alpha: 1.0,
        beta: 1.0,
        gamma: 0.1,
    };

    fn validate(&self) -> Result<(), LossError> {
        for (name, value) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !value.is_finite() || value < 0.0 {
                return Err(LossError::NegativeWeight { name, value });
            }
        }
        Ok(())
    }
}

/// Raw values of the five terms. Terms switched off are zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub class: f64,
    pub adv: f64,
    pub recon: f64,
    pub cda: f64,
    pub em: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub class_loss: f64,
    pub adv_loss: f64,
    pub recon_loss: f64,
    pub cda_loss: f64,
    pub em_loss: f64,
    pub total: f64,
}

pub const LOSS_LOG_HEADER: &str = "step,lr,alpha,class,adv,recon,cda,em,total";

impl LossBreakdown {
    /// One line of the per-step loss log (see [`LOSS_LOG_HEADER`]).
    pub fn csv_line(&self, step: usize, lr: f64, alpha: f64) -> String {
        format!(
            "{step},{lr},{alpha},{},{},{},{},{},{}",
            self.class_loss, self.adv_loss, self.recon_loss, self.cda_loss, self.em_loss, self.total
        )
    }

    /// Parses a line written by [`Self::csv_line`] into `(step, lr, alpha, breakdown)`.
    pub fn parse_csv_line(line: &str) -> Option<(usize, f64, f64, Self)> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 9 {
            return None;
        }
        let num = |i: usize| f[i].parse::<f64>().ok();
        Some((
            f[0].parse().ok()?,
            num(1)?,
            num(2)?,
            Self {
                class_loss: num(3)?,
                adv_loss: num(4)?,
                recon_loss: num(5)?,
                cda_loss: num(6)?,
                em_loss: num(7)?,
                total: num(8)?,
            },
        ))
    }
}

/// `L = L_class + alpha L_adv + beta (L_recon + L_cda) + gamma L_em`.
pub fn total_loss(parts: &LossParts, weights: TradeOff) -> Result<LossBreakdown, LossError> {
    weights.validate()?;
    let named = [
        ("class", parts.class),
        ("adversarial", parts.adv),
        ("reconstruction", parts.recon),
        ("alignment", parts.cda),
        ("entropy", parts.em),
    ];
    for (name, v) in named {
        if !v.is_finite() {
            return Err(LossError::NonFinite(name));
        }
    }
    let total =
        parts.class + weights.alpha * parts.adv + weights.beta * (parts.recon + parts.cda) + weights.gamma * parts.em;
    Ok(LossBreakdown {
        class_loss: parts.class,
        adv_loss: parts.adv,
        recon_loss: parts.recon,
        cda_loss: parts.cda,
        em_loss: parts.em,
        total,
    })
}

/// Tape handles of whichever terms are active.
#[derive(Debug, Clone, Copy, Default)]
pub struct TermVars {
    pub class: Option<Var>,
    pub adv: Option<Var>,
    pub recon: Option<Var>,
    pub cda: Option<Var>,
    pub em: Option<Var>,
}

impl TermVars {
    /// Records the weighted sum on the tape; `None` if no term is active.
    pub fn combine(&self, tape: &mut Tape, weights: TradeOff) -> Option<Var> {
        let scaled = [
            (self.class, 1.0),
            (self.adv, weights.alpha),
            (self.recon, weights.beta),
            (self.cda, weights.beta),
            (self.em, weights.gamma),
        ];
        let mut total: Option<Var> = None;
        for (v, w) in scaled {
            let Some(v) = v else { continue };
            let term = if w == 1.0 { v } else { tape.scale(v, w) };
            total = Some(match total {
                Some(t) => tape.add(t, term),
                None => term,
            });
        }
        total
    }

    pub fn parts(&self, tape: &Tape) -> LossParts {
        let get = |v: Option<Var>| v.map(|v| tape.scalar(v)).unwrap_or(0.0);
        LossParts {
            class: get(self.class),
            adv: get(self.adv),
            recon: get(self.recon),
            cda: get(self.cda),
            em: get(self.em),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn rows(source: &[usize], target: &[Option<usize>]) -> BatchRows {
        BatchRows {
            source_labels: source.to_vec(),
            target_pseudo: target.to_vec(),
        }
    }

    fn column(v: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap()
    }

    #[test]
    fn adv_balanced_half_is_two_ln2() {
        let mut tape = Tape::new();
        let logits = tape.leaf(column(&[0.0, 0.0]));
        let l = adv_loss(&mut tape, logits, &rows(&[0], &[None]), &[1.0]).unwrap();
        assert!((tape.scalar(l) - 2.0 * LN_2).abs() < 1e-15);
    }

    #[test]
    fn adv_zero_weights_leave_target_term() {
        let mut tape = Tape::new();
        let logits = tape.leaf(column(&[1.5, -0.3, 0.7, 2.0]));
        let r = rows(&[0, 1], &[None, Some(1)]);
        let l = adv_loss(&mut tape, logits, &r, &[0.0, 0.0]).unwrap();
        let expected = -0.5 * ((1.0 - crate::tape::sigmoid(0.7)).ln() + (1.0 - crate::tape::sigmoid(2.0)).ln());
        assert!((tape.scalar(l) - expected).abs() < 1e-12);
    }

    #[test]
    fn adv_optimum_at_half_for_identical_features() {
        // one source, one target, same feature: the loss as a function of the
        // shared discriminator output is minimised at 0.5
        let mut best = (f64::INFINITY, 0.0);
        for i in 1..1000 {
            let p = i as f64 / 1000.0;
            let logit = (p / (1.0 - p)).ln();
            let mut tape = Tape::new();
            let v = tape.leaf(column(&[logit, logit]));
            let l = adv_loss(&mut tape, v, &rows(&[0], &[None]), &[1.0]).unwrap();
            if tape.scalar(l) < best.0 {
                best = (tape.scalar(l), p);
            }
        }
        assert!((best.1 - 0.5).abs() < 1e-9, "{best:?}");
    }

    #[test]
    fn adv_requires_both_domains() {
        let mut tape = Tape::new();
        let v = tape.leaf(column(&[0.0]));
        assert_eq!(
            adv_loss(&mut tape, v, &rows(&[], &[None]), &[1.0]),
            Err(LossError::EmptySource)
        );
        assert_eq!(
            adv_loss(&mut tape, v, &rows(&[0], &[]), &[1.0]),
            Err(LossError::EmptyTarget)
        );
    }

    #[test]
    fn class_loss_trivial_values() {
        // near one-hot on the true labels
        let mut tape = Tape::new();
        let logits = tape.leaf(Array2::from_shape_vec((2, 3), vec![800.0, 0.0, 0.0, 0.0, 0.0, 800.0]).unwrap());
        let l = class_loss(&mut tape, logits, &rows(&[0, 2], &[]), &[1.0; 3]).unwrap();
        assert!(tape.scalar(l).abs() < 1e-12);

        let mut tape = Tape::new();
        let logits = tape.leaf(Array2::zeros((3, 4)));
        let l = class_loss(&mut tape, logits, &rows(&[0, 1, 3], &[]), &[1.0; 4]).unwrap();
        assert!((tape.scalar(l) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn class_loss_skips_target_term_without_confident_rows() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Array2::zeros((3, 2)));
        let l = class_loss(&mut tape, logits, &rows(&[0], &[None, None]), &[1.0, 1.0]).unwrap();
        assert!((tape.scalar(l) - LN_2).abs() < 1e-12);
        assert_eq!(
            class_loss(&mut tape, logits, &rows(&[], &[None, None, None]), &[1.0, 1.0]),
            Err(LossError::EmptySource)
        );
    }

    #[test]
    fn recon_trivial_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let same = tape.leaf(tape.value(x).clone());
        let l = recon_loss(&mut tape, same, x, &rows(&[0], &[None]), &[1.0]).unwrap();
        assert_eq!(tape.scalar(l), 0.0);

        let shifted = tape.leaf(Array2::from_shape_vec((2, 2), vec![4.0, 6.0, 3.0, 5.0]).unwrap());
        let l = recon_loss(&mut tape, shifted, x, &rows(&[0], &[None]), &[0.0]).unwrap();
        assert!((tape.scalar(l) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cda_zero_when_posterior_equals_every_prior() {
        let mut tape = Tape::new();
        let mean = tape.leaf(Array2::from_shape_vec((2, 2), vec![0.5, -0.5, 0.5, -0.5]).unwrap());
        let logvar = tape.leaf(Array2::zeros((2, 2)));
        let z = tape.leaf(Array2::from_shape_vec((2, 2), vec![1.0, 0.3, -0.2, 0.9]).unwrap());
        let logits = tape.leaf(Array2::from_shape_vec((2, 3), vec![0.1, 0.5, -1.0, 2.0, 0.0, 0.3]).unwrap());
        let prior_means = tape.leaf(Array2::from_shape_vec((3, 2), vec![0.5, -0.5, 0.5, -0.5, 0.5, -0.5]).unwrap());
        let inputs = CdaInputs {
            z,
            mean,
            logvar,
            class_logits: logits,
            prior_means,
        };
        let l = cda_loss(
            &mut tape,
            inputs,
            &Array2::zeros((3, 2)),
            &rows(&[1], &[Some(0)]),
            &[1.0; 3],
        )
        .unwrap();
        assert!(tape.scalar(l).abs() < 1e-12);
    }

    #[test]
    fn cda_rejects_prior_class_mismatch() {
        let mut tape = Tape::new();
        let m = tape.leaf(Array2::zeros((1, 2)));
        let logits = tape.leaf(Array2::zeros((1, 3)));
        let prior_means = tape.leaf(Array2::zeros((4, 2)));
        let inputs = CdaInputs {
            z: m,
            mean: m,
            logvar: m,
            class_logits: logits,
            prior_means,
        };
        assert!(matches!(
            cda_loss(&mut tape, inputs, &Array2::zeros((4, 2)), &rows(&[0], &[]), &[1.0; 3]),
            Err(LossError::Dimension {
                what: "prior class count",
                ..
            })
        ));
    }

    #[test]
    fn em_trivial_values() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Array2::zeros((3, 5)));
        let l = em_loss(&mut tape, logits, &rows(&[0], &[None, None])).unwrap();
        assert!((tape.scalar(l) - 5f64.ln()).abs() < 1e-12);

        let mut tape = Tape::new();
        let mut peaked = Array2::zeros((2, 3));
        peaked[[0, 1]] = 900.0;
        peaked[[1, 2]] = 900.0;
        let logits = tape.leaf(peaked);
        let l = em_loss(&mut tape, logits, &rows(&[], &[None, None])).unwrap();
        assert!(tape.scalar(l).abs() < 1e-12);
        assert_eq!(
            em_loss(&mut tape, logits, &rows(&[0, 1], &[])),
            Err(LossError::EmptyTarget)
        );
    }

    #[test]
    fn total_loss_weights() {
        let parts = LossParts {
            class: 1.2,
            adv: 0.7,
            recon: 0.4,
            cda: -0.1,
            em: 0.9,
        };
        let zero = total_loss(
            &parts,
            TradeOff {
                alpha: 0.0,
                beta: 0.0,
                gamma: 0.0,
            },
        )
        .unwrap();
        assert_eq!(zero.total, 1.2);
        let b1 = total_loss(
            &parts,
            TradeOff {
                alpha: 0.0,
                beta: 1.0,
                gamma: 0.0,
            },
        )
        .unwrap();
        let b2 = total_loss(
            &parts,
            TradeOff {
                alpha: 0.0,
                beta: 2.0,
                gamma: 0.0,
            },
        )
        .unwrap();
        assert!(((b2.total - 1.2) - 2.0 * (b1.total - 1.2)).abs() < 1e-12);
        let full = total_loss(&parts, TradeOff::OFFICE31).unwrap();
        let expected = 1.2 + 0.7 + 0.8 * (0.4 - 0.1) + 0.1 * 0.9;
        assert!((full.total - expected).abs() < 1e-12);
        assert_eq!((TradeOff::OFFICE31.beta, TradeOff::OFFICE31.gamma), (0.8, 0.1));
        assert_eq!((TradeOff::OFFICE_HOME.beta, TradeOff::OFFICE_HOME.gamma), (1.0, 0.1));
    }

    #[test]
    fn total_loss_names_the_bad_term() {
        let parts = LossParts {
            cda: f64::NAN,
            ..Default::default()
        };
        assert_eq!(
            total_loss(&parts, TradeOff::OFFICE31),
            Err(LossError::NonFinite("alignment"))
        );
        let bad = TradeOff {
            alpha: -1.0,
            beta: 0.0,
            gamma: 0.0,
        };
        assert!(total_loss(&LossParts::default(), bad).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let b = total_loss(
            &LossParts {
                class: 1.0,
                adv: 0.5,
                recon: 0.25,
                cda: -0.125,
                em: 0.1,
            },
            TradeOff::OFFICE31,
        )
        .unwrap();
        let line = b.csv_line(12, 0.01, 0.3);
        assert_eq!(LossBreakdown::parse_csv_line(&line), Some((12, 0.01, 0.3, b)));
        assert_eq!(LOSS_LOG_HEADER.split(',').count(), 9);
    }
}
