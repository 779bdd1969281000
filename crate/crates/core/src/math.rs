//! Numeric primitives shared by the rest of the crate: simplex vectors,
//! diagonal Gaussian log-densities, Jensen-Shannon divergence and entropy.
//!
//! Everything here is `f64`. Entropies use natural logs; the JS divergence
//! uses base 2 so that it lies in `[0, 1]`. `0 * log 0` is taken as `0`.

use std::f64::consts::{LN_2, PI};

use thiserror::Error;

/// Tolerance used when validating that a vector sums to one.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("empty vector")]
    Empty,
    #[error("non-finite entry at index {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("not a probability vector: {0}")]
    NotOnSimplex(String),
}

/// A probability vector: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexVector(Vec<f64>);

impl SimplexVector {
    pub fn new(p: Vec<f64>) -> Result<Self, MathError> {
        if p.is_empty() {
            return Err(MathError::Empty);
        }
        if let Some(i) = p.iter().position(|v| !v.is_finite()) {
            return Err(MathError::NonFinite(i));
        }
        if let Some(i) = p.iter().position(|&v| v < 0.0) {
            return Err(MathError::NotOnSimplex(format!("entry {i} is negative ({})", p[i])));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(MathError::NotOnSimplex(format!("entries sum to {total}")));
        }
        Ok(Self(p))
    }

    /// Uniform distribution over `k` outcomes.
    pub fn uniform(k: usize) -> Result<Self, MathError> {
        if k == 0 {
            return Err(MathError::Empty);
        }
        Ok(Self(vec![1.0 / k as f64; k]))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Largest probability.
    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Index of the largest entry, lowest index on ties. Returns 0 for an empty slice.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean and log-variance of a Gaussian with diagonal covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussianParams {
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl DiagGaussianParams {
    pub fn new(mean: Vec<f64>, logvar: Vec<f64>) -> Result<Self, MathError> {
        if mean.len() != logvar.len() {
            return Err(MathError::DimensionMismatch {
                expected: mean.len(),
                got: logvar.len(),
            });
        }
        if let Some(i) = mean.iter().position(|v| !v.is_finite()) {
            return Err(MathError::NonFinite(i));
        }
        if let Some(i) = logvar.iter().position(|v| !v.is_finite()) {
            return Err(MathError::NonFinite(mean.len() + i));
        }
        Ok(Self { mean, logvar })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            logvar: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Softmax with max-subtraction.
pub fn softmax(v: &[f64]) -> Result<SimplexVector, MathError> {
    if v.is_empty() {
        return Err(MathError::Empty);
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(MathError::NonFinite(i));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    Ok(SimplexVector(out))
}

/// `log N(z | mean, diag(exp(logvar)))` in nats.
pub fn log_gaussian_diag(z: &[f64], g: &DiagGaussianParams) -> Result<f64, MathError> {
    if z.len() != g.dim() {
        return Err(MathError::DimensionMismatch {
            expected: g.dim(),
            got: z.len(),
        });
    }
    let ln_2pi = (2.0 * PI).ln();
    let quad: f64 = z
        .iter()
        .zip(&g.mean)
        .zip(&g.logvar)
        .map(|((&zi, &mi), &lv)| {
            let d = zi - mi;
            ln_2pi + lv + d * d * (-lv).exp()
        })
        .sum();
    Ok(-0.5 * quad)
}

fn xlogy_ratio(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * (x / y).ln()
    }
}

/// Base-2 Jensen-Shannon divergence, in `[0, 1]`.
pub fn js_divergence(p: &SimplexVector, q: &SimplexVector) -> Result<f64, MathError> {
    if p.len() != q.len() {
        return Err(MathError::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    let mut kl_p = 0.0;
    let mut kl_q = 0.0;
    for (&pi, &qi) in p.0.iter().zip(&q.0) {
        let m = 0.5 * (pi + qi);
        kl_p += xlogy_ratio(pi, m);
        kl_q += xlogy_ratio(qi, m);
    }
    let js = 0.5 * (kl_p + kl_q) / LN_2;
    // rounding can push identical inputs a hair below zero
    Ok(js.clamp(0.0, 1.0))
}

/// Shannon entropy in nats.
pub fn entropy(p: &SimplexVector) -> f64 {
    -p.0.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}
