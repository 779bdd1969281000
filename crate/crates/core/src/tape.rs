//! A small reverse-mode autodiff tape over row-major batches.
//!
//! Every value is a 2-D array (`rows x cols`); scalars are `1 x 1`. Nodes are
//! appended in evaluation order, so a single reverse sweep computes all
//! gradients. The op set covers what the networks and losses need and
//! nothing more.

use ndarray::{Array2, Axis, Zip};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Array2<f64>),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    RowSum(Var),
    RowNorm(Var),
    BroadcastCols(Var),
    Gather(Var, Vec<usize>),
    WeightedSum(Var, Vec<f64>),
    GradReverse(Var, f64),
    GaussianLogDensity { z: Var, means: Var, inv_var: Array2<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients(Vec<Option<Array2<f64>>>);

impl Gradients {
    /// Gradient of the seeded output w.r.t. the leaf `v`; zeros if `v` did
    /// not contribute.
    pub fn get(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.0[v.0].clone().unwrap_or_else(|| Array2::zeros(shape))
    }

    pub fn try_get(&self, v: Var) -> Option<&Array2<f64>> {
        self.0[v.0].as_ref()
    }
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a + bias` with `bias` (1 x cols) broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let v = self.value(a) + self.value(bias);
        self.push(v, Op::AddRow(a, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a))
    }

    /// Elementwise product with a constant array (e.g. a dropout mask).
    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        let v = self.value(a) * &c;
        self.push(v, Op::MulConst(a, c))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::Softmax(a))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(self.value(a));
        self.push(v, Op::LogSoftmax(a))
    }

    /// Sum over columns: `rows x cols -> rows x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::RowSum(a))
    }

    /// Euclidean norm of each row: `rows x cols -> rows x 1`.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .map_axis(Axis(1), |r| r.dot(&r).sqrt())
            .insert_axis(Axis(1));
        self.push(v, Op::RowNorm(a))
    }

    /// Repeat a column vector: `rows x 1 -> rows x cols`.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.ncols(), 1, "broadcast_cols expects a column vector");
        let mut v = Array2::zeros((src.nrows(), cols));
        for (mut row, x) in v.rows_mut().into_iter().zip(src.column(0)) {
            row.fill(*x);
        }
        self.push(v, Op::BroadcastCols(a))
    }

    /// Picks column `idx[r]` from each row `r`: `rows x cols -> rows x 1`.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let src = self.value(a);
        assert_eq!(idx.len(), src.nrows(), "gather index length");
        let v = Array2::from_shape_fn((src.nrows(), 1), |(r, _)| src[[r, idx[r]]]);
        self.push(v, Op::Gather(a, idx))
    }

    /// `sum_r coeffs[r] * a[r, 0]` for a column vector `a`, giving `1 x 1`.
    pub fn weighted_sum(&mut self, a: Var, coeffs: Vec<f64>) -> Var {
        let src = self.value(a);
        assert_eq!(src.ncols(), 1, "weighted_sum expects a column vector");
        assert_eq!(coeffs.len(), src.nrows(), "weighted_sum coefficient length");
        let s: f64 = src.column(0).iter().zip(&coeffs).map(|(x, c)| x * c).sum();
        self.push(Array2::from_elem((1, 1), s), Op::WeightedSum(a, coeffs))
    }

    /// Identity forward; multiplies the incoming cotangent by `-lambda`.
    pub fn grad_reverse(&mut self, a: Var, lambda: f64) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::GradReverse(a, lambda))
    }

    /// Log-density of every row of `z` under every row of `means`, with a
    /// fixed diagonal log-variance per row of `logvars`:
    /// `rows(z) x rows(means)`.
    pub fn gaussian_log_density(&mut self, z: Var, means: Var, logvars: &Array2<f64>) -> Var {
        let zv = self.value(z);
        let mv = self.value(means);
        assert_eq!(zv.ncols(), mv.ncols(), "latent dimension");
        assert_eq!(logvars.dim(), mv.dim(), "prior log-variance shape");
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        let inv_var = logvars.mapv(|lv| (-lv).exp());
        let log_norm: Vec<f64> = logvars
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|lv| ln_2pi + lv).sum::<f64>())
            .collect();
        let v = Array2::from_shape_fn((zv.nrows(), mv.nrows()), |(i, k)| {
            let quad: f64 = zv
                .row(i)
                .iter()
                .zip(mv.row(k))
                .zip(inv_var.row(k))
                .map(|((a, b), iv)| (a - b) * (a - b) * iv)
                .sum();
            -0.5 * (log_norm[k] + quad)
        });
        self.push(v, Op::GaussianLogDensity { z, means, inv_var })
    }

    /// Reverse sweep seeded with ones at `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Array2::ones(self.nodes[output.0].value.dim()));

        for idx in (0..=output.0).rev() {
            // leaves keep their gradient for the caller; intermediates are
            // released once propagated
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, bias) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *bias, gb);
                    accumulate(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g * *c),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::MulConst(a, c) => accumulate(&mut grads, *a, g * c),
                Op::LeakyRelu(a, slope) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gi, &x| {
                        if x <= 0.0 {
                            *gi *= slope;
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = &g * &node.value.mapv(|s| s * (1.0 - s));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let ga = &g * &self.value(*a).mapv(sigmoid);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = &g * &node.value;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = &g * &self.value(*a).mapv(|x| 2.0 * x);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let s = &node.value;
                    let inner = (&g * s).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = s * &(&g - &inner);
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    let s = node.value.mapv(f64::exp);
                    let total = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = &g - &(s * &total);
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowSum(a) => {
                    let cols = self.value(*a).ncols();
                    let ga = Array2::from_shape_fn((g.nrows(), cols), |(r, _)| g[[r, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowNorm(a) => {
                    let x = self.value(*a);
                    let mut ga = x.clone();
                    for (r, mut row) in ga.rows_mut().into_iter().enumerate() {
                        let n = node.value[[r, 0]];
                        // subgradient 0 at the origin
                        let scale = if n > 0.0 { g[[r, 0]] / n } else { 0.0 };
                        row.mapv_inplace(|v| v * scale);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::BroadcastCols(a) => {
                    let ga = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gather(a, idx) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (r, &c) in idx.iter().enumerate() {
                        ga[[r, c]] = g[[r, 0]];
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::WeightedSum(a, coeffs) => {
                    let s = g[[0, 0]];
                    let ga = Array2::from_shape_fn((coeffs.len(), 1), |(r, _)| s * coeffs[r]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::GradReverse(a, lambda) => accumulate(&mut grads, *a, g * -*lambda),
                Op::GaussianLogDensity { z, means, inv_var } => {
                    let zv = self.value(*z);
                    let mv = self.value(*means);
                    let mut gz = Array2::zeros(zv.dim());
                    let mut gm = Array2::zeros(mv.dim());
                    for i in 0..zv.nrows() {
                        for k in 0..mv.nrows() {
                            let gik = g[[i, k]];
                            if gik == 0.0 {
                                continue;
                            }
                            for j in 0..zv.ncols() {
                                let t = gik * (zv[[i, j]] - mv[[k, j]]) * inv_var[[k, j]];
                                gz[[i, j]] -= t;
                                gm[[k, j]] += t;
                            }
                        }
                    }
                    accumulate(&mut grads, *z, gz);
                    accumulate(&mut grads, *means, gm);
                }
            }
        }
        Gradients(grads)
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let total = row.sum();
        row.mapv_inplace(|x| x / total);
    }
    out
}

pub fn log_softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    out
}
