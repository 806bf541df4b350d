//! Minimal reverse-mode differentiable array engine plus the MLP with
//! per-neuron trainable activations.
//!
//! Nodes hold flat `Vec<f64>` values (a scalar is length 1) and are
//! evaluated eagerly; `backward` replays the tape in reverse with exact
//! adjoints. Tapes are single-owner and freed per use; gradient
//! accumulation follows the fixed insertion order, so runs are
//! bit-reproducible.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

/// Activation family of an MLP.
///
/// `Standard` is a fixed smooth non-affine gate (tanh); the trainable shift
/// is folded into the bias path, so `alpha` is inert and contributes zero
/// gradient. `StandardRelu` is the piecewise-linear alternative. For
/// `SuperExpressive`,
///
/// ```text
/// sigma_alpha(t) = alpha t + (1 - alpha) * ( |t mod 2|   if t >= 0
///                                          , t/(|t|+1)   if t <  0 )
/// ```
///
/// with `t mod 2` read as the continuous triangle wave (distance to the
/// nearest even integer), so that `sigma` is continuous and `sigma_1 = id`.
/// At the integer kinks the derivative is taken from the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationFamily {
    Standard,
    StandardRelu,
    SuperExpressive,
}

fn triangle(t: f64) -> f64 {
    let r = t.rem_euclid(2.0);
    if r <= 1.0 {
        r
    } else {
        2.0 - r
    }
}

fn triangle_deriv(t: f64) -> f64 {
    let r = t.rem_euclid(2.0);
    if r == 0.0 && t > 0.0 {
        -1.0 // left derivative at even integers
    } else if r <= 1.0 {
        1.0
    } else {
        -1.0
    }
}

fn super_expressive_base(t: f64) -> f64 {
    if t >= 0.0 {
        triangle(t)
    } else {
        t / (t.abs() + 1.0)
    }
}

fn super_expressive_base_deriv(t: f64) -> f64 {
    if t >= 0.0 {
        triangle_deriv(t)
    } else {
        1.0 / ((1.0 - t) * (1.0 - t))
    }
}

/// Pointwise activation value.
pub fn activation(family: ActivationFamily, alpha: f64, t: f64) -> f64 {
    match family {
        ActivationFamily::Standard => t.tanh(),
        ActivationFamily::StandardRelu => t.max(0.0),
        ActivationFamily::SuperExpressive => {
            alpha * t + (1.0 - alpha) * super_expressive_base(t)
        }
    }
}

/// `(d/dt, d/dalpha)` of the activation.
pub fn activation_grad(family: ActivationFamily, alpha: f64, t: f64) -> (f64, f64) {
    match family {
        ActivationFamily::Standard => {
            let y = t.tanh();
            (1.0 - y * y, 0.0)
        }
        ActivationFamily::StandardRelu => (if t > 0.0 { 1.0 } else { 0.0 }, 0.0),
        ActivationFamily::SuperExpressive => {
            let g = super_expressive_base(t);
            (
                alpha + (1.0 - alpha) * super_expressive_base_deriv(t),
                t - g,
            )
        }
    }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Const,
    Param,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    MulBroadcast(usize, usize),
    MatVec {
        matrix: usize,
        vector: usize,
        rows: usize,
        cols: usize,
    },
    MatVecConst {
        matrix: Rc<Vec<f64>>,
        vector: usize,
        rows: usize,
        cols: usize,
    },
    Dot(usize, usize),
    Sum(usize),
    Mean(usize),
    Activation {
        x: usize,
        alpha: usize,
        family: ActivationFamily,
    },
    Softmax(usize),
    LinComb {
        weights: Vec<usize>,
        scales: Vec<f64>,
        columns: Vec<Rc<Vec<f64>>>,
    },
    Concat(Vec<usize>),
    Slice {
        x: usize,
        start: usize,
    },
}

struct Node {
    op: Op,
    value: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    adjoints: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> &[f64] {
        &self.adjoints[v.0]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Const, value)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(vec![x])
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Param, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v: Vec<f64> = self.bin_zip(a, b, |x, y| x + y);
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.bin_zip(a, b, |x, y| x - y);
        self.push(Op::Sub(a.0, b.0), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.bin_zip(a, b, |x, y| x * y);
        self.push(Op::Mul(a.0, b.0), v)
    }

    fn bin_zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(x.len(), y.len(), "elementwise op on mismatched lengths");
        x.iter().zip(y).map(|(p, q)| f(*p, *q)).collect()
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.iter().map(|x| c * x).collect();
        self.push(Op::Scale(a.0, c), v)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.iter().map(|x| x + c).collect();
        self.push(Op::Offset(a.0), v)
    }

    /// Vector times scalar node.
    pub fn mul_broadcast(&mut self, vector: Var, scalar: Var) -> Var {
        assert_eq!(self.nodes[scalar.0].value.len(), 1);
        let s = self.nodes[scalar.0].value[0];
        let v = self.nodes[vector.0].value.iter().map(|x| s * x).collect();
        self.push(Op::MulBroadcast(vector.0, scalar.0), v)
    }

    pub fn matvec(&mut self, matrix: Var, vector: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.nodes[matrix.0].value.len(), rows * cols);
        assert_eq!(self.nodes[vector.0].value.len(), cols);
        let m = &self.nodes[matrix.0].value;
        let x = &self.nodes[vector.0].value;
        let mut out = vec![0.0; rows];
        for i in 0..rows {
            let mut acc = 0.0;
            for j in 0..cols {
                acc += m[i * cols + j] * x[j];
            }
            out[i] = acc;
        }
        self.push(
            Op::MatVec {
                matrix: matrix.0,
                vector: vector.0,
                rows,
                cols,
            },
            out,
        )
    }

    pub fn matvec_const(&mut self, matrix: Rc<Vec<f64>>, vector: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(matrix.len(), rows * cols);
        assert_eq!(self.nodes[vector.0].value.len(), cols);
        let x = &self.nodes[vector.0].value;
        let mut out = vec![0.0; rows];
        for i in 0..rows {
            let mut acc = 0.0;
            for j in 0..cols {
                acc += matrix[i * cols + j] * x[j];
            }
            out[i] = acc;
        }
        self.push(
            Op::MatVecConst {
                matrix,
                vector: vector.0,
                rows,
                cols,
            },
            out,
        )
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let v = self.bin_zip(a, b, |x, y| x * y).iter().sum();
        self.push(Op::Dot(a.0, b.0), vec![v])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.iter().sum();
        self.push(Op::Sum(a.0), vec![v])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len().max(1) as f64;
        let v = self.nodes[a.0].value.iter().sum::<f64>() / n;
        self.push(Op::Mean(a.0), vec![v])
    }

    /// Elementwise trainable activation; `alpha` must match `x` in length.
    pub fn activate(&mut self, family: ActivationFamily, x: Var, alpha: Var) -> Var {
        let xs = &self.nodes[x.0].value;
        let al = &self.nodes[alpha.0].value;
        assert_eq!(xs.len(), al.len(), "alpha must be per-neuron");
        let v = xs
            .iter()
            .zip(al)
            .map(|(t, a)| activation(family, *a, *t))
            .collect();
        self.push(
            Op::Activation {
                x: x.0,
                alpha: alpha.0,
                family,
            },
            v,
        )
    }

    /// Max-subtracted stable softmax, renormalized to sum to one.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = softmax(&self.nodes[x.0].value);
        self.push(Op::Softmax(x.0), v)
    }

    /// `sum_i scales_i * weights_i * columns_i` where the weights are scalar
    /// nodes and the columns are constant arrays of equal length.
    pub fn lincomb(&mut self, weights: &[Var], scales: &[f64], columns: &[Rc<Vec<f64>>]) -> Var {
        assert_eq!(weights.len(), scales.len());
        assert_eq!(weights.len(), columns.len());
        let len = columns.first().map_or(0, |c| c.len());
        let mut out = vec![0.0; len];
        for ((w, s), col) in weights.iter().zip(scales).zip(columns) {
            let f = s * self.nodes[w.0].value[0];
            if f == 0.0 {
                continue;
            }
            for (o, c) in out.iter_mut().zip(col.iter()) {
                *o += f * c;
            }
        }
        self.push(
            Op::LinComb {
                weights: weights.iter().map(|v| v.0).collect(),
                scales: scales.to_vec(),
                columns: columns.to_vec(),
            },
            out,
        )
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push(Op::Concat(parts.iter().map(|v| v.0).collect()), out)
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.nodes[x.0].value[start..start + len].to_vec();
        self.push(Op::Slice { x: x.0, start }, v)
    }

    /// Reverse-mode gradients of a scalar root with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let n = self.nodes[root.0].value.len();
        if n != 1 {
            return Err(Error::NonScalarRoot(n));
        }
        Ok(self.backward_seeded(root, &[1.0]))
    }

    /// Reverse pass from `root` with a given cotangent.
    pub fn backward_seeded(&self, root: Var, seed: &[f64]) -> Gradients {
        assert_eq!(self.nodes[root.0].value.len(), seed.len());
        let mut adj: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        adj[root.0].copy_from_slice(seed);
        for idx in (0..=root.0).rev() {
            let g = std::mem::take(&mut adj[idx]);
            if g.iter().all(|x| *x == 0.0) {
                adj[idx] = g;
                continue;
            }
            match &self.nodes[idx].op {
                Op::Const | Op::Param => {}
                Op::Add(a, b) => {
                    axpy(&mut adj[*a], 1.0, &g);
                    axpy(&mut adj[*b], 1.0, &g);
                }
                Op::Sub(a, b) => {
                    axpy(&mut adj[*a], 1.0, &g);
                    axpy(&mut adj[*b], -1.0, &g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    for i in 0..g.len() {
                        adj[*a][i] += g[i] * vb[i];
                    }
                    for i in 0..g.len() {
                        adj[*b][i] += g[i] * va[i];
                    }
                }
                Op::Scale(a, c) => axpy(&mut adj[*a], *c, &g),
                Op::Offset(a) => axpy(&mut adj[*a], 1.0, &g),
                Op::MulBroadcast(v, s) => {
                    let sv = self.nodes[*s].value[0];
                    let vv = &self.nodes[*v].value;
                    let mut ds = 0.0;
                    for i in 0..g.len() {
                        adj[*v][i] += g[i] * sv;
                        ds += g[i] * vv[i];
                    }
                    adj[*s][0] += ds;
                }
                Op::MatVec {
                    matrix,
                    vector,
                    rows,
                    cols,
                } => {
                    let mv = &self.nodes[*matrix].value;
                    let xv = &self.nodes[*vector].value;
                    for i in 0..*rows {
                        let gi = g[i];
                        if gi == 0.0 {
                            continue;
                        }
                        for j in 0..*cols {
                            adj[*matrix][i * cols + j] += gi * xv[j];
                            adj[*vector][j] += gi * mv[i * cols + j];
                        }
                    }
                }
                Op::MatVecConst {
                    matrix,
                    vector,
                    rows,
                    cols,
                } => {
                    for i in 0..*rows {
                        let gi = g[i];
                        if gi == 0.0 {
                            continue;
                        }
                        for j in 0..*cols {
                            adj[*vector][j] += gi * matrix[i * cols + j];
                        }
                    }
                }
                Op::Dot(a, b) => {
                    let g0 = g[0];
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    for i in 0..va.len() {
                        adj[*a][i] += g0 * vb[i];
                    }
                    for i in 0..vb.len() {
                        adj[*b][i] += g0 * va[i];
                    }
                }
                Op::Sum(a) => {
                    let g0 = g[0];
                    for x in adj[*a].iter_mut() {
                        *x += g0;
                    }
                }
                Op::Mean(a) => {
                    let g0 = g[0] / self.nodes[*a].value.len().max(1) as f64;
                    for x in adj[*a].iter_mut() {
                        *x += g0;
                    }
                }
                Op::Activation { x, alpha, family } => {
                    let xs = &self.nodes[*x].value;
                    let al = &self.nodes[*alpha].value;
                    for i in 0..g.len() {
                        let (dt, da) = activation_grad(*family, al[i], xs[i]);
                        adj[*x][i] += g[i] * dt;
                        adj[*alpha][i] += g[i] * da;
                    }
                }
                Op::Softmax(x) => {
                    let y = &self.nodes[idx].value;
                    let inner: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    for i in 0..g.len() {
                        adj[*x][i] += y[i] * (g[i] - inner);
                    }
                }
                Op::LinComb {
                    weights,
                    scales,
                    columns,
                } => {
                    for ((w, s), col) in weights.iter().zip(scales).zip(columns) {
                        if *s == 0.0 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for (gi, ci) in g.iter().zip(col.iter()) {
                            acc += gi * ci;
                        }
                        adj[*w][0] += s * acc;
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[*p].value.len();
                        axpy(&mut adj[*p], 1.0, &g[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::Slice { x, start } => {
                    for (i, gi) in g.iter().enumerate() {
                        adj[*x][start + i] += gi;
                    }
                }
            }
            adj[idx] = g;
        }
        Gradients { adjoints: adj }
    }
}

fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Stable softmax of a plain slice.
pub fn softmax(w: &[f64]) -> Vec<f64> {
    assert!(!w.is_empty(), "softmax of empty vector");
    let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = w.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for x in out.iter_mut() {
        *x /= sum;
    }
    // renormalize once more so the components sum to one up to one ulp
    let sum2: f64 = out.iter().sum();
    for x in out.iter_mut() {
        *x /= sum2;
    }
    out
}

// ---------------------------------------------------------------------------
// MLP
// ---------------------------------------------------------------------------

/// Multilayer perceptron with the iteration
/// `x^{(j+1)} = A^{(j)} (sigma_{alpha^{(j)}} . (x^{(j)} + b^{(j)}))` and
/// output `x^{(J)} + c`. Biases and activation parameters act on the layer
/// input, so they have length `d_j`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub dims: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub alphas: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
    pub family: ActivationFamily,
}

impl Mlp {
    /// Fresh network. Weights are uniform in `+-sqrt(6/(fan_in+fan_out))`;
    /// `alpha` starts at the identity skip (1) for the super-expressive
    /// family and at 0 otherwise.
    pub fn new(dims: &[usize], family: ActivationFamily, seed: u64) -> Self {
        assert!(dims.len() >= 2, "need input and output dims");
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let depth = dims.len() - 1;
        let mut weights = Vec::with_capacity(depth);
        let mut biases = Vec::with_capacity(depth);
        let mut alphas = Vec::with_capacity(depth);
        let alpha0 = if family == ActivationFamily::SuperExpressive {
            1.0
        } else {
            0.0
        };
        for j in 0..depth {
            let (fan_in, fan_out) = (dims[j], dims[j + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(
                (0..fan_in * fan_out)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect(),
            );
            biases.push(vec![0.0; fan_in]);
            alphas.push(vec![alpha0; fan_in]);
        }
        Self {
            dims: dims.to_vec(),
            weights,
            biases,
            alphas,
            offset: vec![0.0; *dims.last().unwrap()],
            family,
        }
    }

    /// All-zero network of the same shape.
    pub fn zeroed(dims: &[usize], family: ActivationFamily) -> Self {
        let mut net = Self::new(dims, family, 0);
        for w in net.weights.iter_mut() {
            w.iter_mut().for_each(|x| *x = 0.0);
        }
        for a in net.alphas.iter_mut() {
            a.iter_mut().for_each(|x| *x = 0.0);
        }
        net
    }

    pub fn depth(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn max_width(&self) -> usize {
        *self.dims.iter().max().unwrap()
    }

    /// Plain forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "mlp input",
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        let mut cur = x.to_vec();
        for j in 0..self.depth() {
            let (rows, cols) = (self.dims[j + 1], self.dims[j]);
            let mut hidden = vec![0.0; cols];
            for i in 0..cols {
                hidden[i] = activation(self.family, self.alphas[j][i], cur[i] + self.biases[j][i]);
            }
            let mut next = vec![0.0; rows];
            for r in 0..rows {
                let mut acc = 0.0;
                for c in 0..cols {
                    acc += self.weights[j][r * cols + c] * hidden[c];
                }
                next[r] = acc;
            }
            cur = next;
        }
        for (y, c) in cur.iter_mut().zip(&self.offset) {
            *y += c;
        }
        Ok(cur)
    }

    /// Register every parameter of the network on a tape.
    pub fn register(&self, tape: &mut Tape) -> MlpVars {
        self.register_with(tape, true)
    }

    /// Register parameters as constants (no gradient flows into them).
    pub fn register_frozen(&self, tape: &mut Tape) -> MlpVars {
        self.register_with(tape, false)
    }

    fn register_with(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        let mut reg = |v: &Vec<f64>| {
            if trainable {
                tape.param(v.clone())
            } else {
                tape.constant(v.clone())
            }
        };
        MlpVars {
            weights: self.weights.iter().map(&mut reg).collect(),
            biases: self.biases.iter().map(&mut reg).collect(),
            alphas: self.alphas.iter().map(&mut reg).collect(),
            offset: reg(&self.offset),
        }
    }

    /// Forward pass through tape variables; mirrors `forward` exactly.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Var {
        let mut cur = x;
        for j in 0..self.depth() {
            let shifted = tape.add(cur, vars.biases[j]);
            let activated = tape.activate(self.family, shifted, vars.alphas[j]);
            cur = tape.matvec(vars.weights[j], activated, self.dims[j + 1], self.dims[j]);
        }
        tape.add(cur, vars.offset)
    }

    /// Count of non-zero trainable parameters across `A, b, alpha, c`.
    pub fn parameter_count(&self) -> usize {
        let nz = |v: &[f64]| v.iter().filter(|x| **x != 0.0).count();
        self.weights.iter().map(|w| nz(w)).sum::<usize>()
            + self.biases.iter().map(|b| nz(b)).sum::<usize>()
            + self.alphas.iter().map(|a| nz(a)).sum::<usize>()
            + nz(&self.offset)
    }

    /// Named tensors `(name, shape, values)` under a prefix.
    pub fn tensors(&self, prefix: &str) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        out.push((
            format!("{prefix}.dims"),
            vec![self.dims.len()],
            self.dims.iter().map(|d| *d as f64).collect(),
        ));
        out.push((
            format!("{prefix}.family"),
            vec![1],
            vec![match self.family {
                ActivationFamily::Standard => 0.0,
                ActivationFamily::StandardRelu => 1.0,
                ActivationFamily::SuperExpressive => 2.0,
            }],
        ));
        for j in 0..self.depth() {
            out.push((
                format!("{prefix}.weight.{j}"),
                vec![self.dims[j + 1], self.dims[j]],
                self.weights[j].clone(),
            ));
            out.push((
                format!("{prefix}.bias.{j}"),
                vec![self.dims[j]],
                self.biases[j].clone(),
            ));
            out.push((
                format!("{prefix}.alpha.{j}"),
                vec![self.dims[j]],
                self.alphas[j].clone(),
            ));
        }
        out.push((
            format!("{prefix}.offset"),
            vec![self.output_dim()],
            self.offset.clone(),
        ));
        out
    }

    /// Rebuild from named tensors written by [`Mlp::tensors`].
    pub fn from_tensors(
        tensors: &std::collections::HashMap<String, (Vec<usize>, Vec<f64>)>,
        prefix: &str,
    ) -> Result<Self> {
        let get = |name: String| {
            tensors
                .get(&name)
                .ok_or_else(|| Error::CheckpointFormat(format!("missing tensor {name}")))
        };
        let dims_raw = get(format!("{prefix}.dims"))?;
        let dims: Vec<usize> = dims_raw.1.iter().map(|x| *x as usize).collect();
        let family = match get(format!("{prefix}.family"))?.1[0] as i64 {
            0 => ActivationFamily::Standard,
            1 => ActivationFamily::StandardRelu,
            2 => ActivationFamily::SuperExpressive,
            other => {
                return Err(Error::CheckpointFormat(format!(
                    "unknown activation code {other}"
                )))
            }
        };
        let depth = dims.len() - 1;
        let mut weights = Vec::with_capacity(depth);
        let mut biases = Vec::with_capacity(depth);
        let mut alphas = Vec::with_capacity(depth);
        for j in 0..depth {
            weights.push(get(format!("{prefix}.weight.{j}"))?.1.clone());
            biases.push(get(format!("{prefix}.bias.{j}"))?.1.clone());
            alphas.push(get(format!("{prefix}.alpha.{j}"))?.1.clone());
        }
        let offset = get(format!("{prefix}.offset"))?.1.clone();
        Ok(Self {
            dims,
            weights,
            biases,
            alphas,
            offset,
            family,
        })
    }
}

/// Tape handles of a registered MLP.
pub struct MlpVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    pub alphas: Vec<Var>,
    pub offset: Var,
}

impl MlpVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.weights.clone();
        v.extend_from_slice(&self.biases);
        v.extend_from_slice(&self.alphas);
        v.push(self.offset);
        v
    }
}

/// Gradient buffers shaped like an MLP.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub alphas: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            weights: mlp.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: mlp.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            alphas: mlp.alphas.iter().map(|a| vec![0.0; a.len()]).collect(),
            offset: vec![0.0; mlp.offset.len()],
        }
    }

    pub fn accumulate(&mut self, vars: &MlpVars, grads: &Gradients, weight: f64) {
        for (dst, var) in self.weights.iter_mut().zip(&vars.weights) {
            axpy(dst, weight, grads.wrt(*var));
        }
        for (dst, var) in self.biases.iter_mut().zip(&vars.biases) {
            axpy(dst, weight, grads.wrt(*var));
        }
        for (dst, var) in self.alphas.iter_mut().zip(&vars.alphas) {
            axpy(dst, weight, grads.wrt(*var));
        }
        axpy(&mut self.offset, weight, grads.wrt(vars.offset));
    }

    pub fn scale(&mut self, c: f64) {
        let mut apply = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x *= c);
        self.weights.iter_mut().for_each(&mut apply);
        self.biases.iter_mut().for_each(&mut apply);
        self.alphas.iter_mut().for_each(&mut apply);
        apply(&mut self.offset);
    }
}

/// One SGD-with-momentum step: `v <- mu v + g; theta <- theta - lr v`.
pub fn sgd_momentum(mlp: &mut Mlp, grads: &MlpGrads, velocity: &mut MlpGrads, lr: f64, mu: f64) {
    fn upd(theta: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, mu: f64) {
        for i in 0..theta.len() {
            v[i] = mu * v[i] + g[i];
            theta[i] -= lr * v[i];
        }
    }
    for j in 0..mlp.weights.len() {
        upd(&mut mlp.weights[j], &grads.weights[j], &mut velocity.weights[j], lr, mu);
        upd(&mut mlp.biases[j], &grads.biases[j], &mut velocity.biases[j], lr, mu);
        upd(&mut mlp.alphas[j], &grads.alphas[j], &mut velocity.alphas[j], lr, mu);
    }
    upd(&mut mlp.offset, &grads.offset, &mut velocity.offset, lr, mu);
}

// ---------------------------------------------------------------------------
// Named-tensor checkpoint file
// ---------------------------------------------------------------------------

/// Write tensors as a flat text file: a header line, then per tensor one
/// line `tensor <name> <rank> <dims...>` followed by one line of row-major
/// values (shortest round-trip decimal).
pub fn write_named_tensors<W: std::io::Write>(
    mut w: W,
    tensors: &[(String, Vec<usize>, Vec<f64>)],
) -> Result<()> {
    writeln!(w, "named-tensors v1")?;
    for (name, shape, values) in tensors {
        write!(w, "tensor {name} {}", shape.len())?;
        for d in shape {
            write!(w, " {d}")?;
        }
        writeln!(w)?;
        let mut first = true;
        for v in values {
            if !first {
                write!(w, " ")?;
            }
            write!(w, "{v}")?;
            first = false;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_named_tensors<R: std::io::BufRead>(
    r: R,
) -> Result<std::collections::HashMap<String, (Vec<usize>, Vec<f64>)>> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::CheckpointFormat("empty file".into()))??;
    if header.trim() != "named-tensors v1" {
        return Err(Error::CheckpointFormat(format!(
            "unexpected header {header:?}"
        )));
    }
    let mut out = std::collections::HashMap::new();
    while let Some(line) = lines.next() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let tag = parts.next();
        if tag != Some("tensor") {
            return Err(Error::CheckpointFormat(format!("bad tensor line {line:?}")));
        }
        let name = parts
            .next()
            .ok_or_else(|| Error::CheckpointFormat("missing name".into()))?
            .to_string();
        let rank: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::CheckpointFormat("missing rank".into()))?;
        let shape: Vec<usize> = parts
            .take(rank)
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::CheckpointFormat(e.to_string()))?;
        let count: usize = shape.iter().product();
        let data_line = lines
            .next()
            .ok_or_else(|| Error::CheckpointFormat(format!("missing values for {name}")))??;
        let values: Vec<f64> = data_line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::CheckpointFormat(e.to_string()))?;
        if values.len() != count {
            return Err(Error::CheckpointFormat(format!(
                "tensor {name}: expected {count} values, got {}",
                values.len()
            )));
        }
        out.insert(name, (shape, values));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn super_expressive_examples() {
        assert_eq!(activation(ActivationFamily::SuperExpressive, 1.0, -3.7), -3.7);
        assert_eq!(activation(ActivationFamily::SuperExpressive, 0.0, 3.0), 1.0);
        assert_eq!(activation(ActivationFamily::SuperExpressive, 0.0, -1.0), -0.5);
    }

    #[test]
    fn super_expressive_is_continuous_at_breakpoints() {
        for t0 in [0.0f64, 1.0, 2.0, 3.0, 4.0] {
            let eps = 1e-9;
            let lo = activation(ActivationFamily::SuperExpressive, 0.3, t0 - eps);
            let hi = activation(ActivationFamily::SuperExpressive, 0.3, t0 + eps);
            assert!((lo - hi).abs() < 1e-8, "jump at {t0}");
        }
    }

    #[test]
    fn simple_gradient() {
        // f(x) = x^2 at x = 3 -> 6
        let mut tape = Tape::new();
        let x = tape.param(vec![3.0]);
        let y = tape.mul(x, x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x), &[6.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(vec![1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(2))));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&[0.0, 0.0]);
        assert!((s[0] - 0.5).abs() < 1e-15 && (s[1] - 0.5).abs() < 1e-15);
        let s = softmax(&[7.0, 7.0, 7.0]);
        for v in &s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&[1000.0, 0.0]);
        assert!(s[0] > 1.0 - 1e-12 && s[1] < 1e-12);
        assert!(s.iter().all(|x| x.is_finite() && *x > 0.0));
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mlp_matches_hand_rolled_arithmetic() {
        // straight-line evaluation oracle for a fixed two-layer net
        let mut mlp = Mlp::new(&[2, 3, 2], ActivationFamily::Standard, 5);
        mlp.biases[0] = vec![0.1, -0.2];
        mlp.biases[1] = vec![0.3, 0.0, -0.1];
        mlp.offset = vec![0.05, -0.5];
        let x = [0.7, -1.3];
        let got = mlp.forward(&x).unwrap();

        let h0: Vec<f64> = (0..2).map(|i| (x[i] + mlp.biases[0][i]).tanh()).collect();
        let mut l1 = [0.0; 3];
        for r in 0..3 {
            for c in 0..2 {
                l1[r] += mlp.weights[0][r * 2 + c] * h0[c];
            }
        }
        let h1: Vec<f64> = (0..3).map(|i| (l1[i] + mlp.biases[1][i]).tanh()).collect();
        let mut l2 = [0.0; 2];
        for r in 0..2 {
            for c in 0..3 {
                l2[r] += mlp.weights[1][r * 3 + c] * h1[c];
            }
        }
        for i in 0..2 {
            let want = l2[i] + mlp.offset[i];
            assert!((got[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weight_net_returns_offset() {
        let mut mlp = Mlp::zeroed(&[3, 4, 2], ActivationFamily::Standard);
        mlp.offset = vec![1.25, -0.5];
        let y = mlp.forward(&[9.0, 9.0, 9.0]).unwrap();
        assert_eq!(y, vec![1.25, -0.5]);
        assert_eq!(mlp.parameter_count(), 2);
    }

    #[test]
    fn identity_single_layer_superexpressive() {
        let mut mlp = Mlp::zeroed(&[3, 3], ActivationFamily::SuperExpressive);
        for i in 0..3 {
            mlp.weights[0][i * 3 + i] = 1.0;
            mlp.alphas[0][i] = 1.0;
        }
        let x = vec![0.3, -2.0, 5.5];
        assert_eq!(mlp.forward(&x).unwrap(), x);
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        for family in [
            ActivationFamily::Standard,
            ActivationFamily::StandardRelu,
            ActivationFamily::SuperExpressive,
        ] {
            let mlp = Mlp::new(&[4, 8, 3], family, 17);
            let x = vec![0.4, -0.6, 1.1, 0.0];
            let plain = mlp.forward(&x).unwrap();
            let mut tape = Tape::new();
            let vars = mlp.register(&mut tape);
            let xv = tape.constant(x);
            let y = mlp.forward_tape(&mut tape, &vars, xv);
            for (a, b) in plain.iter().zip(tape.value(y)) {
                assert_eq!(a.to_bits(), b.to_bits(), "family {family:?}");
            }
        }
    }

    #[test]
    fn mlp_gradients_match_central_differences() {
        let mut mlp = Mlp::new(&[3, 5, 2], ActivationFamily::Standard, 3);
        mlp.biases[0] = vec![0.1, 0.2, -0.3];
        let x = vec![0.5, -0.4, 0.9];
        let target = vec![0.3, -0.7];

        let loss_of = |net: &Mlp| {
            let y = net.forward(&x).unwrap();
            y.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        };

        let mut tape = Tape::new();
        let vars = mlp.register(&mut tape);
        let xv = tape.constant(x.clone());
        let y = mlp.forward_tape(&mut tape, &vars, xv);
        let tv = tape.constant(target.clone());
        let diff = tape.sub(y, tv);
        let loss = tape.dot(diff, diff);
        let grads = tape.backward(loss).unwrap();

        let h = 1e-5;
        for j in 0..mlp.depth() {
            for idx in 0..mlp.weights[j].len() {
                let analytic = grads.wrt(vars.weights[j])[idx];
                let mut plus = mlp.clone();
                plus.weights[j][idx] += h;
                let mut minus = mlp.clone();
                minus.weights[j][idx] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let denom = analytic.abs().max(1e-6);
                assert!(
                    ((analytic - fd) / denom).abs() < 1e-5,
                    "layer {j} idx {idx}: {analytic} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mlp = Mlp::new(&[2, 4, 3], ActivationFamily::SuperExpressive, 77);
        let tensors = mlp.tensors("net");
        let mut buf = Vec::new();
        write_named_tensors(&mut buf, &tensors).unwrap();
        let map = read_named_tensors(std::io::Cursor::new(buf)).unwrap();
        let back = Mlp::from_tensors(&map, "net").unwrap();
        assert_eq!(mlp.dims, back.dims);
        assert_eq!(mlp.weights, back.weights);
        assert_eq!(mlp.offset, back.offset);
        assert_eq!(mlp.family, back.family);
    }
}
