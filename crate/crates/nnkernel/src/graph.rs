//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass and owned by a single
//! thread. Nodes are appended in evaluation order, so a reverse sweep over
//! the tape is a valid topological order for backpropagation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_err, NnError, Result};
use crate::kernels::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use crate::tensor::{ParameterStore, Real, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleRows(Var, Vec<T>),
    Relu(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad: usize,
        probs: Vec<T>,
        count: usize,
    },
    Sum(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape over scalars of type `T`.
#[derive(Debug)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: BTreeMap<String, Var>,
    grad_enabled: bool,
    dropout_rng: Option<ChaCha8Rng>,
    perturbation: Option<(String, usize, T)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// A graph that records gradients for parameters. Dropout is inactive.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: BTreeMap::new(),
            grad_enabled: true,
            dropout_rng: None,
            perturbation: None,
        }
    }

    /// A graph for evaluation: parameters are bound without gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// A training graph with dropout driven by `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            ..Self::new()
        }
    }

    /// Adds `delta` to one coordinate of a parameter when it is bound.
    /// Used by finite-difference checks so the step is exact in `T`.
    pub fn perturbed(mut self, name: &str, index: usize, delta: T) -> Self {
        self.perturbation = Some((name.to_string(), index, delta));
        self
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Signs of every ReLU input, in evaluation order: the side of each
    /// kink the graph was evaluated on.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(a) = n.op {
                out.extend(self.value(a).iter().map(|&x| x > T::zero()));
            }
        }
        out
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        check_len("constant", shape, data.len())?;
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn constant_f32(&mut self, shape: &[usize], data: &[f32]) -> Result<Var> {
        self.constant(shape, data.iter().map(|&x| T::of_f32(x)).collect())
    }

    /// Free leaf that receives a gradient (used by tests and probes).
    pub fn variable(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        check_len("variable", shape, data.len())?;
        Ok(self.push(shape.to_vec(), data, Op::Leaf, true))
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t: &Tensor = store.get(name)?;
        let mut value: Vec<T> = t.data().iter().map(|&x| T::of_f32(x)).collect();
        if let Some((pname, idx, delta)) = &self.perturbation {
            if pname == name {
                if *idx >= value.len() {
                    return Err(invalid("param", format!("perturbation index {idx} out of range for `{name}`")));
                }
                value[*idx] += *delta;
            }
        }
        let v = self.push(
            t.shape().to_vec(),
            value,
            Op::Param,
            self.grad_enabled,
        );
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.value(a), self.value(b), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        matmul_nt_acc(self.value(a), self.value(b), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(invalid("transpose", format!("expected rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let x = self.value(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add(a, b), rg))
    }

    /// Adds a vector along the last axis of `a` (bias broadcast over rows).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let n = *sa.last().unwrap_or(&0);
        if sb.iter().product::<usize>() != n || n == 0 {
            return Err(shape_err("add_row", sa, sb));
        }
        let bv = self.value(b);
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = sa.to_vec();
        Ok(self.push(shape, out, Op::AddRow(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Scale(a, s), rg))
    }

    /// Multiplies row `i` of a 2-D tensor by the constant `w[i]`.
    pub fn scale_rows(&mut self, a: Var, w: Vec<T>) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || s[0] != w.len() {
            return Err(shape_err("scale_rows", s, &[w.len()]));
        }
        let n = s[1];
        let out = self
            .value(a)
            .chunks(n)
            .zip(&w)
            .flat_map(|(row, &wi)| row.iter().map(move |&x| x * wi))
            .collect();
        let rg = self.rg(a);
        let shape = s.to_vec();
        Ok(self.push(shape, out, Op::ScaleRows(a, w), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x.max(T::zero())).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Relu(a), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let c = T::of(GELU_C);
        let k = T::of(0.044_715);
        let half = T::of(0.5);
        let out = self
            .value(a)
            .iter()
            .map(|&x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()))
            .collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Gelu(a), rg))
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(invalid("softmax", format!("axis {axis} out of range for {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let x = self.value(a);
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * len * inner + j * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(x[idx(j)]);
                }
                let mut z = T::zero();
                for j in 0..len {
                    let e = (x[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[idx(j)] = out[idx(j)] / z;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(s, out, Op::Softmax { x: a, outer, len, inner }, rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = *s.last().unwrap_or(&0);
        if d == 0 || self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(shape_err("layer_norm", &s, self.shape(gamma)));
        }
        let x = self.value(a);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let rows = x.len() / d;
        let mut out = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let dn = T::of(d as f64);
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(a) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            s,
            out,
            Op::LayerNorm {
                x: a,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of a `V×d` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(invalid("embedding", format!("table must be rank 2, got {s:?}")));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(invalid("embedding", format!("id {bad} out of range for {v} rows")));
        }
        let tv = self.value(table);
        let out = ids
            .iter()
            .flat_map(|&i| tv[i * d..(i + 1) * d].iter().copied())
            .collect();
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates rank-2 tensors along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(invalid("concat", "need at least one part and axis 0 or 1"));
        }
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 2 {
            return Err(invalid("concat", format!("expected rank 2, got {first:?}")));
        }
        let other = 1 - axis;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[other] != first[other] {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let out = if axis == 0 {
            parts.iter().flat_map(|&p| self.value(p).iter().copied()).collect()
        } else {
            let rows = first[0];
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for &p in parts {
                    let c = self.shape(p)[1];
                    out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
                }
            }
            out
        };
        let shape = if axis == 0 {
            vec![total, first[1]]
        } else {
            vec![first[0], total]
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Half-open slice `[start, end)` of a rank-2 tensor along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || axis > 1 || start >= end || end > s[axis] {
            return Err(invalid(
                "slice",
                format!("[{start}, {end}) on axis {axis} of {s:?}"),
            ));
        }
        let x = self.value(a);
        let (out, shape) = if axis == 0 {
            (x[start * s[1]..end * s[1]].to_vec(), vec![end - start, s[1]])
        } else {
            let w = end - start;
            let mut out = Vec::with_capacity(s[0] * w);
            for r in 0..s[0] {
                out.extend_from_slice(&x[r * s[1] + start..r * s[1] + end]);
            }
            (out, vec![s[0], w])
        };
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Slice { x: a, axis, start }, rg))
    }

    /// Inverted dropout. Identity unless the graph was built with
    /// [`Graph::training`].
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid("dropout", format!("rate {p} not in [0, 1)")));
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(a);
        };
        if p == 0.0 {
            return Ok(a);
        }
        let n = self.nodes[a.0].value.len();
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = zip_map(self.value(a), &mask, |x, m| x * m);
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Dropout { x: a, mask }, rg))
    }

    /// Mean token-level negative log-likelihood over non-pad targets.
    /// `logits` has the vocabulary on its last axis; leading axes are
    /// flattened and must match `targets.len()`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad: usize) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let v = *s.last().unwrap_or(&0);
        if v == 0 || self.value(logits).len() != targets.len() * v {
            return Err(shape_err("cross_entropy", &s, &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(invalid("cross_entropy", format!("target {bad} outside vocabulary of {v}")));
        }
        let count = targets.iter().filter(|&&t| t != pad).count();
        if count == 0 {
            return Err(NnError::EmptyLoss);
        }
        let x = self.value(logits);
        let mut probs = vec![T::zero(); x.len()];
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &x[r * v..(r + 1) * v];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&l| (l - mx).exp()).sum();
            let lz = z.ln() + mx;
            for j in 0..v {
                probs[r * v + j] = (row[j] - lz).exp();
            }
            if t != pad {
                total += lz - row[t];
            }
        }
        let loss = total / T::of(count as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad,
                probs,
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        Ok(self.push(vec![1], vec![s], Op::Sum(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        check_len("reshape", shape, self.value(a).len())?;
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), rg))
    }

    /// Backpropagates from a scalar node. Gradients are available through
    /// [`Graph::grad`] and [`Graph::param_grads`] afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(invalid("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let want = |v: Var| nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                grad_slot(grads, nodes, $v)
            };
        }
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if want(*a) {
                    matmul_nt_acc(g, &nodes[b.0].value, m, n, k, acc!(*a));
                }
                if want(*b) {
                    matmul_tn_acc(&nodes[a.0].value, g, m, k, n, acc!(*b));
                }
            }
            Op::MatMulNT(a, b) => {
                // c = a·bᵀ, a: m×k, b: n×k
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                if want(*a) {
                    matmul_acc(g, &nodes[b.0].value, m, n, k, acc!(*a));
                }
                if want(*b) {
                    matmul_tn_acc(g, &nodes[a.0].value, m, n, k, acc!(*b));
                }
            }
            Op::Transpose(a) => {
                if want(*a) {
                    let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let ga = acc!(*a);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if want(v) {
                        add_into(acc!(v), g);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if want(*a) {
                    add_into(acc!(*a), g);
                }
                if want(*b) {
                    let gb = acc!(*b);
                    let n = gb.len();
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let bv = &nodes[b.0].value;
                    for ((o, &gi), &y) in acc!(*a).iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                }
                if want(*b) {
                    let av = &nodes[a.0].value;
                    for ((o, &gi), &x) in acc!(*b).iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if want(*a) {
                    for (o, &gi) in acc!(*a).iter_mut().zip(g) {
                        *o += gi * *s;
                    }
                }
            }
            Op::ScaleRows(a, w) => {
                if want(*a) {
                    let n = nodes[a.0].shape[1];
                    let ga = acc!(*a);
                    for (r, &wi) in w.iter().enumerate() {
                        for j in 0..n {
                            ga[r * n + j] += g[r * n + j] * wi;
                        }
                    }
                }
            }
            Op::Relu(a) => {
                if want(*a) {
                    let x = &nodes[a.0].value;
                    for ((o, &gi), &xi) in acc!(*a).iter_mut().zip(g).zip(x) {
                        if xi > T::zero() {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if want(*a) {
                    let c = T::of(GELU_C);
                    let k = T::of(0.044_715);
                    let half = T::of(0.5);
                    let three = T::of(3.0);
                    let x = &nodes[a.0].value;
                    for ((o, &gi), &xi) in acc!(*a).iter_mut().zip(g).zip(x) {
                        let t = (c * (xi + k * xi * xi * xi)).tanh();
                        let d = half * (T::one() + t)
                            + half * xi * (T::one() - t * t) * c * (T::one() + three * k * xi * xi);
                        *o += gi * d;
                    }
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                if want(*x) {
                    let y = &node.value;
                    let gx = acc!(*x);
                    for o in 0..*outer {
                        for ii in 0..*inner {
                            let idx = |j: usize| o * len * inner + j * inner + ii;
                            let mut dotp = T::zero();
                            for j in 0..*len {
                                dotp += g[idx(j)] * y[idx(j)];
                            }
                            for j in 0..*len {
                                gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dotp);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = nodes[gamma.0].value.len();
                let gv = &nodes[gamma.0].value;
                if want(*gamma) {
                    let gg = acc!(*gamma);
                    for (row_g, row_h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += row_g[j] * row_h[j];
                        }
                    }
                }
                if want(*beta) {
                    let gb = acc!(*beta);
                    for row_g in g.chunks(d) {
                        add_into(gb, row_g);
                    }
                }
                if want(*x) {
                    let dn = T::of(d as f64);
                    let gx = acc!(*x);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let row_g = &g[r * d..(r + 1) * d];
                        let row_h = &xhat[r * d..(r + 1) * d];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = row_g[j] * gv[j];
                            s1 += dh;
                            s2 += dh * row_h[j];
                        }
                        for j in 0..d {
                            let dh = row_g[j] * gv[j];
                            gx[r * d + j] += rs * (dh - s1 / dn - row_h[j] * s2 / dn);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if want(*table) {
                    let d = nodes[table.0].shape[1];
                    let gt = acc!(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let total_cols = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let s = nodes[p.0].shape.clone();
                    if want(p) {
                        let gp = acc!(p);
                        if *axis == 0 {
                            let n = s[0] * s[1];
                            add_into(gp, &g[offset..offset + n]);
                        } else {
                            for r in 0..s[0] {
                                let src = &g[r * total_cols + offset..r * total_cols + offset + s[1]];
                                add_into(&mut gp[r * s[1]..(r + 1) * s[1]], src);
                            }
                        }
                    }
                    offset += if *axis == 0 { s[0] * s[1] } else { s[1] };
                }
            }
            Op::Slice { x, axis, start } => {
                if want(*x) {
                    let s = nodes[x.0].shape.clone();
                    let gx = acc!(*x);
                    if *axis == 0 {
                        add_into(&mut gx[start * s[1]..start * s[1] + g.len()], g);
                    } else {
                        let w = node.shape[1];
                        for r in 0..s[0] {
                            let dst = &mut gx[r * s[1] + start..r * s[1] + start + w];
                            add_into(dst, &g[r * w..(r + 1) * w]);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if want(*x) {
                    for ((o, &gi), &m) in acc!(*x).iter_mut().zip(g).zip(mask) {
                        *o += gi * m;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad,
                probs,
                count,
            } => {
                if want(*logits) {
                    let v = *nodes[logits.0].shape.last().unwrap();
                    let scale = g[0] / T::of(*count as f64);
                    let gl = acc!(*logits);
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad {
                            continue;
                        }
                        for j in 0..v {
                            gl[r * v + j] += scale * probs[r * v + j];
                        }
                        gl[r * v + t] = gl[r * v + t] - scale;
                    }
                }
            }
            Op::Sum(a) => {
                if want(*a) {
                    let g0 = g[0];
                    acc!(*a).iter_mut().for_each(|o| *o += g0);
                }
            }
            Op::Reshape(a) => {
                if want(*a) {
                    add_into(acc!(*a), g);
                }
            }
        }
        Ok(())
    }

    /// Gradients of every bound parameter, converted to f32.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f32>> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = match self.grad(v) {
                    Some(g) => g.iter().map(|&x| x.as_f32()).collect(),
                    None => vec![0.0; self.nodes[v.0].value.len()],
                };
                (name.clone(), g)
            })
            .collect()
    }

    /// Gradients of every bound parameter in the graph's own precision.
    pub fn param_grads_exact(&self) -> BTreeMap<String, Vec<T>> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = match self.grad(v) {
                    Some(g) => g.to_vec(),
                    None => vec![T::zero(); self.nodes[v.0].value.len()],
                };
                (name.clone(), g)
            })
            .collect()
    }
}

fn grad_slot<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> &'a mut Vec<T> {
    let len = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn check_len(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().product::<usize>() != len {
        return Err(invalid(op, format!("shape {shape:?} does not hold {len} values")));
    }
    Ok(())
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
