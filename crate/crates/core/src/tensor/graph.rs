use super::kernels::{mm_nn, mm_nt, mm_tn};
use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    MaskMul(Var, Vec<T>),
    Sum(Var),
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
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Reshape(Var),
    Permute0213 {
        x: Var,
        dims: [usize; 4],
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    PrependToken {
        x: Var,
        token: Var,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed operations.
///
/// Values are computed eagerly when an op is recorded. [`Graph::backward`]
/// consumes the graph and visits every recorded op once, newest first.
/// A graph is confined to the thread that built it.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Scalar>(op: &'static str, values: &[T]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        op: Op<T>,
    ) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        check_finite(op_name, &value)?;
        let needs_grad = match &op {
            Op::Leaf => false,
            other => inputs(other).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Records a tensor as a leaf. It receives a gradient iff it requires one.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<Var> {
        let v = self.push("leaf", t.shape.clone(), t.data.clone(), Op::Leaf)?;
        self.nodes[v.0].needs_grad = t.requires_grad;
        Ok(v)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "constant",
                format!("{shape:?} vs {} values", data.len()),
            ));
        }
        self.push("constant", shape, data, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        mm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    /// Batched product of `[B,m,k]` with `[B,k,n]`, or with `[B,n,k]` when
    /// `transpose_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || {
            Error::shape(
                "batch_matmul",
                format!("{sa:?} x {sb:?} (transpose_b={transpose_b})"),
            )
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b {
            if sb[2] != k {
                return Err(bad());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(bad());
            }
            sb[2]
        };
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..batch {
            let ai = &av[i * m * k..(i + 1) * m * k];
            let bi = &bv[i * k * n..(i + 1) * k * n];
            let oi = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                mm_nt(ai, bi, oi, m, k, n);
            } else {
                mm_nn(ai, bi, oi, m, k, n);
            }
        }
        self.push(
            "batch_matmul",
            vec![batch, m, n],
            out,
            Op::BatchMatMul { a, b, transpose_b },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        self.push("add", self.shape(a).to_vec(), out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} * {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        self.push("mul", self.shape(a).to_vec(), out, Op::Mul(a, b))
    }

    /// Adds `bias` to every trailing block of `x`: `x` has shape
    /// `[lead.., bias.shape..]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() > sx.len() || sb.is_empty() || sx[sx.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let bv = self.value(bias);
        let out = self
            .value(x)
            .chunks(bv.len())
            .flat_map(|row| row.iter().zip(bv).map(|(&a, &b)| a + b))
            .collect();
        self.push("add_bias", sx.to_vec(), out, Op::AddBias(x, bias))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        self.push("scale", self.shape(x).to_vec(), out, Op::Scale(x, c))
    }

    /// Elementwise product with a constant factor tensor (dropout masks).
    pub fn mask_mul(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        if factors.len() != self.value(x).len() {
            return Err(Error::shape(
                "mask_mul",
                format!("{} factors for {:?}", factors.len(), self.shape(x)),
            ));
        }
        let out = self
            .value(x)
            .iter()
            .zip(&factors)
            .map(|(&v, &f)| v * f)
            .collect();
        self.push(
            "mask_mul",
            self.shape(x).to_vec(),
            out,
            Op::MaskMul(x, factors),
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).iter().copied().sum();
        self.push("sum", Vec::new(), vec![s], Op::Sum(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        self.push("relu", self.shape(x).to_vec(), out, Op::Relu(x))
    }

    /// Exact GELU, `x·Φ(x)` with the Gaussian CDF written through `erf`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        self.push("gelu", self.shape(x).to_vec(), out, Op::Gelu(x))
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} for {shape:?}"),
            ));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| o * len * inner + a * inner + i;
                let mut max = T::neg_infinity();
                for a in 0..len {
                    max = max.max(xv[at(a)]);
                }
                let mut total = T::zero();
                for a in 0..len {
                    let e = (xv[at(a)] - max).exp();
                    out[at(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    out[at(a)] /= total;
                }
            }
        }
        self.push(
            "softmax",
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
        )
    }

    /// Softmax over the last axis of `[.., S, S]` scores where entry `(r, c)`
    /// with `c > r` is excluded and receives probability exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || shape[shape.len() - 1] != shape[shape.len() - 2] {
            return Err(Error::shape(
                "causal_softmax",
                format!("{shape:?} is not [.., S, S]"),
            ));
        }
        let s = shape[shape.len() - 1];
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for (r, (row, orow)) in xv.chunks(s).zip(out.chunks_mut(s)).enumerate() {
            let visible = r % s + 1;
            let max = row[..visible]
                .iter()
                .fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut total = T::zero();
            for c in 0..visible {
                let e = (row[c] - max).exp();
                orow[c] = e;
                total += e;
            }
            for o in &mut orow[..visible] {
                *o /= total;
            }
        }
        let outer = xv.len() / s;
        self.push(
            "causal_softmax",
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                len: s,
                inner: 1,
            },
        )
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} for last extent {d}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let eps = T::from_f64(eps);
        let dn = T::from_f64(d as f64);
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv[c] + bv[c];
            }
        }
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Rows of `table` (`[V, d]`) selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::shape("embedding", format!("table shape {st:?}")));
        }
        let (vocab, d) = (st[0], st[1]);
        if ids.is_empty() {
            return Err(Error::shape("embedding", "no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Index {
                op: "embedding",
                index: bad,
                bound: vocab,
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        self.push(
            "embedding",
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sl = self.shape(logits);
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {sl:?} with {} targets", targets.len()),
            ));
        }
        let (b, c) = (sl[0], sl[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                bound: c,
            });
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); b * c];
        let mut total = T::zero();
        for r in 0..b {
            let row = &lv[r * c..(r + 1) * c];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * c + j] = e;
                z += e;
            }
            for p in &mut probs[r * c..(r + 1) * c] {
                *p /= z;
            }
            total += z.ln() + max - row[targets[r]];
        }
        let loss = total / T::from_f64(b as f64);
        self.push(
            "cross_entropy",
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let out = self.value(x).to_vec();
        self.push("reshape", shape, out, Op::Reshape(x))
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn permute_0213(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::shape("permute_0213", format!("{s:?} is not rank 4")));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let out = permute_0213(self.value(x), dims);
        self.push(
            "permute_0213",
            vec![dims[0], dims[2], dims[1], dims[3]],
            out,
            Op::Permute0213 { x, dims },
        )
    }

    /// Picks rows of `x` viewed as `[shape[0], rest]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("gather_rows", format!("{s:?}")));
        }
        let width = numel(&s[1..]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= s[0]) {
            return Err(Error::Index {
                op: "gather_rows",
                index: bad,
                bound: s[0],
            });
        }
        if rows.is_empty() {
            return Err(Error::shape("gather_rows", "no rows"));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&xv[r * width..(r + 1) * width]);
        }
        let mut shape = s;
        shape[0] = rows.len();
        self.push(
            "gather_rows",
            shape,
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// Prepends one shared `[d]` token to every sequence of `[B, P, d]`.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let (sx, st) = (self.shape(x).to_vec(), self.shape(token).to_vec());
        if sx.len() != 3 || numel(&st) != sx[2] {
            return Err(Error::shape(
                "prepend_token",
                format!("{sx:?} with token {st:?}"),
            ));
        }
        let (b, p, d) = (sx[0], sx[1], sx[2]);
        let (xv, tv) = (self.value(x), self.value(token));
        let mut out = Vec::with_capacity(b * (p + 1) * d);
        for i in 0..b {
            out.extend_from_slice(tv);
            out.extend_from_slice(&xv[i * p * d..(i + 1) * p * d]);
        }
        self.push(
            "prepend_token",
            vec![b, p + 1, d],
            out,
            Op::PrependToken { x, token },
        )
    }

    /// Runs reverse-mode differentiation from a scalar `loss`.
    ///
    /// Consumes the graph. Each recorded op is visited once, in reverse
    /// execution order.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let nodes = &self.nodes;
        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            if !matches!(node.op, Op::Leaf) {
                backprop(nodes, node, &gy, &mut grads)?;
            }
            grads[idx] = Some(gy);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (&n.op, g) {
                (Op::Leaf, Some(g)) if n.needs_grad => Some(g),
                (Op::Leaf, None) if n.needs_grad => Some(vec![T::zero(); n.value.len()]),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Gradients of leaves that required them, keyed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a grad-requiring leaf. Leaves off the path to the loss get zeros.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Adds the gradient of `v` into `t.grad`, creating it if needed.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<T>) -> Result<()> {
        let Some(g) = self.get(v) else {
            return Ok(());
        };
        match &mut t.grad {
            Some(existing) if existing.len() == g.len() => {
                for (e, &d) in existing.iter_mut().zip(g) {
                    *e += d;
                }
                Ok(())
            }
            _ => t.set_grad(g.to_vec()),
        }
    }
}

fn inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => vec![*a, *b],
        Op::BatchMatMul { a, b, .. } => vec![*a, *b],
        Op::Scale(x, _)
        | Op::MaskMul(x, _)
        | Op::Sum(x)
        | Op::Relu(x)
        | Op::Gelu(x)
        | Op::Reshape(x) => vec![*x],
        Op::Softmax { x, .. } | Op::Permute0213 { x, .. } | Op::GatherRows { x, .. } => vec![*x],
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Op::Embedding { table, .. } => vec![*table],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::PrependToken { x, token } => vec![*x, *token],
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::from_f64(0.398_942_280_401_432_7);
    cdf + x * pdf
}

fn permute_0213<T: Scalar>(src: &[T], [a, b, c, d]: [usize; 4]) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let from = ((i * b + j) * c + k) * d;
                let to = ((i * c + k) * b + j) * d;
                out[to..to + d].copy_from_slice(&src[from..from + d]);
            }
        }
    }
    out
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    target: Var,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[target.0].needs_grad {
        return;
    }
    let n = nodes[target.0].value.len();
    let slot = grads[target.0].get_or_insert_with(|| vec![T::zero(); n]);
    f(slot);
}

fn backprop<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    gy: &[T],
    grads: &mut [Option<Vec<T>>],
) -> Result<()> {
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            accumulate(nodes, grads, *a, |ga| mm_nt(gy, bv, ga, m, n, k));
            accumulate(nodes, grads, *b, |gb| mm_tn(av, gy, gb, k, m, n));
        }
        Op::BatchMatMul { a, b, transpose_b } => {
            let (sa, so) = (&nodes[a.0].shape, &node.shape);
            let (batch, m, k, n) = (sa[0], sa[1], sa[2], so[2]);
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let bsz = k * n;
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..batch {
                    let g = &gy[i * m * n..(i + 1) * m * n];
                    let bi = &bv[i * bsz..(i + 1) * bsz];
                    let gai = &mut ga[i * m * k..(i + 1) * m * k];
                    if *transpose_b {
                        mm_nn(g, bi, gai, m, n, k);
                    } else {
                        mm_nt(g, bi, gai, m, n, k);
                    }
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for i in 0..batch {
                    let g = &gy[i * m * n..(i + 1) * m * n];
                    let ai = &av[i * m * k..(i + 1) * m * k];
                    let gbi = &mut gb[i * bsz..(i + 1) * bsz];
                    if *transpose_b {
                        mm_tn(g, ai, gbi, n, m, k);
                    } else {
                        mm_tn(ai, g, gbi, k, m, n);
                    }
                }
            });
        }
        Op::Add(a, b) => {
            for t in [a, b] {
                accumulate(nodes, grads, *t, |g| {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d)
                });
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            accumulate(nodes, grads, *a, |g| {
                for ((g, &d), &y) in g.iter_mut().zip(gy).zip(bv) {
                    *g += d * y;
                }
            });
            accumulate(nodes, grads, *b, |g| {
                for ((g, &d), &x) in g.iter_mut().zip(gy).zip(av) {
                    *g += d * x;
                }
            });
        }
        Op::AddBias(x, bias) => {
            accumulate(nodes, grads, *x, |g| {
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d)
            });
            let w = nodes[bias.0].value.len();
            accumulate(nodes, grads, *bias, |g| {
                for row in gy.chunks(w) {
                    g.iter_mut().zip(row).for_each(|(g, &d)| *g += d);
                }
            });
        }
        Op::Scale(x, c) => {
            accumulate(nodes, grads, *x, |g| {
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d * *c)
            });
        }
        Op::MaskMul(x, f) => {
            accumulate(nodes, grads, *x, |g| {
                for ((g, &d), &f) in g.iter_mut().zip(gy).zip(f) {
                    *g += d * f;
                }
            });
        }
        Op::Sum(x) => {
            accumulate(nodes, grads, *x, |g| g.iter_mut().for_each(|g| *g += gy[0]));
        }
        Op::Relu(x) => {
            let xv = &nodes[x.0].value;
            accumulate(nodes, grads, *x, |g| {
                for ((g, &d), &v) in g.iter_mut().zip(gy).zip(xv) {
                    if v > T::zero() {
                        *g += d;
                    }
                }
            });
        }
        Op::Gelu(x) => {
            let xv = &nodes[x.0].value;
            accumulate(nodes, grads, *x, |g| {
                for ((g, &d), &v) in g.iter_mut().zip(gy).zip(xv) {
                    *g += d * gelu_grad(v);
                }
            });
        }
        Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => {
            let y = &node.value;
            let (outer, len, inner) = (*outer, *len, *inner);
            accumulate(nodes, grads, *x, |g| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| o * len * inner + a * inner + i;
                        let dot: T = (0..len).map(|a| y[at(a)] * gy[at(a)]).sum();
                        for a in 0..len {
                            g[at(a)] += y[at(a)] * (gy[at(a)] - dot);
                        }
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = nodes[gain.0].value.len();
            let gv = &nodes[gain.0].value;
            let dn = T::from_f64(d as f64);
            accumulate(nodes, grads, *gain, |g| {
                for (row_g, row_h) in gy.chunks(d).zip(xhat.chunks(d)) {
                    for c in 0..d {
                        g[c] += row_g[c] * row_h[c];
                    }
                }
            });
            accumulate(nodes, grads, *bias, |g| {
                for row in gy.chunks(d) {
                    g.iter_mut().zip(row).for_each(|(g, &v)| *g += v);
                }
            });
            accumulate(nodes, grads, *x, |g| {
                for (r, ((row_g, row_h), gx)) in gy
                    .chunks(d)
                    .zip(xhat.chunks(d))
                    .zip(g.chunks_mut(d))
                    .enumerate()
                {
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for c in 0..d {
                        let dh = row_g[c] * gv[c];
                        mean_dh += dh;
                        mean_dh_h += dh * row_h[c];
                    }
                    mean_dh /= dn;
                    mean_dh_h /= dn;
                    for c in 0..d {
                        let dh = row_g[c] * gv[c];
                        gx[c] += rstd[r] * (dh - mean_dh - row_h[c] * mean_dh_h);
                    }
                }
            });
        }
        Op::Embedding { table, ids } => {
            let d = nodes[table.0].shape[1];
            accumulate(nodes, grads, *table, |g| {
                for (row, &id) in gy.chunks(d).zip(ids) {
                    g[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(g, &v)| *g += v);
                }
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let c = nodes[logits.0].shape[1];
            let scale = gy[0] / T::from_f64(targets.len() as f64);
            accumulate(nodes, grads, *logits, |g| {
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        g[r * c + j] += (probs[r * c + j] - onehot) * scale;
                    }
                }
            });
        }
        Op::Reshape(x) => {
            accumulate(nodes, grads, *x, |g| {
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d)
            });
        }
        Op::Permute0213 { x, dims } => {
            let back = permute_0213(gy, [dims[0], dims[2], dims[1], dims[3]]);
            accumulate(nodes, grads, *x, |g| {
                g.iter_mut().zip(&back).for_each(|(g, &d)| *g += d)
            });
        }
        Op::GatherRows { x, rows } => {
            let width = numel(&nodes[x.0].shape[1..]);
            accumulate(nodes, grads, *x, |g| {
                for (row, &r) in gy.chunks(width).zip(rows) {
                    g[r * width..(r + 1) * width]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(g, &v)| *g += v);
                }
            });
        }
        Op::PrependToken { x, token } => {
            let sx = &nodes[x.0].shape;
            let (b, p, d) = (sx[0], sx[1], sx[2]);
            let stride = (p + 1) * d;
            accumulate(nodes, grads, *token, |g| {
                for i in 0..b {
                    g.iter_mut()
                        .zip(&gy[i * stride..i * stride + d])
                        .for_each(|(g, &v)| *g += v);
                }
            });
            accumulate(nodes, grads, *x, |g| {
                for i in 0..b {
                    let src = &gy[i * stride + d..(i + 1) * stride];
                    g[i * p * d..(i + 1) * p * d]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(g, &v)| *g += v);
                }
            });
        }
    }
    Ok(())
}
