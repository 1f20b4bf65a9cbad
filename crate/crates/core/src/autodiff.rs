//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The graph is rebuilt on every forward pass (define-by-run): each op appends
//! a node recording its parents and enough saved state for the backward sweep.
//! `backward` walks the record in exact reverse, accumulating adjoints by sum
//! into every node that transitively feeds a trainable leaf. Repeated
//! `backward` calls without a fresh graph keep accumulating.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// a[m,k] · b[k,n]
    Matmul(Var, Var),
    /// m[r,c] · v[c] -> [r]
    MatVec(Var, Var),
    /// v[r] · m[r,c] -> [c]
    VecMat(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// m[r,c] + v[c] broadcast over rows
    AddRows(Var, Var),
    /// x * s with s a scalar node
    MulScalar(Var, Var),
    /// x * k, constant k
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxLastDim {
        x: Var,
        mask: Option<Vec<bool>>,
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
    Reshape(Var),
    Sum(Var),
    CrossEntropyLs {
        logits: Var,
        targets: Vec<usize>,
        smoothing: f64,
        step_mask: Option<Vec<bool>>,
    },
    /// Fused LSTM cell body. `gates` is the `[4H]` pre-activation stack
    /// (input, forget, cell, output); `state` is `[2H]` packed `h|c` of which
    /// only the cell half is consumed (the hidden half feeds the gates
    /// upstream). Output is packed `h'|c'`. `saved` holds the activations
    /// (i, f, g, o, tanh(c')) the backward pass needs, stacked as `[5H]`.
    LstmCell {
        gates: Var,
        state: Var,
        saved: Vec<f64>,
    },
    /// A whole unidirectional LSTM pass from a zero initial state, all T
    /// recurrence steps in one node. `pre` is the batched input transform
    /// `[T, 4H]` (bias folded in); `w_h` the recurrent weights `[4H, H]`.
    /// Output is `[T + 1, H]`: hidden states in time order, then the final
    /// cell state as the extra row. `saved` keeps per-step activations
    /// (i, f, g, o, tanh(c), c) as `[T, 6H]`, indexed by time.
    LstmSeq {
        pre: Var,
        w_h: Var,
        reversed: bool,
        saved: Vec<f64>,
    },
    /// Row `r` of a matrix, as a vector.
    Row {
        x: Var,
        r: usize,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated adjoint of `v`, if the backward sweep reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Inserts a tensor the backward sweep will not differentiate through.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// Inserts a trainable leaf; `grad` is populated by [`Graph::backward`].
    pub fn trainable(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Inserts a leaf, trainable or not.
    pub fn leaf(&mut self, t: Tensor, trainable: bool) -> Var {
        self.push(t, trainable, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, needs, Op::Matmul(a, b)))
    }

    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (r, c) = self.value(m).dims2()?;
        if self.value(v).shape() != [c] {
            return Err(Error::dim(
                "matvec",
                self.value(m).shape(),
                self.value(v).shape(),
            ));
        }
        let md = self.value(m).data();
        let vd = self.value(v).data();
        let mut out = vec![0.0; r];
        for i in 0..r {
            out[i] = dot(&md[i * c..(i + 1) * c], vd);
        }
        let needs = self.needs(m) || self.needs(v);
        Ok(self.push(Tensor::vector(out), needs, Op::MatVec(m, v)))
    }

    pub fn vecmat(&mut self, v: Var, m: Var) -> Result<Var> {
        let (r, c) = self.value(m).dims2()?;
        if self.value(v).shape() != [r] {
            return Err(Error::dim(
                "vecmat",
                self.value(v).shape(),
                self.value(m).shape(),
            ));
        }
        let md = self.value(m).data();
        let vd = self.value(v).data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            axpy(vd[i], &md[i * c..(i + 1) * c], &mut out);
        }
        let needs = self.needs(m) || self.needs(v);
        Ok(self.push(Tensor::vector(out), needs, Op::VecMat(v, m)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![c, r], out)?, needs, Op::Transpose(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn binary_same_shape(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(name, self.value(a).shape(), self.value(b).shape()));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, needs, op))
    }

    /// Adds a length-`c` vector to every row of an `[r, c]` matrix.
    pub fn add_rows(&mut self, m: Var, v: Var) -> Result<Var> {
        let (r, c) = self.value(m).dims2()?;
        if self.value(v).shape() != [c] {
            return Err(Error::dim(
                "add_rows",
                self.value(m).shape(),
                self.value(v).shape(),
            ));
        }
        let vd = self.value(v).data().to_vec();
        let md = self.value(m).data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(md[i * c + j] + vd[j]);
            }
        }
        let needs = self.needs(m) || self.needs(v);
        Ok(self.push(Tensor::new(vec![r, c], out)?, needs, Op::AddRows(m, v)))
    }

    /// Multiplies every element of `x` by the scalar node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::Contract(format!(
                "mul_scalar: scale must be a scalar, got shape {:?}",
                self.value(s).shape()
            )));
        }
        let sv = self.value(s).data()[0];
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| v * sv).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(Tensor::new(shape, out)?, needs, Op::MulScalar(x, s)))
    }

    /// Multiplies by a compile-time constant (no gradient for `k`).
    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| v * k).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push(
            Tensor::new(shape, out).expect("shape preserved"),
            needs,
            Op::Scale(x, k),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| v.tanh()).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push(
            Tensor::new(shape, out).expect("shape preserved"),
            needs,
            Op::Tanh(x),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push(
            Tensor::new(shape, out).expect("shape preserved"),
            needs,
            Op::Sigmoid(x),
        )
    }

    /// Softmax over the last dimension, max-stabilized.
    ///
    /// `mask`, when present, has one flag per element; `false` entries get
    /// probability exactly 0 and receive no gradient. A row with every entry
    /// masked is an error.
    pub fn softmax_last_dim(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let cols = *shape.last().ok_or(Error::Contract(
            "softmax_last_dim: rank-0 input".to_string(),
        ))?;
        let numel = self.value(x).numel();
        if let Some(m) = mask {
            if m.len() != numel {
                return Err(Error::dim("softmax_mask", &shape, &[m.len()]));
            }
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; numel];
        for row in 0..numel / cols {
            let lo = row * cols;
            let hi = lo + cols;
            let keep = |j: usize| mask.map_or(true, |m| m[lo + j]);
            let mut maxv = f64::NEG_INFINITY;
            for j in 0..cols {
                if keep(j) {
                    maxv = maxv.max(xd[lo + j]);
                }
            }
            if maxv == f64::NEG_INFINITY {
                return Err(Error::InvalidMask(format!(
                    "softmax row {row} has no unmasked entries"
                )));
            }
            let mut denom = 0.0;
            for j in 0..cols {
                if keep(j) {
                    let e = (xd[lo + j] - maxv).exp();
                    out[lo + j] = e;
                    denom += e;
                }
            }
            for v in &mut out[lo..hi] {
                *v /= denom;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            needs,
            Op::SoftmaxLastDim {
                x,
                mask: mask.map(|m| m.to_vec()),
            },
        ))
    }

    /// Concatenates tensors along `axis`. Rank must match; all other extents
    /// must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptySequence("concat"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Contract(format!(
                "concat: axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len() {
                return Err(Error::dim("concat", &first, s));
            }
            for (d, (&a, &b)) in first.iter().zip(s).enumerate() {
                if d != axis && a != b {
                    return Err(Error::dim("concat", &first, s));
                }
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;

        // Row-major juxtaposition: copy per outer slab.
        let outer: usize = first[..axis].iter().product();
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let s = self.value(p).shape();
                let inner: usize = s[axis..].iter().product();
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * inner..(o + 1) * inner]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            needs,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "slice: axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        if start + len > shape[axis] || len == 0 {
            return Err(Error::Contract(format!(
                "slice: [{start}, {}) out of range for extent {}",
                start + len,
                shape[axis]
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(new_shape, out)?,
            needs,
            Op::Slice { x, axis, start },
        ))
    }

    /// Row `r` of a matrix, as a vector.
    pub fn row(&mut self, x: Var, r: usize) -> Result<Var> {
        let (rows, c) = self.value(x).dims2()?;
        if r >= rows {
            return Err(Error::Contract(format!(
                "row {r} out of range for {rows} rows"
            )));
        }
        let data = self.value(x).data()[r * c..(r + 1) * c].to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::vector(data), needs, Op::Row { x, r }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::dim("reshape", self.value(x).shape(), &shape));
        }
        let t = Tensor::new(shape, self.value(x).data().to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(t, needs, Op::Reshape(x)))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), needs, Op::Sum(x))
    }

    /// Mean label-smoothed cross entropy over the unmasked rows of
    /// `logits[steps, v]` against integer targets.
    ///
    /// The smoothed target distribution puts `1 - smoothing` on the target id
    /// and `smoothing / (v - 1)` on every other id.
    pub fn cross_entropy_ls(
        &mut self,
        logits: Var,
        targets: &[usize],
        smoothing: f64,
        step_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (steps, v) = self.value(logits).dims2()?;
        if targets.len() != steps {
            return Err(Error::dim("cross_entropy", &[steps, v], &[targets.len()]));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Contract(format!(
                "cross_entropy: smoothing {smoothing} outside [0, 1)"
            )));
        }
        for &t in targets {
            if t >= v {
                return Err(Error::Vocabulary { id: t, vocab: v });
            }
        }
        if let Some(m) = step_mask {
            if m.len() != steps {
                return Err(Error::dim("cross_entropy_mask", &[steps], &[m.len()]));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::InvalidMask(
                    "cross_entropy: every step masked".to_string(),
                ));
            }
        }
        let xd = self.value(logits).data();
        let off = if v > 1 { smoothing / (v as f64 - 1.0) } else { 0.0 };
        let on = 1.0 - smoothing;
        let mut total = 0.0;
        let mut n = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            if step_mask.map_or(false, |m| !m[i]) {
                continue;
            }
            let row = &xd[i * v..(i + 1) * v];
            let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = maxv + row.iter().map(|&x| (x - maxv).exp()).sum::<f64>().ln();
            // -sum_j q_j * log p_j with q the smoothed one-hot
            let mut loss = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let q = if j == t { on } else { off };
                if q != 0.0 {
                    loss -= q * (x - lse);
                }
            }
            total += loss;
            n += 1;
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            needs,
            Op::CrossEntropyLs {
                logits,
                targets: targets.to_vec(),
                smoothing,
                step_mask: step_mask.map(|m| m.to_vec()),
            },
        ))
    }

    /// Fused LSTM cell: consumes the `[4H]` gate pre-activations and the
    /// packed `[2H]` previous state (`h|c`), returns packed `h'|c'`.
    pub fn lstm_cell(&mut self, gates: Var, state: Var) -> Result<Var> {
        let gshape = self.value(gates).shape();
        if gshape.len() != 1 || gshape[0] % 4 != 0 {
            return Err(Error::Contract(format!(
                "lstm_cell: gates must be a [4H] vector, got {gshape:?}"
            )));
        }
        let h = gshape[0] / 4;
        if self.value(state).shape() != [2 * h] {
            return Err(Error::dim(
                "lstm_cell",
                self.value(gates).shape(),
                self.value(state).shape(),
            ));
        }
        let gd = self.value(gates).data();
        let c_prev = &self.value(state).data()[h..2 * h];
        let mut saved = vec![0.0; 5 * h];
        let mut out = vec![0.0; 2 * h];
        for j in 0..h {
            let i = sigmoid(gd[j]);
            let f = sigmoid(gd[h + j]);
            let cand = gd[2 * h + j].tanh();
            let o = sigmoid(gd[3 * h + j]);
            let c_next = f * c_prev[j] + i * cand;
            let tc = c_next.tanh();
            saved[j] = i;
            saved[h + j] = f;
            saved[2 * h + j] = cand;
            saved[3 * h + j] = o;
            saved[4 * h + j] = tc;
            out[j] = o * tc;
            out[h + j] = c_next;
        }
        let needs = self.needs(gates) || self.needs(state);
        Ok(self.push(
            Tensor::vector(out),
            needs,
            Op::LstmCell {
                gates,
                state,
                saved,
            },
        ))
    }

    /// Runs a full unidirectional LSTM over `pre` (`[T, 4H]`, the batched
    /// `W_x x + b` transform) from a zero initial state. Returns `[T + 1, H]`
    /// whose first `T` rows are the hidden states in time order and whose
    /// last row is the final cell state. `reversed` consumes frames
    /// right-to-left (hidden states still land at their time index).
    pub fn lstm_seq(&mut self, pre: Var, w_h: Var, reversed: bool) -> Result<Var> {
        let (t_len, four_h) = self.value(pre).dims2()?;
        let (wr, h_dim) = self.value(w_h).dims2()?;
        if four_h != 4 * h_dim || wr != four_h {
            return Err(Error::dim(
                "lstm_seq",
                self.value(pre).shape(),
                self.value(w_h).shape(),
            ));
        }
        let pre_d = self.value(pre).data();
        let w = self.value(w_h).data();
        let mut saved = vec![0.0; t_len * 6 * h_dim];
        let mut out = vec![0.0; (t_len + 1) * h_dim];
        let mut h = vec![0.0; h_dim];
        let mut c = vec![0.0; h_dim];
        let mut gates = vec![0.0; 4 * h_dim];
        for s in 0..t_len {
            let t = if reversed { t_len - 1 - s } else { s };
            gates.copy_from_slice(&pre_d[t * four_h..(t + 1) * four_h]);
            for (row, gate) in gates.iter_mut().enumerate() {
                *gate += dot(&w[row * h_dim..(row + 1) * h_dim], &h);
            }
            let sv = &mut saved[t * 6 * h_dim..(t + 1) * 6 * h_dim];
            for j in 0..h_dim {
                let i = sigmoid(gates[j]);
                let f = sigmoid(gates[h_dim + j]);
                let cand = gates[2 * h_dim + j].tanh();
                let o = sigmoid(gates[3 * h_dim + j]);
                let c_next = f * c[j] + i * cand;
                let tc = c_next.tanh();
                sv[j] = i;
                sv[h_dim + j] = f;
                sv[2 * h_dim + j] = cand;
                sv[3 * h_dim + j] = o;
                sv[4 * h_dim + j] = tc;
                sv[5 * h_dim + j] = c_next;
                c[j] = c_next;
                h[j] = o * tc;
            }
            out[t * h_dim..(t + 1) * h_dim].copy_from_slice(&h);
        }
        out[t_len * h_dim..].copy_from_slice(&c);
        let needs = self.needs(pre) || self.needs(w_h);
        Ok(self.push(
            Tensor::new(vec![t_len + 1, h_dim], out)?,
            needs,
            Op::LstmSeq {
                pre,
                w_h,
                reversed,
                saved,
            },
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Adjoints accumulate by sum into every
    /// node on a path to a trainable leaf; repeated calls keep accumulating.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        // Scratch adjoints for this sweep only; persisted at the end so a
        // second sweep contributes exactly one more unit of d(loss)/d(loss).
        let mut adj: Vec<Option<Vec<f64>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(idx, &g, &mut adj)?;
            add_to(&mut self.nodes[idx].grad, &g);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) -> Result<()> {
        // Each arm adds this node's adjoint contribution onto its parents.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = self.value(a).dims2()?;
                let n = self.value(b).shape()[1];
                if self.needs(a) {
                    // dA = G · Bᵀ
                    let bd = self.value(b).data();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            da[i * k + p] = dot(&g[i * n..(i + 1) * n], &bd[p * n..(p + 1) * n]);
                        }
                    }
                    self.accumulate(a, da, adj);
                }
                if self.needs(b) {
                    // dB = Aᵀ · G
                    let ad = self.value(a).data();
                    let mut db = vec![0.0; k * n];
                    for p in 0..k {
                        for i in 0..m {
                            axpy(ad[i * k + p], &g[i * n..(i + 1) * n], &mut db[p * n..(p + 1) * n]);
                        }
                    }
                    self.accumulate(b, db, adj);
                }
            }
            Op::MatVec(m_v, v_v) => {
                let (m_v, v_v) = (*m_v, *v_v);
                let (r, c) = self.value(m_v).dims2()?;
                if self.needs(m_v) {
                    let vd = self.value(v_v).data();
                    let mut dm = vec![0.0; r * c];
                    for i in 0..r {
                        axpy(g[i], vd, &mut dm[i * c..(i + 1) * c]);
                    }
                    self.accumulate(m_v, dm, adj);
                }
                if self.needs(v_v) {
                    let md = self.value(m_v).data();
                    let mut dv = vec![0.0; c];
                    for i in 0..r {
                        axpy(g[i], &md[i * c..(i + 1) * c], &mut dv);
                    }
                    self.accumulate(v_v, dv, adj);
                }
            }
            Op::VecMat(v_v, m_v) => {
                let (v_v, m_v) = (*v_v, *m_v);
                let (r, c) = self.value(m_v).dims2()?;
                if self.needs(v_v) {
                    let md = self.value(m_v).data();
                    let mut dv = vec![0.0; r];
                    for i in 0..r {
                        dv[i] = dot(&md[i * c..(i + 1) * c], g);
                    }
                    self.accumulate(v_v, dv, adj);
                }
                if self.needs(m_v) {
                    let vd = self.value(v_v).data();
                    let mut dm = vec![0.0; r * c];
                    for i in 0..r {
                        axpy(vd[i], g, &mut dm[i * c..(i + 1) * c]);
                    }
                    self.accumulate(m_v, dm, adj);
                }
            }
            Op::Transpose(x) => {
                let x = *x;
                let (r, c) = self.value(x).dims2()?;
                // output is [c, r]; route gᵀ back
                let mut dx = vec![0.0; r * c];
                for i in 0..c {
                    for j in 0..r {
                        dx[j * c + i] = g[i * r + j];
                    }
                }
                self.accumulate(x, dx, adj);
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    self.accumulate(a, g.to_vec(), adj);
                }
                if self.needs(b) {
                    self.accumulate(b, g.to_vec(), adj);
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    self.accumulate(a, g.to_vec(), adj);
                }
                if self.needs(b) {
                    let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
                    self.accumulate(b, neg, adj);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let bd = self.value(b).data();
                    let da: Vec<f64> = g.iter().zip(bd).map(|(&gv, &bv)| gv * bv).collect();
                    self.accumulate(a, da, adj);
                }
                if self.needs(b) {
                    let ad = self.value(a).data();
                    let db: Vec<f64> = g.iter().zip(ad).map(|(&gv, &av)| gv * av).collect();
                    self.accumulate(b, db, adj);
                }
            }
            Op::AddRows(m_v, v_v) => {
                let (m_v, v_v) = (*m_v, *v_v);
                let (r, c) = self.value(m_v).dims2()?;
                if self.needs(m_v) {
                    self.accumulate(m_v, g.to_vec(), adj);
                }
                if self.needs(v_v) {
                    let mut dv = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dv[j] += g[i * c + j];
                        }
                    }
                    self.accumulate(v_v, dv, adj);
                }
            }
            Op::MulScalar(x, s) => {
                let (x, s) = (*x, *s);
                if self.needs(x) {
                    let sv = self.value(s).data()[0];
                    let dx: Vec<f64> = g.iter().map(|&gv| gv * sv).collect();
                    self.accumulate(x, dx, adj);
                }
                if self.needs(s) {
                    let xd = self.value(x).data();
                    let ds = dot(g, xd);
                    self.accumulate(s, vec![ds], adj);
                }
            }
            Op::Scale(x, k) => {
                let (x, k) = (*x, *k);
                let dx: Vec<f64> = g.iter().map(|&gv| gv * k).collect();
                self.accumulate(x, dx, adj);
            }
            Op::Tanh(x) => {
                let x = *x;
                let yd = self.nodes[idx].value.data();
                let dx: Vec<f64> = g.iter().zip(yd).map(|(&gv, &y)| gv * (1.0 - y * y)).collect();
                self.accumulate(x, dx, adj);
            }
            Op::Sigmoid(x) => {
                let x = *x;
                let yd = self.nodes[idx].value.data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(yd)
                    .map(|(&gv, &y)| gv * y * (1.0 - y))
                    .collect();
                self.accumulate(x, dx, adj);
            }
            Op::SoftmaxLastDim { x, mask } => {
                let x = *x;
                let mask = mask.clone();
                let yd = self.nodes[idx].value.data();
                let cols = *self.nodes[idx].value.shape().last().unwrap();
                let mut dx = vec![0.0; yd.len()];
                for row in 0..yd.len() / cols {
                    let lo = row * cols;
                    let keep = |j: usize| mask.as_ref().map_or(true, |m| m[lo + j]);
                    let mut dotv = 0.0;
                    for j in 0..cols {
                        if keep(j) {
                            dotv += g[lo + j] * yd[lo + j];
                        }
                    }
                    for j in 0..cols {
                        if keep(j) {
                            dx[lo + j] = yd[lo + j] * (g[lo + j] - dotv);
                        }
                    }
                }
                self.accumulate(x, dx, adj);
            }
            Op::Concat { parts, axis } => {
                let parts = parts.clone();
                let axis = *axis;
                let out_shape = self.nodes[idx].value.shape().to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let mut offsets = Vec::with_capacity(parts.len());
                let mut total_inner = 0usize;
                for &p in &parts {
                    let s = self.value(p).shape();
                    let inner: usize = s[axis..].iter().product();
                    offsets.push((total_inner, inner));
                    total_inner += inner;
                }
                for (pi, &p) in parts.iter().enumerate() {
                    if !self.needs(p) {
                        continue;
                    }
                    let (off, inner) = offsets[pi];
                    let mut dp = vec![0.0; outer * inner];
                    for o in 0..outer {
                        let src = o * total_inner + off;
                        dp[o * inner..(o + 1) * inner].copy_from_slice(&g[src..src + inner]);
                    }
                    self.accumulate(p, dp, adj);
                }
            }
            Op::Slice { x, axis, start } => {
                let (x, axis, start) = (*x, *axis, *start);
                let in_shape = self.value(x).shape().to_vec();
                let out_shape = self.nodes[idx].value.shape().to_vec();
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let len = out_shape[axis];
                let mut dx = vec![0.0; self.value(x).numel()];
                for o in 0..outer {
                    let dst = (o * in_shape[axis] + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.accumulate(x, dx, adj);
            }
            Op::Reshape(x) => {
                let x = *x;
                self.accumulate(x, g.to_vec(), adj);
            }
            Op::Sum(x) => {
                let x = *x;
                let dx = vec![g[0]; self.value(x).numel()];
                self.accumulate(x, dx, adj);
            }
            Op::CrossEntropyLs {
                logits,
                targets,
                smoothing,
                step_mask,
            } => {
                let logits = *logits;
                let targets = targets.clone();
                let smoothing = *smoothing;
                let step_mask = step_mask.clone();
                let (steps, v) = self.value(logits).dims2()?;
                let xd = self.value(logits).data();
                let n = step_mask
                    .as_ref()
                    .map_or(steps, |m| m.iter().filter(|&&b| b).count());
                let off = if v > 1 { smoothing / (v as f64 - 1.0) } else { 0.0 };
                let on = 1.0 - smoothing;
                let gs = g[0] / n as f64;
                let mut dx = vec![0.0; steps * v];
                for (i, &t) in targets.iter().enumerate() {
                    if step_mask.as_ref().map_or(false, |m| !m[i]) {
                        continue;
                    }
                    let row = &xd[i * v..(i + 1) * v];
                    let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|&x| (x - maxv).exp()).sum();
                    for j in 0..v {
                        let p = (row[j] - maxv).exp() / denom;
                        let q = if j == t { on } else { off };
                        dx[i * v + j] = gs * (p - q);
                    }
                }
                self.accumulate(logits, dx, adj);
            }
            Op::LstmCell {
                gates,
                state,
                saved,
            } => {
                let (gates, state) = (*gates, *state);
                let h = saved.len() / 5;
                let c_prev = &self.value(state).data()[h..2 * h];
                let mut d_gates = vec![0.0; 4 * h];
                let mut d_state = vec![0.0; 2 * h];
                for j in 0..h {
                    let i = saved[j];
                    let f = saved[h + j];
                    let cand = saved[2 * h + j];
                    let o = saved[3 * h + j];
                    let tc = saved[4 * h + j];
                    let gh = g[j];
                    let gc = g[h + j] + gh * o * (1.0 - tc * tc);
                    d_gates[j] = gc * cand * i * (1.0 - i);
                    d_gates[h + j] = gc * c_prev[j] * f * (1.0 - f);
                    d_gates[2 * h + j] = gc * i * (1.0 - cand * cand);
                    d_gates[3 * h + j] = gh * tc * o * (1.0 - o);
                    d_state[h + j] = gc * f;
                }
                self.accumulate(gates, d_gates, adj);
                self.accumulate(state, d_state, adj);
            }
            Op::LstmSeq {
                pre,
                w_h,
                reversed,
                saved,
            } => {
                let (pre, w_h, reversed) = (*pre, *w_h, *reversed);
                let (t_len, four_h) = self.value(pre).dims2()?;
                let h_dim = four_h / 4;
                let w = self.value(w_h).data();
                let hs = self.nodes[idx].value.data();
                let needs_pre = self.needs(pre);
                let needs_w = self.needs(w_h);

                let mut d_pre = vec![0.0; t_len * four_h];
                let mut d_w = vec![0.0; four_h * h_dim];
                // Carried adjoints of the recurrent state.
                let mut dh_carry = vec![0.0; h_dim];
                let mut dc_carry = vec![0.0; h_dim];
                let mut dgates = vec![0.0; four_h];
                // Walk processing steps in reverse.
                for s in (0..t_len).rev() {
                    let t = if reversed { t_len - 1 - s } else { s };
                    let t_prev = if s == 0 {
                        None
                    } else {
                        Some(if reversed { t_len - s } else { s - 1 })
                    };
                    let sv = &saved[t * 6 * h_dim..(t + 1) * 6 * h_dim];
                    for j in 0..h_dim {
                        let i = sv[j];
                        let f = sv[h_dim + j];
                        let cand = sv[2 * h_dim + j];
                        let o = sv[3 * h_dim + j];
                        let tc = sv[4 * h_dim + j];
                        let c_prev = match t_prev {
                            Some(tp) => saved[tp * 6 * h_dim + 5 * h_dim + j],
                            None => 0.0,
                        };
                        let dh = dh_carry[j] + g[t * h_dim + j];
                        if s == t_len - 1 {
                            // Final-cell row of the output.
                            dc_carry[j] += g[t_len * h_dim + j];
                        }
                        let dc = dc_carry[j] + dh * o * (1.0 - tc * tc);
                        dgates[j] = dc * cand * i * (1.0 - i);
                        dgates[h_dim + j] = dc * c_prev * f * (1.0 - f);
                        dgates[2 * h_dim + j] = dc * i * (1.0 - cand * cand);
                        dgates[3 * h_dim + j] = dh * tc * o * (1.0 - o);
                        dc_carry[j] = dc * f;
                    }
                    if needs_pre {
                        d_pre[t * four_h..(t + 1) * four_h].copy_from_slice(&dgates);
                    }
                    // h_{prev}: previous processing step's hidden output.
                    if let Some(tp) = t_prev {
                        let h_prev = &hs[tp * h_dim..(tp + 1) * h_dim];
                        if needs_w {
                            for (row, &dg) in dgates.iter().enumerate() {
                                axpy(dg, h_prev, &mut d_w[row * h_dim..(row + 1) * h_dim]);
                            }
                        }
                        for j in 0..h_dim {
                            let mut s_acc = 0.0;
                            for (row, &dg) in dgates.iter().enumerate() {
                                s_acc += dg * w[row * h_dim + j];
                            }
                            dh_carry[j] = s_acc;
                        }
                    }
                }
                if needs_pre {
                    self.accumulate(pre, d_pre, adj);
                }
                if needs_w {
                    self.accumulate(w_h, d_w, adj);
                }
            }
            Op::Row { x, r } => {
                let (x, r) = (*x, *r);
                let (_rows, c) = self.value(x).dims2()?;
                let mut dx = vec![0.0; self.value(x).numel()];
                dx[r * c..(r + 1) * c].copy_from_slice(g);
                self.accumulate(x, dx, adj);
            }
        }
        Ok(())
    }

    fn accumulate(&self, v: Var, contrib: Vec<f64>, adj: &mut [Option<Vec<f64>>]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&contrib) {
                    *a += b;
                }
            }
            slot => *slot = Some(contrib),
        }
    }
}

fn add_to(slot: &mut Option<Vec<f64>>, contrib: &[f64]) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        None => *slot = Some(contrib.to_vec()),
    }
}

/// Inserts named parameter leaves into a graph, remembering the handles of
/// trainable ones so their gradients can be harvested by name after backward.
pub struct Binder<'g> {
    pub g: &'g mut Graph,
    trainable: bool,
    filter: Option<Vec<String>>,
    bindings: Vec<(String, Var)>,
}

impl<'g> Binder<'g> {
    pub fn new(g: &'g mut Graph, trainable: bool) -> Self {
        Binder {
            g,
            trainable,
            filter: None,
            bindings: Vec::new(),
        }
    }

    /// Restricts trainability to parameters matching one of the prefixes
    /// (`p` matches `p` itself and anything under `p.`).
    pub fn with_filter(g: &'g mut Graph, prefixes: Vec<String>) -> Self {
        Binder {
            g,
            trainable: true,
            filter: Some(prefixes),
            bindings: Vec::new(),
        }
    }

    fn matches(&self, name: &str) -> bool {
        match &self.filter {
            None => true,
            Some(prefixes) => prefixes
                .iter()
                .any(|p| name == p || (name.starts_with(p) && name[p.len()..].starts_with('.'))),
        }
    }

    pub fn leaf(&mut self, name: String, t: &Tensor) -> Var {
        let trainable = self.trainable && self.matches(&name);
        let v = self.g.leaf(t.clone(), trainable);
        if trainable {
            self.bindings.push((name, v));
        }
        v
    }

    pub fn into_bindings(self) -> Vec<(String, Var)> {
        self.bindings
    }

    pub fn take_bindings(&mut self) -> Vec<(String, Var)> {
        std::mem::take(&mut self.bindings)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators so the reduction vectorizes.
    let n = a.len().min(b.len());
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..chunks {
        let j = i * 4;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..n {
        tail += a[j] * b[j];
    }
    (s0 + s1) + (s2 + s3) + tail
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out += k * src`
#[inline]
fn axpy(k: f64, src: &[f64], out: &mut [f64]) {
    for (o, &s) in out.iter_mut().zip(src) {
        *o += k * s;
    }
}

/// `out += a[m,k] · b[k,n]`
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            axpy(av, &b[p * n..(p + 1) * n], orow);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn sigmoid_tanh_fixed_points() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let s = g.sigmoid(x);
        let h = g.tanh(x);
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        assert_eq!(g.value(h).data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_trivial_rows() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.softmax_last_dim(x, None).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x2 = g.constant(t(&[2], &[0.0_f64, 3.0_f64.ln()]));
        let y2 = g.softmax_last_dim(x2, None).unwrap();
        let d = g.value(y2).data();
        assert!((d[0] - 0.25).abs() < 1e-15);
        assert!((d[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_shift_stable() {
        let mut g = Graph::new();
        let big = g.constant(t(&[2], &[1000.0, 1001.0]));
        let small = g.constant(t(&[2], &[0.0, 1.0]));
        let yb = g.softmax_last_dim(big, None).unwrap();
        let ys = g.softmax_last_dim(small, None).unwrap();
        for (a, b) in g.value(yb).data().iter().zip(g.value(ys).data()) {
            assert!(a.is_finite());
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_mask_zeroes_and_rejects_all_masked() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[5.0, 1.0, 2.0]));
        let y = g
            .softmax_last_dim(x, Some(&[true, false, true]))
            .unwrap();
        let d = g.value(y).data();
        assert_eq!(d[1], 0.0);
        assert!((d[0] + d[2] - 1.0).abs() < 1e-12);

        let all_masked = g.softmax_last_dim(x, Some(&[false, false, false]));
        assert!(matches!(all_masked, Err(Error::InvalidMask(_))));
    }

    #[test]
    fn concat_slice_round_trip_bit_exact() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.constant(t(&[2, 2], &[7.0, 8.0, 9.0, 10.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 5]);
        let ra = g.slice(c, 1, 0, 3).unwrap();
        let rb = g.slice(c, 1, 3, 2).unwrap();
        assert_eq!(g.value(ra).data(), g.value(a).data());
        assert_eq!(g.value(rb).data(), g.value(b).data());

        let row = g.concat(&[a, a], 0).unwrap();
        assert_eq!(g.value(row).shape(), &[4, 3]);
    }

    #[test]
    fn concat_trivial_axis1() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 1], &[1.0]));
        let b = g.constant(t(&[1, 1], &[2.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 2]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let w = g.trainable(t(&[2, 3], &[0.3, -1.0, 2.0, 0.5, 0.0, 9.0]));
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_quadratic() {
        let mut g = Graph::new();
        let w = g.trainable(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let w = g.trainable(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut g = Graph::new();
        let w = g.trainable(t(&[2], &[1.0, 2.0]));
        let s = g.sum(w);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn cross_entropy_analytic_cases() {
        // Uniform logits, V=4, no smoothing -> ln 4.
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(vec![1, 4]));
        let loss = g.cross_entropy_ls(logits, &[2], 0.0, None).unwrap();
        assert!((g.value(loss).data()[0] - 4.0_f64.ln()).abs() < 1e-12);

        // Huge-margin correct logits -> loss ~ 0.
        let mut g = Graph::new();
        let logits = g.constant(t(&[1, 3], &[50.0, 0.0, 0.0]));
        let loss = g.cross_entropy_ls(logits, &[0], 0.0, None).unwrap();
        assert!(g.value(loss).data()[0] < 1e-12);
    }

    #[test]
    fn cross_entropy_smoothed_matches_direct_formula() {
        // Independent direct computation of the smoothed CE for one row.
        let logits = [0.2, -0.3, 0.8, 0.1, -1.0];
        let target = 2usize;
        let eps = 0.1;
        let v = 5;
        let maxv = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = maxv + logits.iter().map(|&x| (x - maxv).exp()).sum::<f64>().ln();
        let mut expected = 0.0;
        for (j, &x) in logits.iter().enumerate() {
            let q = if j == target { 1.0 - eps } else { eps / (v as f64 - 1.0) };
            expected -= q * (x - lse);
        }

        let mut g = Graph::new();
        let lv = g.constant(t(&[1, 5], &logits));
        let loss = g.cross_entropy_ls(lv, &[target], eps, None).unwrap();
        assert!((g.value(loss).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_vocab() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(vec![1, 4]));
        let err = g.cross_entropy_ls(logits, &[4], 0.0, None).unwrap_err();
        assert!(matches!(err, Error::Vocabulary { id: 4, vocab: 4 }));
    }

    #[test]
    fn masked_steps_excluded_from_loss() {
        let mut g = Graph::new();
        let logits = g.constant(t(&[2, 3], &[3.0, 0.0, 0.0, -5.0, 9.0, 1.0]));
        let full = g.cross_entropy_ls(logits, &[0, 0], 0.0, None).unwrap();
        let masked = g
            .cross_entropy_ls(logits, &[0, 0], 0.0, Some(&[true, false]))
            .unwrap();
        // Only the first (well-classified) step counts when the second is masked.
        assert!(g.value(masked).data()[0] < g.value(full).data()[0]);
    }
}
