//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its output value and enough saved state to
//! run its backward rule. [`Graph::backward`] walks the tape in reverse, so a
//! node is visited exactly once and only after everything that consumed it.
//! All reductions run in a fixed sequential order; two backward passes over
//! the same tape produce bitwise-identical gradients.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{ensure_finite, mm, mm_nt, mm_tn, softmax_in_place, Element, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Gelu,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulCol(Var, Var),
    Act(Var, Activation),
    RmsNorm {
        x: Var,
        w: Var,
        inv_rms: Vec<T>,
    },
    LayerNorm {
        x: Var,
        w: Var,
        b: Var,
        inv_std: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    Rope {
        x: Var,
        cos: Vec<T>,
        sin: Vec<T>,
        n_heads: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        seq_len: usize,
        probs: Vec<T>,
    },
    Softmax(Var),
    TopKGate {
        logits: Var,
        k: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    GatherCol {
        x: Var,
        rows: Vec<usize>,
        col: usize,
    },
    ScatterRows {
        parts: Vec<(Vec<usize>, Var)>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        mask: Vec<u8>,
        scale: T,
        probs: Vec<T>,
    },
    Sum(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// The recorded computation.
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [r, c] => (*r, *c),
        [n] => (1, *n),
        _ => (1, shape.iter().product()),
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
        }
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
        &self.nodes[v.0].data
    }

    /// Copies a node out as an `f32` tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.iter().map(|x| x.narrow()).collect())
            .expect("node shape is consistent")
    }

    /// Named trainable leaves registered through [`Graph::param`].
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var> {
        ensure_finite(name, &data)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(shape, data, op, needs_grad))
    }

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim("leaf", format!("shape {shape:?} vs {} values", data.len())));
        }
        ensure_finite("leaf", &data)?;
        Ok(self.push(shape, data, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        self.leaf(shape, data, false)
    }

    pub fn constant_f32(&mut self, shape: Vec<usize>, data: &[f32]) -> Result<Var> {
        self.leaf(shape, data.iter().map(|&x| T::widen(x)).collect(), false)
    }

    /// Registers a tensor as a leaf. Tensors with `requires_grad` are recorded
    /// under `name` so their gradients can be routed back after backward.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Result<Var> {
        let v = self.leaf(
            t.shape.clone(),
            t.data.iter().map(|&x| T::widen(x)).collect(),
            t.requires_grad,
        )?;
        if t.requires_grad {
            self.params.push((name.to_string(), v));
        }
        Ok(v)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        shape2(&self.nodes[v.0].shape)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::dim("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let out = mm(self.value(a), self.value(b), m, k, n);
        self.push_checked("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`, the layout used by projection weights stored `[out × in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::dim("matmul_nt", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let out = mm_nt(self.value(a), self.value(b), m, k, n);
        self.push_checked("matmul_nt", vec![m, n], out, Op::MatMulNT(a, b), &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        self.push_checked("add", self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        self.push_checked("mul", self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        self.push_checked("scale", self.shape(a).to_vec(), out, Op::Scale(a, s), &[a])
    }

    /// Multiplies row `i` of `a[m×n]` by `w[i]`, with `w` shaped `[m×1]`.
    pub fn mul_col(&mut self, a: Var, w: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(w).len() != m {
            return Err(Error::dim("mul_col", format!("{m} rows vs {} weights", self.value(w).len())));
        }
        let wv = self.value(w);
        let av = self.value(a);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(av[i * n..(i + 1) * n].iter().map(|&x| x * wv[i]));
        }
        self.push_checked("mul_col", vec![m, n], out, Op::MulCol(a, w), &[a, w])
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| act_fwd(act, x)).collect();
        self.push_checked("activation", self.shape(a).to_vec(), out, Op::Act(a, act), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Silu)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Gelu)
    }

    /// `x / sqrt(mean(x²) + eps) * w` per row.
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f32) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(w).len() != n {
            return Err(Error::dim("rms_norm", format!("width {n} vs weight {}", self.value(w).len())));
        }
        let eps = T::widen(eps);
        let nf = T::from_usize(n).unwrap();
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = Vec::with_capacity(m * n);
        let mut inv_rms = Vec::with_capacity(m);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / nf;
            let r = T::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(wv).map(|(&v, &g)| v * r * g));
        }
        self.push_checked("rms_norm", vec![m, n], out, Op::RmsNorm { x, w, inv_rms }, &[x, w])
    }

    pub fn layer_norm(&mut self, x: Var, w: Var, b: Var, eps: f32) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(w).len() != n || self.value(b).len() != n {
            return Err(Error::dim("layer_norm", "affine parameters must match row width"));
        }
        let eps = T::widen(eps);
        let nf = T::from_usize(n).unwrap();
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / nf;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / nf;
            let r = T::one() / (var + eps).sqrt();
            inv_std.push(r);
            for j in 0..n {
                out.push((row[j] - mean) * r * wv[j] + bv[j]);
            }
        }
        self.push_checked(
            "layer_norm",
            vec![m, n],
            out,
            Op::LayerNorm { x, w, b, inv_std },
            &[x, w, b],
        )
    }

    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (vocab, d) = self.dims(table);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::Vocab { id, vocab });
            }
            let i = id as usize;
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        self.push_checked(
            "embedding",
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Rotary position embedding. Rows are grouped into sequences of
    /// `seq_len`; a row's position is its offset inside its sequence.
    pub fn rope(&mut self, x: Var, n_heads: usize, seq_len: usize, theta: f32) -> Result<Var> {
        let (m, d) = self.dims(x);
        if n_heads == 0 || d % n_heads != 0 || !(d / n_heads).is_multiple_of(2) || seq_len == 0 {
            return Err(Error::dim("rope", format!("width {d} with {n_heads} heads")));
        }
        let hd = d / n_heads;
        let half = hd / 2;
        let theta = T::widen(theta);
        let mut cos = Vec::with_capacity(m * half);
        let mut sin = Vec::with_capacity(m * half);
        for row in 0..m {
            let pos = T::from_usize(row % seq_len).unwrap();
            for i in 0..half {
                let freq = theta.powf(-T::from_usize(2 * i).unwrap() / T::from_usize(hd).unwrap());
                let angle = pos * freq;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        let xv = self.value(x);
        let mut out = vec![T::zero(); m * d];
        for row in 0..m {
            for h in 0..n_heads {
                for i in 0..half {
                    let base = row * d + h * hd + 2 * i;
                    let (c, s) = (cos[row * half + i], sin[row * half + i]);
                    let (a, b) = (xv[base], xv[base + 1]);
                    out[base] = a * c - b * s;
                    out[base + 1] = a * s + b * c;
                }
            }
        }
        self.push_checked(
            "rope",
            vec![m, d],
            out,
            Op::Rope {
                x,
                cos,
                sin,
                n_heads,
            },
            &[x],
        )
    }

    /// Multi-head causal self-attention, `softmax(QKᵀ/√d + mask)·V` per head.
    /// Rows are split into independent sequences of `seq_len`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        seq_len: usize,
    ) -> Result<Var> {
        let (m, d) = self.dims(q);
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(Error::dim("causal_attention", "q, k, v shapes differ"));
        }
        if n_heads == 0 || d % n_heads != 0 || seq_len == 0 || m % seq_len != 0 {
            return Err(Error::dim(
                "causal_attention",
                format!("{m} rows, width {d}, {n_heads} heads, seq_len {seq_len}"),
            ));
        }
        let hd = d / n_heads;
        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let n_seq = m / seq_len;
        let mut probs = vec![T::zero(); n_seq * n_heads * seq_len * seq_len];
        let mut out = vec![T::zero(); m * d];
        for s in 0..n_seq {
            for h in 0..n_heads {
                let pbase = (s * n_heads + h) * seq_len * seq_len;
                for i in 0..seq_len {
                    let qi = (s * seq_len + i) * d + h * hd;
                    let prow = &mut probs[pbase + i * seq_len..pbase + (i + 1) * seq_len];
                    for j in 0..=i {
                        let kj = (s * seq_len + j) * d + h * hd;
                        let mut acc = T::zero();
                        for c in 0..hd {
                            acc = acc + qv[qi + c] * kv[kj + c];
                        }
                        prow[j] = acc * scale;
                    }
                    softmax_in_place(&mut prow[..=i]);
                    let orow = (s * seq_len + i) * d + h * hd;
                    for j in 0..=i {
                        let p = prow[j];
                        let vj = (s * seq_len + j) * d + h * hd;
                        for c in 0..hd {
                            out[orow + c] = out[orow + c] + p * vv[vj + c];
                        }
                    }
                }
            }
        }
        self.push_checked(
            "causal_attention",
            vec![m, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                seq_len,
                probs,
            },
            &[q, k, v],
        )
    }

    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            softmax_in_place(row);
        }
        self.push_checked("row_softmax", vec![m, n], out, Op::Softmax(x), &[x])
    }

    /// Dense `[T×E]` gate matrix: per row, a softmax over the `k` largest
    /// logits (ties to the lower index) and zero everywhere else.
    pub fn top_k_gate(&mut self, logits: Var, k: usize) -> Result<Var> {
        let (m, e) = self.dims(logits);
        if k == 0 || k > e {
            return Err(Error::Config(format!("top_k {k} with {e} experts")));
        }
        let lv = self.value(logits);
        let mut out = vec![T::zero(); m * e];
        for t in 0..m {
            let row = &lv[t * e..(t + 1) * e];
            let sel = top_k_indices(row, k);
            let mut w: Vec<T> = sel.iter().map(|&i| row[i]).collect();
            softmax_in_place(&mut w);
            for (&i, &g) in sel.iter().zip(&w) {
                out[t * e + i] = g;
            }
        }
        self.push_checked("top_k_gate", vec![m, e], out, Op::TopKGate { logits, k }, &[logits])
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::dim("gather_rows", format!("row {r} of {m}")));
            }
            out.extend_from_slice(&xv[r * n..(r + 1) * n]);
        }
        self.push_checked(
            "gather_rows",
            vec![rows.len(), n],
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        )
    }

    /// Picks `x[rows[i], col]` into an `[n×1]` column.
    pub fn gather_col(&mut self, x: Var, rows: &[usize], col: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if col >= n || rows.iter().any(|&r| r >= m) {
            return Err(Error::dim("gather_col", format!("index outside {m}x{n}")));
        }
        let xv = self.value(x);
        let out = rows.iter().map(|&r| xv[r * n + col]).collect();
        self.push_checked(
            "gather_col",
            vec![rows.len(), 1],
            out,
            Op::GatherCol {
                x,
                rows: rows.to_vec(),
                col,
            },
            &[x],
        )
    }

    /// Builds an `[m×n]` matrix by adding each part's rows into the listed
    /// destination rows. Rows nobody writes stay zero; the first write to a
    /// row is a plain copy.
    pub fn scatter_rows(&mut self, m: usize, n: usize, parts: Vec<(Vec<usize>, Var)>) -> Result<Var> {
        let mut out = vec![T::zero(); m * n];
        let mut written = vec![false; m];
        let mut inputs = Vec::with_capacity(parts.len());
        for (rows, p) in &parts {
            let (pr, pc) = self.dims(*p);
            if pr != rows.len() || pc != n || rows.iter().any(|&r| r >= m) {
                return Err(Error::dim("scatter_rows", format!("part {pr}x{pc} into {m}x{n}")));
            }
            let pv = self.value(*p);
            for (i, &r) in rows.iter().enumerate() {
                let src = &pv[i * n..(i + 1) * n];
                let dst = &mut out[r * n..(r + 1) * n];
                if written[r] {
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
                } else {
                    dst.copy_from_slice(src);
                    written[r] = true;
                }
            }
            inputs.push(*p);
        }
        self.push_checked("scatter_rows", vec![m, n], out, Op::ScatterRows { parts }, &inputs)
    }

    /// Mean next-token cross entropy over positions with `mask == 1`.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[u32], mask: &[u8]) -> Result<Var> {
        let count = mask.iter().filter(|&&m| m != 0).count();
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        self.masked_cross_entropy_scaled(logits, targets, mask, T::one() / T::from_usize(count).unwrap())
    }

    /// Sum of masked per-position cross entropies times `scale`. Lets callers
    /// normalize by a token count that spans several micro-batches.
    pub fn masked_cross_entropy_scaled(
        &mut self,
        logits: Var,
        targets: &[u32],
        mask: &[u8],
        scale: T,
    ) -> Result<Var> {
        let (t, v) = self.dims(logits);
        if targets.len() != t || mask.len() != t {
            return Err(Error::dim(
                "masked_cross_entropy",
                format!("{t} rows, {} targets, {} mask entries", targets.len(), mask.len()),
            ));
        }
        if mask.iter().all(|&m| m == 0) {
            return Err(Error::EmptyMask);
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); t * v];
        let mut total = T::zero();
        for i in 0..t {
            if mask[i] == 0 {
                continue;
            }
            let target = targets[i];
            if target as usize >= v {
                return Err(Error::Vocab { id: target, vocab: v });
            }
            let row = &lv[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum = row.iter().fold(T::zero(), |a, &x| a + (x - max).exp());
            let lse = max + sum.ln();
            total = total + (lse - row[target as usize]);
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
        }
        let loss = total * scale;
        self.push_checked(
            "masked_cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                scale,
                probs,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().fold(T::zero(), |a, &v| a + v);
        self.push_checked("sum", vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let xv = self.value(x);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv[i * n + j];
            }
        }
        self.push_checked("transpose", vec![n, m], out, Op::Transpose(x), &[x])
    }

    /// Concatenates along the last dimension.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::dim("concat_cols", "no inputs"));
        };
        let m = self.dims(first).0;
        if xs.iter().any(|&x| self.dims(x).0 != m) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let widths: Vec<usize> = xs.iter().map(|&x| self.dims(x).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x)[i * w..(i + 1) * w]);
            }
        }
        self.push_checked("concat_cols", vec![m, total], out, Op::ConcatCols(xs.to_vec()), xs)
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::Rank {
                op: "backward",
                shape: shape.to_vec(),
            });
        }
        self.backward_with(loss, vec![T::one()])
    }

    /// Vector-Jacobian product: reverse pass seeded with `seed` as the
    /// gradient of `out`.
    pub fn backward_with(&self, out: Var, seed: Vec<T>) -> Result<Gradients<T>> {
        if seed.len() != self.nodes[out.0].data.len() {
            return Err(Error::dim("backward", "seed length differs from output"));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| self.nodes[v.0].data.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = node.shape[1];
                if needs(*a) {
                    accumulate(grads, *a, mm_nt(dy, val(*b), m, n, k));
                }
                if needs(*b) {
                    accumulate(grads, *b, mm_tn(val(*a), dy, m, k, n));
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.dims(*a);
                let n = node.shape[1];
                if needs(*a) {
                    accumulate(grads, *a, mm(dy, val(*b), m, n, k));
                }
                if needs(*b) {
                    accumulate(grads, *b, mm_tn(dy, val(*a), m, n, k));
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, dy.to_vec());
                }
                if needs(*b) {
                    accumulate(grads, *b, dy.to_vec());
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, dy.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect());
                }
                if needs(*b) {
                    accumulate(grads, *b, dy.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Scale(a, s) => {
                accumulate(grads, *a, dy.iter().map(|&g| g * *s).collect());
            }
            Op::MulCol(a, w) => {
                let (m, n) = self.dims(*a);
                let (av, wv) = (val(*a), val(*w));
                if needs(*a) {
                    let mut da = Vec::with_capacity(m * n);
                    for i in 0..m {
                        da.extend(dy[i * n..(i + 1) * n].iter().map(|&g| g * wv[i]));
                    }
                    accumulate(grads, *a, da);
                }
                if needs(*w) {
                    let dw = (0..m)
                        .map(|i| {
                            (0..n).fold(T::zero(), |acc, j| acc + dy[i * n + j] * av[i * n + j])
                        })
                        .collect();
                    accumulate(grads, *w, dw);
                }
            }
            Op::Act(a, act) => {
                let dx = dy
                    .iter()
                    .zip(val(*a))
                    .map(|(&g, &x)| g * act_grad(*act, x))
                    .collect();
                accumulate(grads, *a, dx);
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let (m, n) = self.dims(*x);
                let nf = T::from_usize(n).unwrap();
                let (xv, wv) = (val(*x), val(*w));
                let mut dx = vec![T::zero(); m * n];
                let mut dw = vec![T::zero(); n];
                for i in 0..m {
                    let r = inv_rms[i];
                    let row = &xv[i * n..(i + 1) * n];
                    let g = &dy[i * n..(i + 1) * n];
                    let mut dot = T::zero();
                    for j in 0..n {
                        let xhat = row[j] * r;
                        dw[j] = dw[j] + g[j] * xhat;
                        dot = dot + g[j] * wv[j] * xhat;
                    }
                    let mean = dot / nf;
                    for j in 0..n {
                        dx[i * n + j] = r * (g[j] * wv[j] - row[j] * r * mean);
                    }
                }
                if needs(*x) {
                    accumulate(grads, *x, dx);
                }
                if needs(*w) {
                    accumulate(grads, *w, dw);
                }
            }
            Op::LayerNorm { x, w, b, inv_std } => {
                let (m, n) = self.dims(*x);
                let nf = T::from_usize(n).unwrap();
                let (xv, wv) = (val(*x), val(*w));
                let mut dx = vec![T::zero(); m * n];
                let mut dw = vec![T::zero(); n];
                let mut db = vec![T::zero(); n];
                for i in 0..m {
                    let r = inv_std[i];
                    let row = &xv[i * n..(i + 1) * n];
                    let mean = row.iter().fold(T::zero(), |a, &v| a + v) / nf;
                    let g = &dy[i * n..(i + 1) * n];
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for j in 0..n {
                        let xhat = (row[j] - mean) * r;
                        dw[j] = dw[j] + g[j] * xhat;
                        db[j] = db[j] + g[j];
                        let gw = g[j] * wv[j];
                        sum_g = sum_g + gw;
                        sum_gx = sum_gx + gw * xhat;
                    }
                    for j in 0..n {
                        let xhat = (row[j] - mean) * r;
                        dx[i * n + j] = r * (g[j] * wv[j] - sum_g / nf - xhat * sum_gx / nf);
                    }
                }
                if needs(*x) {
                    accumulate(grads, *x, dx);
                }
                if needs(*w) {
                    accumulate(grads, *w, dw);
                }
                if needs(*b) {
                    accumulate(grads, *b, db);
                }
            }
            Op::Embedding { table, ids } => {
                let (vocab, d) = self.dims(*table);
                let mut dt = vec![T::zero(); vocab * d];
                for (row, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                    for (o, &g) in dst.iter_mut().zip(&dy[row * d..(row + 1) * d]) {
                        *o = *o + g;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::Rope {
                x,
                cos,
                sin,
                n_heads,
            } => {
                let (m, d) = self.dims(*x);
                let hd = d / n_heads;
                let half = hd / 2;
                let mut dx = vec![T::zero(); m * d];
                for row in 0..m {
                    for h in 0..*n_heads {
                        for i in 0..half {
                            let base = row * d + h * hd + 2 * i;
                            let (c, s) = (cos[row * half + i], sin[row * half + i]);
                            let (g0, g1) = (dy[base], dy[base + 1]);
                            dx[base] = g0 * c + g1 * s;
                            dx[base + 1] = g1 * c - g0 * s;
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                seq_len,
                probs,
            } => {
                let (m, d) = self.dims(*q);
                let (n_heads, seq_len) = (*n_heads, *seq_len);
                let hd = d / n_heads;
                let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let mut dq = vec![T::zero(); m * d];
                let mut dk = vec![T::zero(); m * d];
                let mut dv = vec![T::zero(); m * d];
                let mut dp = vec![T::zero(); seq_len];
                for s in 0..m / seq_len {
                    for h in 0..n_heads {
                        let pbase = (s * n_heads + h) * seq_len * seq_len;
                        for i in 0..seq_len {
                            let oi = (s * seq_len + i) * d + h * hd;
                            let prow = &probs[pbase + i * seq_len..pbase + (i + 1) * seq_len];
                            let mut dot = T::zero();
                            for j in 0..=i {
                                let vj = (s * seq_len + j) * d + h * hd;
                                let mut acc = T::zero();
                                for c in 0..hd {
                                    acc = acc + dy[oi + c] * vv[vj + c];
                                    dv[vj + c] = dv[vj + c] + prow[j] * dy[oi + c];
                                }
                                dp[j] = acc;
                                dot = dot + acc * prow[j];
                            }
                            for j in 0..=i {
                                let ds = prow[j] * (dp[j] - dot) * scale;
                                let kj = (s * seq_len + j) * d + h * hd;
                                for c in 0..hd {
                                    dq[oi + c] = dq[oi + c] + ds * kv[kj + c];
                                    dk[kj + c] = dk[kj + c] + ds * qv[oi + c];
                                }
                            }
                        }
                    }
                }
                if needs(*q) {
                    accumulate(grads, *q, dq);
                }
                if needs(*k) {
                    accumulate(grads, *k, dk);
                }
                if needs(*v) {
                    accumulate(grads, *v, dv);
                }
            }
            Op::Softmax(x) => {
                let n = node.shape[1];
                let mut dx = vec![T::zero(); dy.len()];
                for (i, yrow) in node.data.chunks(n).enumerate() {
                    let g = &dy[i * n..(i + 1) * n];
                    let dot = g.iter().zip(yrow).fold(T::zero(), |a, (&g, &y)| a + g * y);
                    for j in 0..n {
                        dx[i * n + j] = yrow[j] * (g[j] - dot);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::TopKGate { logits, k } => {
                let (m, e) = self.dims(*logits);
                let lv = val(*logits);
                let mut dl = vec![T::zero(); m * e];
                for t in 0..m {
                    let sel = top_k_indices(&lv[t * e..(t + 1) * e], *k);
                    let gate = &node.data[t * e..(t + 1) * e];
                    let g = &dy[t * e..(t + 1) * e];
                    let dot = sel.iter().fold(T::zero(), |a, &i| a + g[i] * gate[i]);
                    for &i in &sel {
                        dl[t * e + i] = gate[i] * (g[i] - dot);
                    }
                }
                accumulate(grads, *logits, dl);
            }
            Op::GatherRows { x, rows } => {
                let (m, n) = self.dims(*x);
                let mut dx = vec![T::zero(); m * n];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..n {
                        dx[r * n + j] = dx[r * n + j] + dy[i * n + j];
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::GatherCol { x, rows, col } => {
                let (m, n) = self.dims(*x);
                let mut dx = vec![T::zero(); m * n];
                for (i, &r) in rows.iter().enumerate() {
                    dx[r * n + col] = dx[r * n + col] + dy[i];
                }
                accumulate(grads, *x, dx);
            }
            Op::ScatterRows { parts } => {
                let n = node.shape[1];
                for (rows, p) in parts {
                    if !needs(*p) {
                        continue;
                    }
                    let mut dp = Vec::with_capacity(rows.len() * n);
                    for &r in rows {
                        dp.extend_from_slice(&dy[r * n..(r + 1) * n]);
                    }
                    accumulate(grads, *p, dp);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                scale,
                probs,
            } => {
                let (t, v) = self.dims(*logits);
                let g = dy[0] * *scale;
                let mut dl = vec![T::zero(); t * v];
                for i in 0..t {
                    if mask[i] == 0 {
                        continue;
                    }
                    for j in 0..v {
                        dl[i * v + j] = probs[i * v + j] * g;
                    }
                    let tgt = i * v + targets[i] as usize;
                    dl[tgt] = dl[tgt] - g;
                }
                accumulate(grads, *logits, dl);
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].data.len();
                accumulate(grads, *x, vec![dy[0]; n]);
            }
            Op::Transpose(x) => {
                let (m, n) = self.dims(*x);
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = dy[j * m + i];
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatCols(xs) => {
                let m = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for &x in xs {
                    let w = self.dims(x).1;
                    if needs(x) {
                        let mut dx = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dx.extend_from_slice(&dy[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(grads, x, dx);
                    }
                    offset += w;
                }
            }
        }
    }

    /// Gradients of registered parameters, converted to `f32`, by name.
    pub fn param_grads(&self, grads: &Gradients<T>) -> HashMap<String, Vec<f32>> {
        self.params
            .iter()
            .filter_map(|(name, v)| {
                grads
                    .get(*v)
                    .map(|g| (name.clone(), g.iter().map(|x| x.narrow()).collect()))
            })
            .collect()
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
        slot @ None => *slot = Some(g),
    }
}

/// Indices of the `k` largest values, in descending value order; equal values
/// keep ascending index order.
pub fn top_k_indices<T: Element>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn act_fwd<T: Element>(act: Activation, x: T) -> T {
    match act {
        Activation::Silu => x / (T::one() + (-x).exp()),
        Activation::Gelu => {
            let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
            T::lit(0.5) * x * (T::one() + u.tanh())
        }
    }
}

fn act_grad<T: Element>(act: Activation, x: T) -> T {
    match act {
        Activation::Silu => {
            let s = T::one() / (T::one() + (-x).exp());
            s * (T::one() + x * (T::one() - s))
        }
        Activation::Gelu => {
            let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
            let t = u.tanh();
            let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
            T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
        }
    }
}
