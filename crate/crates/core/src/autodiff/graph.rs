use std::sync::atomic::{AtomicU64, Ordering};

use super::{Float, Mask, ParamStore, Result, Tensor, TensorError, LAYER_NORM_EPS, MASK_FILL};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    idx: usize,
}

enum Op<F> {
    Input,
    Param(usize),
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        s: F,
    },
    Transpose {
        a: usize,
    },
    Softmax {
        a: usize,
    },
    Log {
        a: usize,
    },
    Tanh {
        a: usize,
    },
    Relu {
        a: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Reshape {
        a: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Narrow {
        a: usize,
        axis: usize,
        start: usize,
    },
    Mean {
        a: usize,
        axis: usize,
    },
    Sum {
        a: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        smoothing: F,
        probs: Vec<F>,
    },
    SplitHeads {
        a: usize,
        heads: usize,
    },
    MergeHeads {
        a: usize,
        heads: usize,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Eagerly evaluated computation tape.
pub struct Graph<F> {
    id: u64,
    nodes: Vec<Node<F>>,
    n_params: usize,
    param_shapes: Vec<Vec<usize>>,
}

/// Result of [`Graph::backward`]: gradients for every bound parameter (zero
/// when the parameter did not influence the loss) and for gradient-tracking
/// inputs.
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    params: Vec<Tensor<F>>,
    inputs: Vec<(usize, Tensor<F>)>,
    graph: u64,
}

impl<F: Float> Gradients<F> {
    pub fn param(&self, idx: usize) -> &Tensor<F> {
        &self.params[idx]
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    /// Gradient with respect to a leaf created by [`Graph::input_with_grad`].
    pub fn wrt(&self, var: Var) -> Option<&Tensor<F>> {
        if var.graph != self.graph {
            return None;
        }
        self.inputs.iter().find(|(i, _)| *i == var.idx).map(|(_, t)| t)
    }

    /// Elementwise sum with another gradient set over the same parameters.
    pub fn add_assign(&mut self, other: &Gradients<F>) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += *y;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize], detail: impl Into<String>) -> TensorError {
    TensorError::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
        detail: detail.into(),
    }
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn is_suffix(full: &[usize], part: &[usize]) -> bool {
    part.len() <= full.len() && full[full.len() - part.len()..] == *part
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            n_params: 0,
            param_shapes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var {
            graph: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn node(&self, v: Var) -> Result<&Node<F>> {
        if v.graph != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::ForeignNode);
        }
        Ok(&self.nodes[v.idx])
    }

    fn grad_of(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.node(v).expect("variable belongs to this graph").value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf (no gradient).
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input_with_grad(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Copies every parameter of `store` into the tape; the returned handles
    /// are indexed like the store.
    pub fn bind(&mut self, store: &ParamStore<F>) -> Vec<Var> {
        self.n_params = store.len();
        self.param_shapes = store.iter().map(|p| p.value.shape().to_vec()).collect();
        store
            .iter()
            .enumerate()
            .map(|(i, p)| self.push(p.value.clone(), Op::Param(i), p.requires_grad))
            .collect()
    }

    // ---- linear algebra ------------------------------------------------

    /// Batched `a · b` over the last two axes. `b` is either rank 2 (shared
    /// across the batch) or carries the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a · bᵀ` over the last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op = if trans_b { "matmul_t" } else { "matmul" };
        let av = &self.node(a)?.value;
        let bv = &self.node(b)?.value;
        let (ash, bsh) = (av.shape(), bv.shape());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(dim_err(op, ash, bsh, "operands must have rank >= 2"));
        }
        let r = ash.len();
        let (m, k) = (ash[r - 2], ash[r - 1]);
        let rb = bsh.len();
        let (kb, n) = if trans_b {
            (bsh[rb - 1], bsh[rb - 2])
        } else {
            (bsh[rb - 2], bsh[rb - 1])
        };
        if k != kb {
            return Err(dim_err(op, ash, bsh, format!("inner dims {k} != {kb}")));
        }
        let shared = rb == 2;
        if !shared && (rb != r || bsh[..rb - 2] != ash[..r - 2]) {
            return Err(dim_err(op, ash, bsh, "leading axes differ"));
        }
        let batch: usize = ash[..r - 2].iter().product();
        let mut out_shape = ash[..r - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![F::zero(); batch * m * n];
        if shared {
            F::gemm(
                batch * m,
                k,
                n,
                F::one(),
                av.data(),
                false,
                bv.data(),
                trans_b,
                F::zero(),
                &mut out,
            );
        } else {
            for t in 0..batch {
                F::gemm(
                    m,
                    k,
                    n,
                    F::one(),
                    &av.data()[t * m * k..],
                    false,
                    &bv.data()[t * k * n..],
                    trans_b,
                    F::zero(),
                    &mut out[t * m * n..],
                );
            }
        }
        let ng = self.grad_of(&[a.idx, b.idx]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::MatMul {
                a: a.idx,
                b: b.idx,
                trans_b,
            },
            ng,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = &self.node(a)?.value;
        if av.rank() < 2 {
            return Err(dim_err("transpose", av.shape(), &[], "rank < 2"));
        }
        let out = transpose_last(av);
        let ng = self.nodes[a.idx].needs_grad;
        Ok(self.push(out, Op::Transpose { a: a.idx }, ng))
    }

    // ---- elementwise ---------------------------------------------------

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ash, bsh) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if !is_suffix(ash, bsh) {
            return Err(dim_err(op, ash, bsh, "rhs must match trailing axes of lhs"));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        self.check_broadcast(op, a, b)?;
        let av = &self.nodes[a.idx].value;
        let bv = &self.nodes[b.idx].value;
        let nb = bv.numel();
        let data = av
            .data()
            .chunks(nb)
            .flat_map(|chunk| chunk.iter().zip(bv.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    /// `a + b`, with `b` broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let ng = self.grad_of(&[a.idx, b.idx]);
        Ok(self.push(out, Op::Add { a: a.idx, b: b.idx }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let ng = self.grad_of(&[a.idx, b.idx]);
        Ok(self.push(out, Op::Sub { a: a.idx, b: b.idx }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let ng = self.grad_of(&[a.idx, b.idx]);
        Ok(self.push(out, Op::Mul { a: a.idx, b: b.idx }, ng))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Result<Var> {
        let av = &self.node(a)?.value;
        let data = av.data().iter().map(|&x| x * s).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.nodes[a.idx].needs_grad;
        Ok(self.push(out, Op::Scale { a: a.idx, s }, ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Result<Var> {
        let av = &self.node(a)?.value;
        let data = av.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.nodes[a.idx].needs_grad;
        Ok(self.push(out, op, ng))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.ln(), Op::Log { a: a.idx })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.tanh(), Op::Tanh { a: a.idx })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| if x > F::zero() { x } else { F::zero() }, Op::Relu { a: a.idx })
    }

    // ---- normalization -------------------------------------------------

    /// Softmax over the last axis. With a mask of shape `[Bm, rows, cols]`,
    /// leading index `t` of the input uses mask slice `t / (batch / Bm)` and
    /// masked logits receive an additive `-1e9`. A row with no valid column
    /// is an error.
    pub fn softmax(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        let av = &self.node(a)?.value;
        let cols = av.last_dim();
        let rows_total = av.numel() / cols;
        let mut out = vec![F::zero(); av.numel()];
        let fill = F::from_f64_lossy(MASK_FILL);
        let mask_rows = match mask {
            Some(m) => {
                let ms = m.shape();
                let r = av.rank();
                if r < 2 || ms.len() != 3 || ms[1..] != av.shape()[r - 2..] {
                    return Err(dim_err("softmax", av.shape(), ms, "mask must be [batch, rows, cols]"));
                }
                let batch = rows_total / ms[1];
                if batch % ms[0] != 0 {
                    return Err(dim_err("softmax", av.shape(), ms, "batch not a multiple of mask batch"));
                }
                Some((m, ms[1], batch / ms[0]))
            }
            None => None,
        };
        let mut scratch = vec![F::zero(); cols];
        for row in 0..rows_total {
            let x = &av.data()[row * cols..(row + 1) * cols];
            let valid: Option<&[bool]> = mask_rows.map(|(m, rows, repeat)| {
                let t = row / rows;
                let mrow = (t / repeat) * rows + row % rows;
                &m.data()[mrow * cols..(mrow + 1) * cols]
            });
            if let Some(v) = valid {
                if !v.iter().any(|&b| b) {
                    return Err(TensorError::EmptyContext { op: "softmax", row });
                }
            }
            for (j, s) in scratch.iter_mut().enumerate() {
                *s = match valid {
                    Some(v) if !v[j] => x[j] + fill,
                    _ => x[j],
                };
            }
            let max = scratch.iter().fold(F::neg_infinity(), |m, &s| m.max(s));
            let y = &mut out[row * cols..(row + 1) * cols];
            let mut sum = F::zero();
            for (yj, &s) in y.iter_mut().zip(&scratch) {
                *yj = (s - max).exp();
                sum += *yj;
            }
            for yj in y.iter_mut() {
                *yj /= sum;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), out)?;
        let ng = self.nodes[a.idx].needs_grad;
        Ok(self.push(out, Op::Softmax { a: a.idx }, ng))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let (gv, bv) = (&self.node(gamma)?.value, &self.node(beta)?.value);
        let d = xv.last_dim();
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(dim_err(
                "layer_norm",
                xv.shape(),
                gv.shape(),
                "affine terms must be [d]",
            ));
        }
        let rows = xv.numel() / d;
        let eps = F::from_f64_lossy(LAYER_NORM_EPS);
        let df = F::from_usize_lossy(d);
        let mut xhat = vec![F::zero(); xv.numel()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.grad_of(&[x.idx, gamma.idx, beta.idx]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: x.idx,
                gamma: gamma.idx,
                beta: beta.idx,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    // ---- indexing and shape ----------------------------------------------

    /// Rows of `table` (`[V, d]`) selected by `ids`; output `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = &self.node(table)?.value;
        if tv.rank() != 2 {
            return Err(dim_err("embedding", tv.shape(), &[], "table must be rank 2"));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::OutOfRange {
                    what: "embedding table",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        let ng = self.nodes[table.idx].needs_grad;
        Ok(self.push(
            out,
            Op::Embedding {
                table: table.idx,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.node(a)?.value.clone().reshaped(shape)?;
        let ng = self.nodes[a.idx].needs_grad;
        Ok(self.push(out, Op::Reshape { a: a.idx }, ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.node(parts[0])?.value.shape().to_vec();
        if axis >= first.len() {
            return Err(dim_err("concat", &first, &[], "axis out of range"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.node(p)?.value.shape();
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(dim_err("concat", &first, s, format!("parts differ off axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let pv = &self.nodes[p.idx].value;
                let len = pv.shape()[axis] * inner;
                out.extend_from_slice(&pv.data()[o * len..(o + 1) * len]);
            }
        }
        let out = Tensor::new(shape, out)?;
        let idx: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        let ng = self.grad_of(&idx);
        Ok(self.push(out, Op::Concat { parts: idx, axis }, ng))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let av = &self.node(a)?.value;
        let shape = av.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(dim_err(
                "narrow",
                shape,
                &[start, len],
                format!("bad range on axis {axis}"),
            ));
        }
        let (outer, n, inner) = split_axis(shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&av.data()[base..base + len * inner]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[axis] = len;
        let out = Tensor::new(new_shape, out)?;
        let ng = self.nodes[a.idx].needs_grad;
        Ok(self.push(out, Op::Narrow { a: a.idx, axis, start }, ng))
    }

    /// Mean over `axis`; the axis is removed (a rank-1 input yields `[1]`).
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = &self.node(a)?.value;
        let shape = av.shape();
        if axis >= shape.len() {
            return Err(dim_err("mean", shape, &[axis], "axis out of range"));
        }
        let (outer, n, inner) = split_axis(shape, axis);
        let nf = F::from_usize_lossy(n);
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += av.data()[(o * n + j) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|x| *x /= nf);
        let mut new_shape: Vec<usize> = shape.to_vec();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let out = Tensor::new(new_shape, out)?;
        let ng = self.nodes[a.idx].needs_grad;
        Ok(self.push(out, Op::Mean { a: a.idx, axis }, ng))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.node(a)?.value.data().iter().copied().sum::<F>();
        let ng = self.nodes[a.idx].needs_grad;
        Ok(self.push(Tensor::scalar(s), Op::Sum { a: a.idx }, ng))
    }

    /// `[B, T, H·dk] -> [B·H, T, dk]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let av = &self.node(a)?.value;
        let s = av.shape();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(dim_err("split_heads", s, &[heads], "need [B, T, H*dk]"));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let dk = d / heads;
        let mut out = vec![F::zero(); av.numel()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let src = (bi * t + ti) * d + h * dk;
                    let dst = ((bi * heads + h) * t + ti) * dk;
                    out[dst..dst + dk].copy_from_slice(&av.data()[src..src + dk]);
                }
            }
        }
        let out = Tensor::new(vec![b * heads, t, dk], out)?;
        let ng = self.nodes[a.idx].needs_grad;
        Ok(self.push(out, Op::SplitHeads { a: a.idx, heads }, ng))
    }

    /// `[B·H, T, dk] -> [B, T, H·dk]`.
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let av = &self.node(a)?.value;
        let s = av.shape();
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 {
            return Err(dim_err("merge_heads", s, &[heads], "need [B*H, T, dk]"));
        }
        let (bh, t, dk) = (s[0], s[1], s[2]);
        let b = bh / heads;
        let d = dk * heads;
        let mut out = vec![F::zero(); av.numel()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let dst = (bi * t + ti) * d + h * dk;
                    let src = ((bi * heads + h) * t + ti) * dk;
                    out[dst..dst + dk].copy_from_slice(&av.data()[src..src + dk]);
                }
            }
        }
        let out = Tensor::new(vec![b, t, d], out)?;
        let ng = self.nodes[a.idx].needs_grad;
        Ok(self.push(out, Op::MergeHeads { a: a.idx, heads }, ng))
    }

    // ---- losses ----------------------------------------------------------

    /// Summed softmax cross-entropy over the rows of `logits` (last axis is
    /// the class axis). Rows whose target is `None` are ignored. With
    /// `smoothing = ε`, the target distribution is `(1-ε)·onehot + ε/V`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], smoothing: F) -> Result<Var> {
        let lv = &self.node(logits)?.value;
        let v = lv.last_dim();
        let rows = lv.numel() / v;
        if targets.len() != rows {
            return Err(dim_err(
                "cross_entropy",
                lv.shape(),
                &[targets.len()],
                "one target per row",
            ));
        }
        let vf = F::from_usize_lossy(v);
        let mut probs = vec![F::zero(); lv.numel()];
        let mut total = F::zero();
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            if t >= v {
                return Err(TensorError::OutOfRange {
                    what: "cross_entropy classes",
                    index: t,
                    size: v,
                });
            }
            let x = lv.row(r);
            let max = x.iter().fold(F::neg_infinity(), |m, &s| m.max(s));
            let sum: F = x.iter().map(|&s| (s - max).exp()).sum();
            let lse = max + sum.ln();
            let p = &mut probs[r * v..(r + 1) * v];
            for (pj, &s) in p.iter_mut().zip(x) {
                *pj = (s - lse).exp();
            }
            let nll = lse - x[t];
            let loss = if smoothing > F::zero() {
                let mean_nll = x.iter().map(|&s| lse - s).sum::<F>() / vf;
                (F::one() - smoothing) * nll + smoothing * mean_nll
            } else {
                nll
            };
            total += loss;
        }
        let ng = self.nodes[logits.idx].needs_grad;
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits: logits.idx,
                targets: targets.to_vec(),
                smoothing,
                probs,
            },
            ng,
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = &self.node(loss)?.value;
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..=loss.idx).map(|_| None).collect();
        grads[loss.idx] = Some(vec![F::one()]);
        for idx in (0..=loss.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params: Vec<Tensor<F>> = self.param_shapes.iter().map(|s| Tensor::zeros(s)).collect();
        let mut inputs = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate().take(loss.idx + 1) {
            let Some(g) = grads[idx].take() else { continue };
            match node.op {
                Op::Param(p) if node.needs_grad => {
                    params[p] = Tensor::new(node.value.shape().to_vec(), g)?;
                }
                Op::Input if node.needs_grad => {
                    inputs.push((idx, Tensor::new(node.value.shape().to_vec(), g)?));
                }
                _ => {}
            }
        }
        debug_assert_eq!(params.len(), self.n_params);
        Ok(Gradients {
            params,
            inputs,
            graph: self.id,
        })
    }

    fn propagate(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[idx];
        let value = &node.value;
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[i].needs_grad;

        fn slot<F: Float>(grads: &mut [Option<Vec<F>>], i: usize, n: usize) -> &mut Vec<F> {
            grads[i].get_or_insert_with(|| vec![F::zero(); n])
        }

        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let r = av.rank();
                let (m, k) = (av.shape()[r - 2], av.shape()[r - 1]);
                let n = value.last_dim();
                let batch = av.numel() / (m * k);
                let shared = bv.rank() == 2;
                if wants(*a) {
                    let ga = slot(grads, *a, av.numel());
                    if shared {
                        F::gemm(batch * m, n, k, F::one(), g, false, bv.data(), !trans_b, F::one(), ga);
                    } else {
                        for t in 0..batch {
                            F::gemm(
                                m,
                                n,
                                k,
                                F::one(),
                                &g[t * m * n..],
                                false,
                                &bv.data()[t * k * n..],
                                !trans_b,
                                F::one(),
                                &mut ga[t * m * k..],
                            );
                        }
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, bv.numel());
                    let (rows, steps) = if shared { (batch * m, 1) } else { (m, batch) };
                    for t in 0..steps {
                        let at = &av.data()[t * rows * k..];
                        let gt = &g[t * rows * n..];
                        let gbt = &mut gb[t * k * n..];
                        if *trans_b {
                            F::gemm(n, rows, k, F::one(), gt, true, at, false, F::one(), gbt);
                        } else {
                            F::gemm(k, rows, n, F::one(), at, true, gt, false, F::one(), gbt);
                        }
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) {
                    -F::one()
                } else {
                    F::one()
                };
                if wants(*a) {
                    let ga = slot(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if wants(*b) {
                    let nb = nodes[*b].value.numel();
                    let gb = slot(grads, *b, nb);
                    for chunk in g.chunks(nb) {
                        gb.iter_mut().zip(chunk).for_each(|(x, &y)| *x += sign * y);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let nb = bv.numel();
                if wants(*a) {
                    let ga = slot(grads, *a, g.len());
                    for (i, (x, &y)) in ga.iter_mut().zip(g).enumerate() {
                        *x += y * bv.data()[i % nb];
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, nb);
                    for (gc, ac) in g.chunks(nb).zip(av.data().chunks(nb)) {
                        for j in 0..nb {
                            gb[j] += gc[j] * ac[j];
                        }
                    }
                }
            }
            Op::Scale { a, s } => {
                if wants(*a) {
                    let ga = slot(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *s);
                }
            }
            Op::Transpose { a } => {
                if wants(*a) {
                    let gt = transpose_last(&Tensor::new(value.shape().to_vec(), g.to_vec()).unwrap());
                    let ga = slot(grads, *a, g.len());
                    ga.iter_mut().zip(gt.data()).for_each(|(x, &y)| *x += y);
                }
            }
            Op::Softmax { a } => {
                if wants(*a) {
                    let cols = value.last_dim();
                    let ga = slot(grads, *a, g.len());
                    for ((gr, yr), out) in g.chunks(cols).zip(value.data().chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let dot: F = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                        for j in 0..cols {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Log { a } => {
                if wants(*a) {
                    let av = &nodes[*a].value;
                    let ga = slot(grads, *a, g.len());
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] / av.data()[i];
                    }
                }
            }
            Op::Tanh { a } => {
                if wants(*a) {
                    let ga = slot(grads, *a, g.len());
                    for (i, x) in ga.iter_mut().enumerate() {
                        let y = value.data()[i];
                        *x += g[i] * (F::one() - y * y);
                    }
                }
            }
            Op::Relu { a } => {
                if wants(*a) {
                    let ga = slot(grads, *a, g.len());
                    for (i, x) in ga.iter_mut().enumerate() {
                        if value.data()[i] > F::zero() {
                            *x += g[i];
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
                let d = value.last_dim();
                let gam = nodes[*gamma].value.data();
                if wants(*gamma) {
                    let gg = slot(grads, *gamma, d);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if wants(*beta) {
                    let gb = slot(grads, *beta, d);
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += gr[j];
                        }
                    }
                }
                if wants(*x) {
                    let df = F::from_usize_lossy(d);
                    let gx = slot(grads, *x, g.len());
                    let mut dxhat = vec![F::zero(); d];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for j in 0..d {
                            dxhat[j] = gr[j] * gam[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * hr[j];
                        }
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += *rs / df * (df * dxhat[j] - s1 - hr[j] * s2);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let d = value.last_dim();
                    let n = nodes[*table].value.numel();
                    let gt = slot(grads, *table, n);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if wants(*a) {
                    let ga = slot(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let pn = nodes[p].value.shape()[*axis];
                    if wants(p) {
                        let np = nodes[p].value.numel();
                        let gp = slot(grads, p, np);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * pn * inner;
                            for i in 0..pn * inner {
                                gp[dst + i] += g[src + i];
                            }
                        }
                    }
                    offset += pn;
                }
            }
            Op::Narrow { a, axis, start } => {
                if wants(*a) {
                    let ashape = nodes[*a].value.shape();
                    let (outer, n, inner) = split_axis(ashape, *axis);
                    let len = value.shape()[*axis];
                    let ga = slot(grads, *a, nodes[*a].value.numel());
                    for o in 0..outer {
                        let base = o * n * inner + start * inner;
                        for i in 0..len * inner {
                            ga[base + i] += g[o * len * inner + i];
                        }
                    }
                }
            }
            Op::Mean { a, axis } => {
                if wants(*a) {
                    let ashape = nodes[*a].value.shape();
                    let (outer, n, inner) = split_axis(ashape, *axis);
                    let nf = F::from_usize_lossy(n);
                    let ga = slot(grads, *a, nodes[*a].value.numel());
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                ga[(o * n + j) * inner + i] += g[o * inner + i] / nf;
                            }
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if wants(*a) {
                    let ga = slot(grads, *a, nodes[*a].value.numel());
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
            } => {
                if wants(*logits) {
                    let v = nodes[*logits].value.last_dim();
                    let vf = F::from_usize_lossy(v);
                    let gl = slot(grads, *logits, probs.len());
                    for (r, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        for j in 0..v {
                            let mut q = *smoothing / vf;
                            if j == t {
                                q += F::one() - *smoothing;
                            }
                            gl[r * v + j] += g[0] * (probs[r * v + j] - q);
                        }
                    }
                }
            }
            Op::SplitHeads { a, heads } => {
                if wants(*a) {
                    let s = nodes[*a].value.shape();
                    let (b, t, d) = (s[0], s[1], s[2]);
                    let dk = d / heads;
                    let ga = slot(grads, *a, g.len());
                    for bi in 0..b {
                        for ti in 0..t {
                            for h in 0..*heads {
                                let dst = (bi * t + ti) * d + h * dk;
                                let src = ((bi * heads + h) * t + ti) * dk;
                                for c in 0..dk {
                                    ga[dst + c] += g[src + c];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { a, heads } => {
                if wants(*a) {
                    let s = nodes[*a].value.shape();
                    let (bh, t, dk) = (s[0], s[1], s[2]);
                    let b = bh / heads;
                    let d = dk * heads;
                    let ga = slot(grads, *a, g.len());
                    for bi in 0..b {
                        for ti in 0..t {
                            for h in 0..*heads {
                                let src = (bi * t + ti) * d + h * dk;
                                let dst = ((bi * heads + h) * t + ti) * dk;
                                for c in 0..dk {
                                    ga[dst + c] += g[src + c];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn transpose_last<F: Float>(t: &Tensor<F>) -> Tensor<F> {
    let s = t.shape();
    let r = s.len();
    let (m, n) = (s[r - 2], s[r - 1]);
    let batch = t.numel() / (m * n);
    let mut out = vec![F::zero(); t.numel()];
    for b in 0..batch {
        let src = &t.data()[b * m * n..(b + 1) * m * n];
        let dst = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::new(shape, out).unwrap()
}
