//! Reverse-mode differentiation over an explicit record of tensor operations.
//!
//! A [`Graph`] borrows a [`ParamStore`] and appends one node per forward op.
//! Every op's inputs have lower node indices than its output, so the backward
//! pass is a single reverse sweep over the record.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_err, Result};
use crate::float::{gemm, Float, View};
use crate::functional::{log_softmax_in_place, softmax_in_place};
use crate::optim::Gradients;
use crate::params::{ParamId, ParamStore};
use crate::sparse::Csr;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One block of attention: a contiguous run of query rows attending to a
/// contiguous run of key rows. Batches of variable-length sequences are
/// packed row-wise and described by one segment per sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    /// Query `i` sees keys `0..=i` only.
    pub causal: bool,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: usize, b: usize, trans_b: bool },
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    ScaleBy(usize, usize),
    OneMinus(usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        segs: Vec<AttnSegment>,
        probs: Vec<T>,
    },
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    SoftCrossEntropy {
        logp: usize,
        target: Tensor<T>,
        weights: Vec<T>,
    },
    Dropout {
        a: usize,
        mask: Vec<T>,
    },
    SpMM {
        adj: Arc<Csr<T>>,
        h: usize,
    },
    ConcatCols(usize, usize),
    ConcatRows(Vec<usize>),
    SliceRows {
        a: usize,
        start: usize,
    },
    Reshape(usize),
    SumAll(usize),
    SegmentMean {
        a: usize,
        segs: Vec<(usize, usize)>,
    },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// The computation record. Create one per forward pass.
pub struct Graph<'p, T: Float> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    rng: Option<ChaCha8Rng>,
}

impl<'p, T: Float> Graph<'p, T> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            rng: None,
        }
    }

    /// Training-mode graph; dropout masks are drawn from `seed`.
    pub fn training(params: &'p ParamStore<T>, seed: u64) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.value_at(v.0)
    }

    fn value_at(&self, i: usize) -> &Tensor<T> {
        match &self.nodes[i].op {
            Op::Param(id) => self.params.get(*id),
            _ => self.nodes[i].value.as_ref().expect("non-param node has a value"),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var {
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: self.params.is_trainable(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// `a @ b`, or `a @ b^T` when `trans_b`.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (br, bc) = self.value(b).dims2();
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return shape_err(format!(
                "matmul {m}x{k} by {br}x{bc} (trans_b={trans_b})"
            ));
        }
        let mut out = vec![T::zero(); m * n];
        let vb = if trans_b {
            View::transposed(0, k)
        } else {
            View::rowmajor(0, n)
        };
        gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            View::rowmajor(0, k),
            self.value(b).data(),
            vb,
            T::zero(),
            &mut out,
            View::rowmajor(0, n),
        );
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(
            t,
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b,
            },
            &[a.0, b.0],
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    /// `a @ b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            return shape_err(format!("add {:?} + {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    /// Broadcasts a `1 x c` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        let bias = self.value(row);
        if bias.len() != c {
            return shape_err(format!("add_row: {r}x{c} with bias of {}", bias.len()));
        }
        let mut out = self.value(a).clone();
        for i in 0..r {
            for (x, &b) in out.row_mut(i).iter_mut().zip(bias.data()) {
                *x += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a.0, row.0), &[a.0, row.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            return shape_err(format!("mul {:?} * {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a.0, s), &[a.0])
    }

    /// Multiplies every entry of `a` by the single entry of `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return shape_err("scale_by expects a 1x1 scalar");
        }
        let sv = self.value(s).item();
        let t = self.value(a).map(|x| x * sv);
        Ok(self.push(t, Op::ScaleBy(a.0, s.0), &[a.0, s.0]))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| T::one() - x);
        self.push(t, Op::OneMinus(a.0), &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(t, Op::Relu(a.0), &[a.0])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.tanh());
        self.push(t, Op::Tanh(a.0), &[a.0])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a.0), &[a.0])
    }

    /// Row-wise layer normalization with learned gain and bias (`1 x c` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let eps = T::lit(1e-5);
        let (r, c) = self.value(x).dims2();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return shape_err("layer_norm gain/bias width");
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![T::zero(); r * c];
        let mut inv_std = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        let n = T::lit(c as f64);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
            &[x.0, gain.0, bias.0],
        ))
    }

    /// Selects rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (r, c) = tv.dims2();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return invalid(format!("gather index {id} out of {r} rows"));
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::matrix(ids.len(), c, out)?;
        Ok(self.push(
            t,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table.0],
        ))
    }

    /// Scaled dot-product multi-head attention over packed segments.
    ///
    /// `q` is `N x d`, `k` and `v` are `M x d`; head `h` uses columns
    /// `h*d/heads .. (h+1)*d/heads`. Rows of `q` not covered by a segment
    /// produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segs: &[AttnSegment],
    ) -> Result<Var> {
        let (n, d) = self.value(q).dims2();
        let (m, dk) = self.value(k).dims2();
        let (mv, dv) = self.value(v).dims2();
        if dk != d || dv != d || mv != m {
            return shape_err(format!("attention q {n}x{d}, k {m}x{dk}, v {mv}x{dv}"));
        }
        if heads == 0 || d % heads != 0 {
            return invalid(format!("width {d} not divisible by {heads} heads"));
        }
        for s in segs {
            if s.q_start + s.q_len > n || s.k_start + s.k_len > m {
                return invalid(format!("attention segment {s:?} out of range"));
            }
            if s.q_len > 0 && s.k_len == 0 {
                return invalid("attention segment with queries but no keys");
            }
        }
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let total: usize = segs.iter().map(|s| s.q_len * s.k_len).sum::<usize>() * heads;
        let mut probs = vec![T::zero(); total];
        let mut out = vec![T::zero(); n * d];
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut off = 0;
        for s in segs {
            for h in 0..heads {
                let block = &mut probs[off..off + s.q_len * s.k_len];
                // scores = Q_h K_h^T * scale
                gemm(
                    s.q_len,
                    dh,
                    s.k_len,
                    scale,
                    qd,
                    View::rowmajor(s.q_start * d + h * dh, d),
                    kd,
                    View {
                        offset: s.k_start * d + h * dh,
                        rs: 1,
                        cs: d,
                    },
                    T::zero(),
                    block,
                    View::rowmajor(0, s.k_len),
                );
                for i in 0..s.q_len {
                    let row = &mut block[i * s.k_len..(i + 1) * s.k_len];
                    if s.causal {
                        for x in row.iter_mut().skip(i + 1) {
                            *x = T::neg_infinity();
                        }
                    }
                    softmax_in_place(row);
                }
                gemm(
                    s.q_len,
                    s.k_len,
                    dh,
                    T::one(),
                    block,
                    View::rowmajor(0, s.k_len),
                    vd,
                    View::rowmajor(s.k_start * d + h * dh, d),
                    T::zero(),
                    &mut out,
                    View::rowmajor(s.q_start * d + h * dh, d),
                );
                off += s.q_len * s.k_len;
            }
        }
        let t = Tensor::matrix(n, d, out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                segs: segs.to_vec(),
                probs,
            },
            &[q.0, k.0, v.0],
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        for i in 0..t.rows() {
            softmax_in_place(t.row_mut(i));
        }
        self.push(t, Op::SoftmaxRows(a.0), &[a.0])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        for i in 0..t.rows() {
            log_softmax_in_place(t.row_mut(i));
        }
        self.push(t, Op::LogSoftmaxRows(a.0), &[a.0])
    }

    /// `sum_r weights[r] * (-sum_k target[r,k] * logp[r,k])`, a scalar.
    ///
    /// `target` rows are arbitrary (soft or one-hot) distributions and are
    /// treated as constants.
    pub fn soft_cross_entropy(&mut self, logp: Var, target: Tensor<T>, weights: Vec<T>) -> Result<Var> {
        let lv = self.value(logp);
        let (r, c) = lv.dims2();
        if target.dims2() != (r, c) || weights.len() != r {
            return shape_err(format!(
                "soft_cross_entropy: logp {r}x{c}, target {:?}, {} weights",
                target.shape(),
                weights.len()
            ));
        }
        let mut total = T::zero();
        for i in 0..r {
            if weights[i] == T::zero() {
                continue;
            }
            let mut ce = T::zero();
            for (&t, &l) in target.row(i).iter().zip(lv.row(i)) {
                if t != T::zero() {
                    ce -= t * l;
                }
            }
            total += weights[i] * ce;
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::SoftCrossEntropy {
                logp: logp.0,
                target,
                weights,
            },
            &[logp.0],
        ))
    }

    /// Inverted dropout; identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if p <= 0.0 || self.rng.is_none() {
            return a;
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let n = self.value(a).len();
        let rng = self.rng.as_mut().unwrap();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let av = self.value(a);
        let data = av.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Dropout { a: a.0, mask }, &[a.0])
    }

    /// Sparse-dense product `adj @ h`; `adj` is a constant.
    pub fn spmm(&mut self, adj: Arc<Csr<T>>, h: Var) -> Result<Var> {
        let (r, c) = self.value(h).dims2();
        if adj.n_cols != r {
            return shape_err(format!("spmm {}x{} by {r}x{c}", adj.n_rows, adj.n_cols));
        }
        let hv = self.value(h);
        let mut out = vec![T::zero(); adj.n_rows * c];
        for i in 0..adj.n_rows {
            let orow = &mut out[i * c..(i + 1) * c];
            for (j, w) in adj.row(i) {
                for (o, &x) in orow.iter_mut().zip(hv.row(j)) {
                    *o += w * x;
                }
            }
        }
        let t = Tensor::matrix(adj.n_rows, c, out)?;
        Ok(self.push(t, Op::SpMM { adj, h: h.0 }, &[h.0]))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).dims2();
        let (rb, cb) = self.value(b).dims2();
        if ra != rb {
            return shape_err(format!("concat_cols {ra}x{ca} with {rb}x{cb}"));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(va.row(i));
            out.extend_from_slice(vb.row(i));
        }
        let t = Tensor::matrix(ra, ca + cb, out)?;
        Ok(self.push(t, Op::ConcatCols(a.0, b.0), &[a.0, b.0]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return invalid("concat_rows of nothing");
        }
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            if v.cols() != c {
                return shape_err("concat_rows width mismatch");
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let t = Tensor::matrix(rows, c, out)?;
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(t, Op::ConcatRows(idx.clone()), &idx))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if start + len > r {
            return invalid(format!("slice_rows {start}+{len} of {r}"));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::matrix(len, c, data)?;
        Ok(self.push(t, Op::SliceRows { a: a.0, start }, &[a.0]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a.0), &[a.0]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a.0), &[a.0])
    }

    /// Mean of each `(start, len)` block of rows; one output row per block.
    pub fn segment_mean(&mut self, a: Var, segs: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        let mut out = vec![T::zero(); segs.len() * c];
        for (si, &(start, len)) in segs.iter().enumerate() {
            if len == 0 || start + len > r {
                return invalid(format!("segment ({start}, {len}) of {r} rows"));
            }
            let inv = T::one() / T::lit(len as f64);
            for i in start..start + len {
                for (o, &x) in out[si * c..(si + 1) * c].iter_mut().zip(self.value(a).row(i)) {
                    *o += x * inv;
                }
            }
        }
        let t = Tensor::matrix(segs.len(), c, out)?;
        Ok(self.push(
            t,
            Op::SegmentMean {
                a: a.0,
                segs: segs.to_vec(),
            },
            &[a.0],
        ))
    }

    /// Runs the backward sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients::new(self.params.len());
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], i: usize) -> Option<&'g mut Tensor<T>> {
        if !self.nodes[i].needs_grad {
            return None;
        }
        if grads[i].is_none() {
            grads[i] = Some(Tensor::zeros(self.value_at(i).shape()));
        }
        grads[i].as_mut()
    }

    fn backward_node(&self, i: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>], out: &mut Gradients<T>) {
        let y = self.value_at(i);
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Param(id) => out.accumulate(*id, g),
            &Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.value_at(a).dims2();
                let n = g.cols();
                let (ad, bd) = (self.value_at(a).data(), self.value_at(b).data());
                if let Some(ga) = self.slot(grads, a) {
                    // dA = G B^T  (or G B when B was used transposed)
                    let vb = if trans_b {
                        View::rowmajor(0, k)
                    } else {
                        View::transposed(0, n)
                    };
                    gemm(m, n, k, T::one(), g.data(), View::rowmajor(0, n), bd, vb, T::one(), ga.data_mut(), View::rowmajor(0, k));
                }
                if let Some(gb) = self.slot(grads, b) {
                    if trans_b {
                        // dB = G^T A   (n x k)
                        gemm(n, m, k, T::one(), g.data(), View::transposed(0, n), ad, View::rowmajor(0, k), T::one(), gb.data_mut(), View::rowmajor(0, k));
                    } else {
                        // dB = A^T G   (k x n)
                        gemm(k, m, n, T::one(), ad, View::transposed(0, k), g.data(), View::rowmajor(0, n), T::one(), gb.data_mut(), View::rowmajor(0, n));
                    }
                }
            }
            &Op::Add(a, b) => {
                for p in [a, b] {
                    if let Some(gp) = self.slot(grads, p) {
                        gp.add_assign(&g);
                    }
                }
            }
            &Op::AddRow(a, row) => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.add_assign(&g);
                }
                if let Some(gr) = self.slot(grads, row) {
                    let c = g.cols();
                    for r in 0..g.rows() {
                        for (x, &v) in gr.data_mut()[..c].iter_mut().zip(g.row(r)) {
                            *x += v;
                        }
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value_at(a).data(), self.value_at(b).data());
                if let Some(ga) = self.slot(grads, a) {
                    for ((x, &gv), &o) in ga.data_mut().iter_mut().zip(g.data()).zip(bv) {
                        *x += gv * o;
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for ((x, &gv), &o) in gb.data_mut().iter_mut().zip(g.data()).zip(av) {
                        *x += gv * o;
                    }
                }
            }
            &Op::Scale(a, s) => {
                if let Some(ga) = self.slot(grads, a) {
                    for (x, &gv) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x += gv * s;
                    }
                }
            }
            &Op::ScaleBy(a, s) => {
                let sv = self.value_at(s).item();
                let av = self.value_at(a).data();
                if let Some(ga) = self.slot(grads, a) {
                    for (x, &gv) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x += gv * sv;
                    }
                }
                if let Some(gs) = self.slot(grads, s) {
                    let dot: T = g.data().iter().zip(av).map(|(&gv, &x)| gv * x).sum();
                    gs.data_mut()[0] += dot;
                }
            }
            &Op::OneMinus(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    for (x, &gv) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x -= gv;
                    }
                }
            }
            &Op::Relu(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    for ((x, &gv), &o) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        if o > T::zero() {
                            *x += gv;
                        }
                    }
                }
            }
            &Op::Tanh(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    for ((x, &gv), &o) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *x += gv * (T::one() - o * o);
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    for ((x, &gv), &o) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *x += gv * o * (T::one() - o);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, c) = g.dims2();
                let gv = self.value_at(*gain).data();
                if let Some(gg) = self.slot(grads, *gain) {
                    for i in 0..r {
                        for j in 0..c {
                            gg.data_mut()[j] += g.data()[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for i in 0..r {
                        for j in 0..c {
                            gb.data_mut()[j] += g.data()[i * c + j];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let n = T::lit(c as f64);
                    let mut dxhat = vec![T::zero(); c];
                    for i in 0..r {
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for j in 0..c {
                            let d = g.data()[i * c + j] * gv[j];
                            dxhat[j] = d;
                            sum_d += d;
                            sum_dx += d * xhat[i * c + j];
                        }
                        let inv = inv_std[i];
                        for j in 0..c {
                            gx.data_mut()[i * c + j] +=
                                inv / n * (n * dxhat[j] - sum_d - xhat[i * c + j] * sum_dx);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(gt) = self.slot(grads, *table) {
                    let c = g.cols();
                    for (r, &id) in ids.iter().enumerate() {
                        for (x, &v) in gt.data_mut()[id * c..(id + 1) * c].iter_mut().zip(g.row(r)) {
                            *x += v;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segs,
                probs,
            } => self.attention_backward(&g, *q, *k, *v, *heads, segs, probs, grads),
            &Op::SoftmaxRows(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    for r in 0..g.rows() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((x, &gv), &yv) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *x += yv * (gv - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmaxRows(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    for r in 0..g.rows() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let sum: T = gr.iter().copied().sum();
                        for ((x, &gv), &yv) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *x += gv - yv.exp() * sum;
                        }
                    }
                }
            }
            Op::SoftCrossEntropy {
                logp,
                target,
                weights,
            } => {
                let up = g.item();
                if let Some(gl) = self.slot(grads, *logp) {
                    for (r, &w) in weights.iter().enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        let f = -up * w;
                        for (x, &t) in gl.row_mut(r).iter_mut().zip(target.row(r)) {
                            *x += f * t;
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, &gv), &m) in ga.data_mut().iter_mut().zip(g.data()).zip(mask) {
                        *x += gv * m;
                    }
                }
            }
            Op::SpMM { adj, h } => {
                if let Some(gh) = self.slot(grads, *h) {
                    let c = g.cols();
                    for i in 0..adj.n_rows {
                        for (j, w) in adj.row(i) {
                            for (x, &gv) in gh.data_mut()[j * c..(j + 1) * c].iter_mut().zip(g.row(i)) {
                                *x += w * gv;
                            }
                        }
                    }
                }
            }
            &Op::ConcatCols(a, b) => {
                let ca = self.value_at(a).cols();
                let cb = self.value_at(b).cols();
                if let Some(ga) = self.slot(grads, a) {
                    for r in 0..g.rows() {
                        for (x, &v) in ga.row_mut(r).iter_mut().zip(&g.row(r)[..ca]) {
                            *x += v;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for r in 0..g.rows() {
                        for (x, &v) in gb.row_mut(r).iter_mut().zip(&g.row(r)[ca..ca + cb]) {
                            *x += v;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value_at(p).len();
                    if let Some(gp) = self.slot(grads, p) {
                        for (x, &v) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                            *x += v;
                        }
                    }
                    offset += n;
                }
            }
            &Op::SliceRows { a, start } => {
                if let Some(ga) = self.slot(grads, a) {
                    let c = g.cols();
                    for (x, &v) in ga.data_mut()[start * c..start * c + g.len()].iter_mut().zip(g.data()) {
                        *x += v;
                    }
                }
            }
            &Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    for (x, &v) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x += v;
                    }
                }
            }
            &Op::SumAll(a) => {
                let up = g.item();
                if let Some(ga) = self.slot(grads, a) {
                    for x in ga.data_mut() {
                        *x += up;
                    }
                }
            }
            Op::SegmentMean { a, segs } => {
                if let Some(ga) = self.slot(grads, *a) {
                    let c = g.cols();
                    for (si, &(start, len)) in segs.iter().enumerate() {
                        let inv = T::one() / T::lit(len as f64);
                        for r in start..start + len {
                            for (x, &v) in ga.row_mut(r).iter_mut().zip(&g.data()[si * c..(si + 1) * c]) {
                                *x += v * inv;
                            }
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor<T>,
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        segs: &[AttnSegment],
        probs: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let d = g.cols();
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value_at(q).data(),
            self.value_at(k).data(),
            self.value_at(v).data(),
        );
        let mut gq = self.nodes[q].needs_grad.then(|| vec![T::zero(); qd.len()]);
        let mut gk = self.nodes[k].needs_grad.then(|| vec![T::zero(); kd.len()]);
        let mut gv = self.nodes[v].needs_grad.then(|| vec![T::zero(); vd.len()]);
        let mut off = 0;
        let mut dp = Vec::new();
        for s in segs {
            for h in 0..heads {
                let n = s.q_len * s.k_len;
                let p = &probs[off..off + n];
                off += n;
                if let Some(gv) = gv.as_mut() {
                    // dV_h += P^T dO_h
                    gemm(s.k_len, s.q_len, dh, T::one(), p, View::transposed(0, s.k_len), g.data(), View::rowmajor(s.q_start * d + h * dh, d), T::one(), gv, View::rowmajor(s.k_start * d + h * dh, d));
                }
                if gq.is_none() && gk.is_none() {
                    continue;
                }
                // dP = dO_h V_h^T
                dp.clear();
                dp.resize(n, T::zero());
                gemm(s.q_len, dh, s.k_len, T::one(), g.data(), View::rowmajor(s.q_start * d + h * dh, d), vd, View { offset: s.k_start * d + h * dh, rs: 1, cs: d }, T::zero(), &mut dp, View::rowmajor(0, s.k_len));
                // dS = P * (dP - rowdot(dP, P)) * scale
                for i in 0..s.q_len {
                    let row = i * s.k_len..(i + 1) * s.k_len;
                    let dot: T = dp[row.clone()].iter().zip(&p[row.clone()]).map(|(&a, &b)| a * b).sum();
                    for j in row {
                        dp[j] = p[j] * (dp[j] - dot) * scale;
                    }
                }
                if let Some(gq) = gq.as_mut() {
                    gemm(s.q_len, s.k_len, dh, T::one(), &dp, View::rowmajor(0, s.k_len), kd, View::rowmajor(s.k_start * d + h * dh, d), T::one(), gq, View::rowmajor(s.q_start * d + h * dh, d));
                }
                if let Some(gk) = gk.as_mut() {
                    gemm(s.k_len, s.q_len, dh, T::one(), &dp, View::transposed(0, s.k_len), qd, View::rowmajor(s.q_start * d + h * dh, d), T::one(), gk, View::rowmajor(s.k_start * d + h * dh, d));
                }
            }
        }
        for (idx, buf) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(buf) = buf {
                if let Some(slot) = self.slot(grads, idx) {
                    for (x, b) in slot.data_mut().iter_mut().zip(buf) {
                        *x += b;
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
