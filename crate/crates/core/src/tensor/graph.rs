//! Eager-forward reverse-mode autodiff.
//!
//! Every builder method computes its value immediately and records the
//! operation; construction order is therefore already a topological order
//! and `backward` is a single reverse sweep that visits each node once.
//! Forward outputs are checked finite — a NaN/Inf anywhere is an error, not
//! a silently propagated value.

use super::kernels;
use super::{ensure_finite, ParamId, ParamStore, Result, Tensor, TensorError};

pub type NodeId = usize;

pub(crate) enum Op {
    Constant,
    Var,
    Param(ParamId),
    Add(NodeId, NodeId),
    /// a + c * b
    AddScaled(NodeId, NodeId, f32),
    Scale(NodeId, f32),
    Mul(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    /// a @ b^T
    MatmulNT(NodeId, NodeId),
    /// a[R,d] + b[q,d] with row r of a receiving b[r % q]
    AddRowsCycled(NodeId, NodeId),
    GatherRows {
        src: NodeId,
        ids: Vec<usize>,
    },
    /// out[s] = src[s * period]
    TakeRow0 {
        src: NodeId,
        period: usize,
    },
    /// base with row s*period replaced by rows[s]
    SpliceRow0 {
        base: NodeId,
        rows: NodeId,
        period: usize,
    },
    Gelu {
        x: NodeId,
        /// tanh(u) per element, saved at forward for the backward rule
        tanh_u: Vec<f32>,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f32,
        /// (mean, rstd) per row, interleaved
        stats: Vec<f32>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f32>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_heads: usize,
        seq_len: usize,
        valid: Vec<bool>,
        /// post-softmax, pre-dropout probabilities, [n_sents, n_heads, p, p]
        probs: Vec<f32>,
        drop_mask: Option<Vec<f32>>,
        scale: f32,
    },
    CrossEntropyRows {
        logits: NodeId,
        targets: Vec<usize>,
        /// log-sum-exp per row
        lse: Vec<f32>,
    },
    RowsNormalize {
        x: NodeId,
        inv_norms: Vec<f32>,
    },
    CosineSim {
        a: NodeId,
        b: NodeId,
        norm_a: f32,
        norm_b: f32,
    },
    MeanAll(NodeId),
    SumAll(NodeId),
    /// Test fixture: forward doubles, backward deliberately claims a
    /// factor of three. Exists so the checker's negative-control test can
    /// prove a corrupted rule is caught.
    #[cfg(test)]
    BrokenScale(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Graph {
    pub fn new() -> Self {
        tune_allocator();
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f32 {
        self.nodes[id].value.item()
    }

    /// Gradient of the last `backward` loss w.r.t. this node, if any flowed.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!(
                    "{:?} vs {:?}",
                    self.nodes[a].value.shape(),
                    self.nodes[b].value.shape()
                ),
            });
        }
        Ok(())
    }

    // ── Leaves ──────────────────────────────────────────────────────

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    /// Leaf that participates in differentiation (for inputs under test).
    pub fn var(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Var, true)
    }

    /// Bind a parameter: copies its current value in. Frozen parameters are
    /// bound without gradient tracking, so no gradient ever reaches them.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let needs = !store.is_frozen(id);
        self.push(store.value(id).clone(), Op::Param(id), needs)
    }

    // ── Elementwise / linear ───────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data: Vec<f32> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x + y)
            .collect();
        ensure_finite(&data, "add")?;
        let shape = self.nodes[a].value.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), needs))
    }

    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, c: f32) -> Result<NodeId> {
        self.same_shape("add_scaled", a, b)?;
        let data: Vec<f32> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x + c * y)
            .collect();
        ensure_finite(&data, "add_scaled")?;
        let shape = self.nodes[a].value.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddScaled(a, b, c), needs))
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> Result<NodeId> {
        let data: Vec<f32> = self.nodes[a].value.data().iter().map(|x| x * c).collect();
        ensure_finite(&data, "scale")?;
        let shape = self.nodes[a].value.shape().to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::Scale(a, c), needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f32> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x * y)
            .collect();
        ensure_finite(&data, "mul")?;
        let shape = self.nodes[a].value.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), needs))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
        let (k2, n) = (self.nodes[b].value.rows(), self.nodes[b].value.cols());
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("[{m},{k}] @ [{k2},{n}]"),
            });
        }
        let mut data = vec![0.0; m * n];
        kernels::matmul_acc(&mut data, self.nodes[a].value.data(), self.nodes[b].value.data(), m, k, n);
        ensure_finite(&data, "matmul")?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::Matmul(a, b), needs))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
        let (n, k2) = (self.nodes[b].value.rows(), self.nodes[b].value.cols());
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                detail: format!("[{m},{k}] @ [{n},{k2}]^T"),
            });
        }
        let mut data = vec![0.0; m * n];
        kernels::matmul_nt_acc(&mut data, self.nodes[a].value.data(), self.nodes[b].value.data(), m, k, n);
        ensure_finite(&data, "matmul_nt")?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::MatmulNT(a, b), needs))
    }

    /// Row r of `a` gets `b[r % q]` added; covers bias rows (q = 1) and
    /// positional tables (q = seq_len) on sentence-major layouts.
    pub fn add_rows_cycled(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
        let (rb, cb) = (self.nodes[b].value.rows(), self.nodes[b].value.cols());
        if ca != cb || rb == 0 || ra % rb != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "add_rows_cycled",
                detail: format!("a [{ra},{ca}], b [{rb},{cb}]"),
            });
        }
        let mut data = self.nodes[a].value.data().to_vec();
        let bdat = self.nodes[b].value.data();
        for r in 0..ra {
            let brow = &bdat[(r % rb) * cb..(r % rb + 1) * cb];
            for (o, &bv) in data[r * ca..(r + 1) * ca].iter_mut().zip(brow) {
                *o += bv;
            }
        }
        ensure_finite(&data, "add_rows_cycled")?;
        let shape = self.nodes[a].value.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRowsCycled(a, b), needs))
    }

    pub fn gather_rows(&mut self, src: NodeId, ids: Vec<usize>) -> Result<NodeId> {
        let (rows, cols) = (self.nodes[src].value.rows(), self.nodes[src].value.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                detail: format!("row {bad} of {rows}"),
            });
        }
        let sdat = self.nodes[src].value.data();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in &ids {
            data.extend_from_slice(&sdat[i * cols..(i + 1) * cols]);
        }
        let needs = self.needs(src);
        let out = Tensor::matrix(ids.len(), cols, data)?;
        Ok(self.push(out, Op::GatherRows { src, ids }, needs))
    }

    /// Pull row 0 of every length-`period` row group: [S*period, d] -> [S, d].
    pub fn take_row0(&mut self, src: NodeId, period: usize) -> Result<NodeId> {
        let (rows, cols) = (self.nodes[src].value.rows(), self.nodes[src].value.cols());
        if period == 0 || rows % period != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "take_row0",
                detail: format!("{rows} rows, period {period}"),
            });
        }
        let groups = rows / period;
        let sdat = self.nodes[src].value.data();
        let mut data = Vec::with_capacity(groups * cols);
        for s in 0..groups {
            let r = s * period;
            data.extend_from_slice(&sdat[r * cols..(r + 1) * cols]);
        }
        let needs = self.needs(src);
        let out = Tensor::matrix(groups, cols, data)?;
        Ok(self.push(out, Op::TakeRow0 { src, period }, needs))
    }

    /// `base` [S*period, d] with row s*period overwritten by `rows[s]`.
    pub fn splice_row0(&mut self, base: NodeId, rows: NodeId, period: usize) -> Result<NodeId> {
        let (rb, cb) = (self.nodes[base].value.rows(), self.nodes[base].value.cols());
        let (rr, cr) = (self.nodes[rows].value.rows(), self.nodes[rows].value.cols());
        if period == 0 || rb % period != 0 || rb / period != rr || cb != cr {
            return Err(TensorError::ShapeMismatch {
                op: "splice_row0",
                detail: format!("base [{rb},{cb}], rows [{rr},{cr}], period {period}"),
            });
        }
        let mut data = self.nodes[base].value.data().to_vec();
        let rdat = self.nodes[rows].value.data();
        for s in 0..rr {
            let dst = s * period * cb;
            data[dst..dst + cb].copy_from_slice(&rdat[s * cb..(s + 1) * cb]);
        }
        let needs = self.needs(base) || self.needs(rows);
        let out = Tensor::matrix(rb, cb, data)?;
        Ok(self.push(out, Op::SpliceRow0 { base, rows, period }, needs))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.nodes[a].value.len();
        let mut data = vec![0.0f32; n];
        let mut tanh_u = vec![0.0f32; n];
        kernels::gelu_forward(self.nodes[a].value.data(), &mut data, &mut tanh_u);
        ensure_finite(&data, "gelu")?;
        let shape = self.nodes[a].value.shape().to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::Gelu { x: a, tanh_u }, needs))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f32) -> Result<NodeId> {
        let (rows, cols) = (self.nodes[x].value.rows(), self.nodes[x].value.cols());
        if self.nodes[gain].value.len() != cols || self.nodes[bias].value.len() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "x cols {cols}, gain {}, bias {}",
                    self.nodes[gain].value.len(),
                    self.nodes[bias].value.len()
                ),
            });
        }
        let xd = self.nodes[x].value.data();
        let g = self.nodes[gain].value.data();
        let b = self.nodes[bias].value.data();
        let mut data = vec![0.0f32; rows * cols];
        let mut stats = vec![0.0f32; rows * 2];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f32>() / cols as f32;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
            let rstd = 1.0 / (var + eps).sqrt();
            stats[r * 2] = mean;
            stats[r * 2 + 1] = rstd;
            let out = &mut data[r * cols..(r + 1) * cols];
            for j in 0..cols {
                out[j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        ensure_finite(&data, "layer_norm")?;
        let shape = self.nodes[x].value.shape().to_vec();
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(Tensor::new(shape, data)?, Op::LayerNorm { x, gain, bias, eps, stats }, needs))
    }

    /// Inverted dropout with a caller-supplied mask of 0 / (1 - p)^-1 values.
    pub fn dropout(&mut self, x: NodeId, mask: Vec<f32>) -> Result<NodeId> {
        if mask.len() != self.nodes[x].value.len() {
            return Err(TensorError::ShapeMismatch {
                op: "dropout",
                detail: format!("mask {} vs input {}", mask.len(), self.nodes[x].value.len()),
            });
        }
        let data: Vec<f32> = self.nodes[x].value.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        ensure_finite(&data, "dropout")?;
        let shape = self.nodes[x].value.shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Dropout { x, mask }, needs))
    }

    /// Multi-head scaled-dot-product self-attention over sentence-major rows.
    ///
    /// `q`, `k`, `v`: [n_sents * seq_len, d]. Keys at rows with `valid ==
    /// false` get attention weight exactly 0. `drop_mask`, when given, is an
    /// inverted-dropout mask over [n_sents, n_heads, seq_len, seq_len]
    /// applied to the attention probabilities.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_heads: usize,
        seq_len: usize,
        valid: &[bool],
        drop_mask: Option<Vec<f32>>,
    ) -> Result<NodeId> {
        let (rows, d) = (self.nodes[q].value.rows(), self.nodes[q].value.cols());
        for (name, node) in [("k", k), ("v", v)] {
            if self.nodes[node].value.rows() != rows || self.nodes[node].value.cols() != d {
                return Err(TensorError::ShapeMismatch {
                    op: "attention",
                    detail: format!("{name} shape differs from q"),
                });
            }
        }
        if n_heads == 0 || d % n_heads != 0 || seq_len == 0 || rows % seq_len != 0 || valid.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                detail: format!("rows {rows}, d {d}, heads {n_heads}, seq_len {seq_len}"),
            });
        }
        let n_sents = rows / seq_len;
        if let Some(m) = &drop_mask {
            if m.len() != n_sents * n_heads * seq_len * seq_len {
                return Err(TensorError::ShapeMismatch {
                    op: "attention",
                    detail: "dropout mask size".into(),
                });
            }
        }
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let qd = self.nodes[q].value.data();
        let kd = self.nodes[k].value.data();
        let vd = self.nodes[v].value.data();
        let mut out = vec![0.0f32; rows * d];
        let mut probs = vec![0.0f32; n_sents * n_heads * seq_len * seq_len];
        // one thread per sentence; each writes only its own chunks
        let per_sentence = |(s, (out_chunk, probs_chunk)): (usize, (&mut [f32], &mut [f32]))| {
            let base_row = s * seq_len;
            let vmask = &valid[base_row..base_row + seq_len];
            for h in 0..n_heads {
                let col0 = h * dh;
                let pbase = h * seq_len * seq_len;
                for i in 0..seq_len {
                    let qrow = &qd[(base_row + i) * d + col0..(base_row + i) * d + col0 + dh];
                    let prow = &mut probs_chunk[pbase + i * seq_len..pbase + (i + 1) * seq_len];
                    for (j, p) in prow.iter_mut().enumerate() {
                        let krow = &kd[(base_row + j) * d + col0..(base_row + j) * d + col0 + dh];
                        *p = scale * kernels::dot(qrow, krow);
                    }
                    kernels::softmax_row_masked(prow, vmask);
                    let orow = &mut out_chunk[i * d + col0..i * d + col0 + dh];
                    for j in 0..seq_len {
                        let mut a = prow[j];
                        if let Some(m) = &drop_mask {
                            a *= m[(s * n_heads) * seq_len * seq_len + pbase + i * seq_len + j];
                        }
                        if a == 0.0 {
                            continue;
                        }
                        let vrow = &vd[(base_row + j) * d + col0..(base_row + j) * d + col0 + dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += a * vv;
                        }
                    }
                }
            }
        };
        {
            use rayon::prelude::*;
            if n_sents >= 4 {
                out.par_chunks_mut(seq_len * d)
                    .zip_eq(probs.par_chunks_mut(n_heads * seq_len * seq_len))
                    .enumerate()
                    .for_each(per_sentence);
            } else {
                out.chunks_mut(seq_len * d)
                    .zip(probs.chunks_mut(n_heads * seq_len * seq_len))
                    .enumerate()
                    .for_each(per_sentence);
            }
        }
        ensure_finite(&out, "attention")?;
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        let value = Tensor::matrix(rows, d, out)?;
        let op = Op::Attention {
            q,
            k,
            v,
            n_heads,
            seq_len,
            valid: valid.to_vec(),
            probs,
            drop_mask,
            scale,
        };
        Ok(self.push(value, op, needs))
    }

    /// Saved attention probabilities of an attention node (post-softmax,
    /// pre-dropout), flattened [n_sents, n_heads, seq_len, seq_len].
    pub fn attention_probs(&self, id: NodeId) -> Option<(&[f32], usize, usize)> {
        match &self.nodes[id].op {
            Op::Attention { probs, n_heads, seq_len, .. } => Some((probs, *n_heads, *seq_len)),
            _ => None,
        }
    }

    /// Mean over rows of -log softmax(row)[target], with max-subtraction.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: Vec<usize>) -> Result<NodeId> {
        let (rows, cols) = (self.nodes[logits].value.rows(), self.nodes[logits].value.cols());
        if targets.len() != rows || rows == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_rows",
                detail: format!("{rows} rows, {} targets", targets.len()),
            });
        }
        if cols < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_rows",
                detail: format!("needs >= 2 classes, got {cols}"),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy_rows",
                detail: format!("target {bad} of {cols} classes"),
            });
        }
        let ld = self.nodes[logits].value.data();
        let mut lse = vec![0.0f32; rows];
        let mut total = 0.0f64;
        for r in 0..rows {
            let row = &ld[r * cols..(r + 1) * cols];
            lse[r] = kernels::log_sum_exp(row);
            total += (lse[r] - row[targets[r]]) as f64;
        }
        let loss = (total / rows as f64) as f32;
        ensure_finite(&[loss], "cross_entropy_rows")?;
        let needs = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropyRows { logits, targets, lse }, needs))
    }

    /// -log softmax(logits)[target] for a single logit vector.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        self.cross_entropy_rows(logits, vec![target])
    }

    /// Scale every row to unit L2 norm. A zero-norm row is a degenerate
    /// input, not a NaN.
    pub fn rows_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = (self.nodes[x].value.rows(), self.nodes[x].value.cols());
        let xd = self.nodes[x].value.data();
        let mut inv_norms = vec![0.0f32; rows];
        let mut data = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let norm = kernels::l2_norm(row);
            if norm == 0.0 {
                return Err(TensorError::DegenerateInput {
                    op: "rows_normalize",
                    detail: format!("row {r} has zero norm"),
                });
            }
            inv_norms[r] = 1.0 / norm;
            for (o, &v) in data[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v * inv_norms[r];
            }
        }
        ensure_finite(&data, "rows_normalize")?;
        let needs = self.needs(x);
        Ok(self.push(Tensor::matrix(rows, cols, data)?, Op::RowsNormalize { x, inv_norms }, needs))
    }

    /// Cosine similarity of two equal-length vectors. Bitwise-identical
    /// inputs return exactly 1.0.
    pub fn cosine_sim(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.len() != vb.len() || va.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_sim",
                detail: format!("lengths {} and {}", va.len(), vb.len()),
            });
        }
        let norm_a = kernels::l2_norm(va.data());
        let norm_b = kernels::l2_norm(vb.data());
        if norm_a == 0.0 || norm_b == 0.0 {
            return Err(TensorError::DegenerateInput {
                op: "cosine_sim",
                detail: "zero-norm input vector".into(),
            });
        }
        let value = if va.data() == vb.data() {
            1.0
        } else {
            kernels::dot(va.data(), vb.data()) / (norm_a * norm_b)
        };
        ensure_finite(&[value], "cosine_sim")?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(value), Op::CosineSim { a, b, norm_a, norm_b }, needs))
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.nodes[a].value.len() as f64;
        let v = (self.nodes[a].value.data().iter().map(|&x| x as f64).sum::<f64>() / n) as f32;
        ensure_finite(&[v], "mean_all")?;
        let needs = self.needs(a);
        Ok(self.push(Tensor::scalar(v), Op::MeanAll(a), needs))
    }

    #[cfg(test)]
    pub(crate) fn broken_scale(&mut self, a: NodeId) -> Result<NodeId> {
        let data: Vec<f32> = self.nodes[a].value.data().iter().map(|x| 2.0 * x).collect();
        let shape = self.nodes[a].value.shape().to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::BrokenScale(a), needs))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.data().iter().map(|&x| x as f64).sum::<f64>() as f32;
        ensure_finite(&[v], "sum_all")?;
        let needs = self.needs(a);
        Ok(self.push(Tensor::scalar(v), Op::SumAll(a), needs))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Node gradients are recomputed from
    /// scratch on each call; parameter gradients accumulate into `store`
    /// (call `store.zero_grads()` between steps to reset).
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        self.backward_nodes(loss)?;
        for id in 0..self.nodes.len() {
            if let Op::Param(pid) = self.nodes[id].op {
                if let Some(g) = &self.grads[id] {
                    if pid.index() >= store.len() {
                        return Err(TensorError::State(format!(
                            "graph bound to a different parameter store (param {} missing)",
                            pid.index()
                        )));
                    }
                    store.accumulate_grad(pid, g);
                }
            }
        }
        Ok(())
    }

    /// Node-gradient sweep without touching any parameter store; used when
    /// only leaf gradients are wanted (gradient checking, probes).
    pub fn backward_nodes(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TensorError::State("backward on an empty graph (no forward recorded)".into()));
        }
        if loss >= self.nodes.len() {
            return Err(TensorError::State(format!("loss node {loss} does not exist")));
        }
        if self.nodes[loss].value.len() != 1 {
            return Err(TensorError::State("backward requires a scalar loss".into()));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let Some(g_out) = self.grads[id].take() else { continue };
            if self.nodes[id].needs_grad {
                backward_node(&self.nodes, &mut self.grads, id, &g_out);
            }
            self.grads[id] = Some(g_out);
        }
        Ok(())
    }

}

fn acc(nodes: &[Node], grads: &mut [Option<Vec<f32>>], input: NodeId, update: impl FnOnce(&mut [f32])) {
    if !nodes[input].needs_grad {
        return;
    }
    let n = nodes[input].value.len();
    let buf = grads[input].get_or_insert_with(|| vec![0.0; n]);
    update(buf);
}

// Free function over split borrows: `nodes` stays shared while gradient
// buffers mutate, so backward reads inputs and saved op data in place.
fn backward_node(nodes: &[Node], grads: &mut [Option<Vec<f32>>], id: NodeId, g: &[f32]) {
    match &nodes[id].op {
        Op::Constant | Op::Var | Op::Param(_) => {}

        &Op::Add(a, b) => {
            acc(nodes, grads, a, |buf| add_into(buf, g, 1.0));
            acc(nodes, grads, b, |buf| add_into(buf, g, 1.0));
        }

        &Op::AddScaled(a, b, c) => {
            acc(nodes, grads, a, |buf| add_into(buf, g, 1.0));
            acc(nodes, grads, b, |buf| add_into(buf, g, c));
        }

        &Op::Scale(a, c) => {
            acc(nodes, grads, a, |buf| add_into(buf, g, c));
        }

        &Op::Mul(a, b) => {
            let bd = nodes[b].value.data();
            acc(nodes, grads, a, |buf| {
                for ((o, &gv), &bv) in buf.iter_mut().zip(g).zip(bd) {
                    *o += gv * bv;
                }
            });
            let ad = nodes[a].value.data();
            acc(nodes, grads, b, |buf| {
                for ((o, &gv), &av) in buf.iter_mut().zip(g).zip(ad) {
                    *o += gv * av;
                }
            });
        }

        &Op::Matmul(a, b) => {
            let (m, k) = (nodes[a].value.rows(), nodes[a].value.cols());
            let n = nodes[b].value.cols();
            let bd = nodes[b].value.data();
            acc(nodes, grads, a, |buf| kernels::matmul_nt_acc(buf, g, bd, m, n, k));
            let ad = nodes[a].value.data();
            acc(nodes, grads, b, |buf| kernels::matmul_tn_acc(buf, ad, g, m, k, n));
        }

        &Op::MatmulNT(a, b) => {
            let (m, k) = (nodes[a].value.rows(), nodes[a].value.cols());
            let n = nodes[b].value.rows();
            let bd = nodes[b].value.data();
            // dA = g [m,n] @ B [n,k]
            acc(nodes, grads, a, |buf| kernels::matmul_acc(buf, g, bd, m, n, k));
            let ad = nodes[a].value.data();
            // dB = g^T [n,m] @ A [m,k]
            acc(nodes, grads, b, |buf| kernels::matmul_tn_acc(buf, g, ad, m, n, k));
        }

        &Op::AddRowsCycled(a, b) => {
            let (ra, ca) = (nodes[a].value.rows(), nodes[a].value.cols());
            let rb = nodes[b].value.rows();
            acc(nodes, grads, a, |buf| add_into(buf, g, 1.0));
            acc(nodes, grads, b, |buf| {
                for r in 0..ra {
                    let dst = &mut buf[(r % rb) * ca..(r % rb + 1) * ca];
                    for (o, &gv) in dst.iter_mut().zip(&g[r * ca..(r + 1) * ca]) {
                        *o += gv;
                    }
                }
            });
        }

        Op::GatherRows { src, ids } => {
            let src = *src;
            let cols = nodes[src].value.cols();
            acc(nodes, grads, src, |buf| {
                for (out_r, &src_r) in ids.iter().enumerate() {
                    let dst = &mut buf[src_r * cols..(src_r + 1) * cols];
                    for (o, &gv) in dst.iter_mut().zip(&g[out_r * cols..(out_r + 1) * cols]) {
                        *o += gv;
                    }
                }
            });
        }

        &Op::TakeRow0 { src, period } => {
            let cols = nodes[src].value.cols();
            let groups = nodes[id].value.rows();
            acc(nodes, grads, src, |buf| {
                for s in 0..groups {
                    let dst = &mut buf[s * period * cols..(s * period + 1) * cols];
                    for (o, &gv) in dst.iter_mut().zip(&g[s * cols..(s + 1) * cols]) {
                        *o += gv;
                    }
                }
            });
        }

        &Op::SpliceRow0 { base, rows, period } => {
            let cols = nodes[base].value.cols();
            let groups = nodes[rows].value.rows();
            acc(nodes, grads, rows, |buf| {
                for s in 0..groups {
                    let src = &g[s * period * cols..(s * period + 1) * cols];
                    for (o, &gv) in buf[s * cols..(s + 1) * cols].iter_mut().zip(src) {
                        *o += gv;
                    }
                }
            });
            acc(nodes, grads, base, |buf| {
                for (r, chunk) in g.chunks(cols).enumerate() {
                    if r % period == 0 {
                        continue;
                    }
                    for (o, &gv) in buf[r * cols..(r + 1) * cols].iter_mut().zip(chunk) {
                        *o += gv;
                    }
                }
            });
        }

        Op::Gelu { x, tanh_u } => {
            let x = *x;
            let xd = nodes[x].value.data();
            acc(nodes, grads, x, |buf| kernels::gelu_backward_acc(buf, g, xd, tanh_u));
        }

        Op::LayerNorm { x, gain, bias, stats, .. } => {
            let (x, gain, bias) = (*x, *gain, *bias);
            let (rows, cols) = (nodes[x].value.rows(), nodes[x].value.cols());
            let xd = nodes[x].value.data();
            let gd = nodes[gain].value.data();
            acc(nodes, grads, x, |buf| {
                for r in 0..rows {
                    let (mean, rstd) = (stats[r * 2], stats[r * 2 + 1]);
                    let xr = &xd[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mut sum_dxhat = 0.0f32;
                    let mut sum_dxhat_xhat = 0.0f32;
                    for j in 0..cols {
                        let xhat = (xr[j] - mean) * rstd;
                        let dxhat = gr[j] * gd[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    let inv_n = 1.0 / cols as f32;
                    let dst = &mut buf[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        let xhat = (xr[j] - mean) * rstd;
                        let dxhat = gr[j] * gd[j];
                        dst[j] += rstd * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
                    }
                }
            });
            acc(nodes, grads, gain, |buf| {
                for r in 0..rows {
                    let (mean, rstd) = (stats[r * 2], stats[r * 2 + 1]);
                    let xr = &xd[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        buf[j] += gr[j] * (xr[j] - mean) * rstd;
                    }
                }
            });
            acc(nodes, grads, bias, |buf| {
                for r in 0..rows {
                    for (o, &gv) in buf.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                        *o += gv;
                    }
                }
            });
        }

        Op::Dropout { x, mask } => {
            let x = *x;
            acc(nodes, grads, x, |buf| {
                for ((o, &gv), &m) in buf.iter_mut().zip(g).zip(mask) {
                    *o += gv * m;
                }
            });
        }

        Op::Attention { .. } => backward_attention(nodes, grads, id, g),

        Op::CrossEntropyRows { logits, targets, lse } => {
            let logits = *logits;
            let (rows, cols) = (nodes[logits].value.rows(), nodes[logits].value.cols());
            let ld = nodes[logits].value.data();
            let gscale = g[0] / rows as f32;
            acc(nodes, grads, logits, |buf| {
                for r in 0..rows {
                    let lrow = &ld[r * cols..(r + 1) * cols];
                    let dst = &mut buf[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        let p = (lrow[j] - lse[r]).exp();
                        let indicator = if j == targets[r] { 1.0 } else { 0.0 };
                        dst[j] += gscale * (p - indicator);
                    }
                }
            });
        }

        Op::RowsNormalize { x, inv_norms } => {
            let x = *x;
            let (rows, cols) = (nodes[x].value.rows(), nodes[x].value.cols());
            let outd = nodes[id].value.data();
            acc(nodes, grads, x, |buf| {
                for r in 0..rows {
                    let xhat = &outd[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let d = kernels::dot(xhat, gr);
                    let dst = &mut buf[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        dst[j] += inv_norms[r] * (gr[j] - xhat[j] * d);
                    }
                }
            });
        }

        &Op::CosineSim { a, b, norm_a, norm_b } => {
            let ad = nodes[a].value.data();
            let bd = nodes[b].value.data();
            let cos = kernels::dot(ad, bd) / (norm_a * norm_b);
            let gv = g[0];
            acc(nodes, grads, a, |buf| {
                for (j, o) in buf.iter_mut().enumerate() {
                    *o += gv * (bd[j] / (norm_a * norm_b) - cos * ad[j] / (norm_a * norm_a));
                }
            });
            acc(nodes, grads, b, |buf| {
                for (j, o) in buf.iter_mut().enumerate() {
                    *o += gv * (ad[j] / (norm_a * norm_b) - cos * bd[j] / (norm_b * norm_b));
                }
            });
        }

        &Op::MeanAll(a) => {
            let inv = 1.0 / nodes[a].value.len() as f32;
            let gv = g[0];
            acc(nodes, grads, a, |buf| {
                for o in buf.iter_mut() {
                    *o += gv * inv;
                }
            });
        }

        &Op::SumAll(a) => {
            let gv = g[0];
            acc(nodes, grads, a, |buf| {
                for o in buf.iter_mut() {
                    *o += gv;
                }
            });
        }

        #[cfg(test)]
        &Op::BrokenScale(a) => {
            acc(nodes, grads, a, |buf| add_into(buf, g, 3.0));
        }
    }
}

fn backward_attention(nodes: &[Node], grads: &mut [Option<Vec<f32>>], id: NodeId, g: &[f32]) {
    let Op::Attention { q, k, v, n_heads, seq_len, probs, drop_mask, scale, .. } = &nodes[id].op
    else {
        unreachable!()
    };
    let (q, k, v) = (*q, *k, *v);
    let (n_heads, seq_len, scale) = (*n_heads, *seq_len, *scale);
    let (rows, d) = (nodes[q].value.rows(), nodes[q].value.cols());
    let dh = d / n_heads;
    let n_sents = rows / seq_len;
    let qd = nodes[q].value.data();
    let kd = nodes[k].value.data();
    let vd = nodes[v].value.data();

    let mut dq = vec![0.0f32; rows * d];
    let mut dk = vec![0.0f32; rows * d];
    let mut dv = vec![0.0f32; rows * d];

    let per_sentence = |(s, ((dq_c, dk_c), dv_c)): (usize, ((&mut [f32], &mut [f32]), &mut [f32]))| {
        let base_row = s * seq_len;
        let mut da = vec![0.0f32; seq_len]; // grad of pre-dropout probs
        let mut ds = vec![0.0f32; seq_len]; // grad of pre-softmax scores
        for h in 0..n_heads {
            let col0 = h * dh;
            let pbase = ((s * n_heads) + h) * seq_len * seq_len;
            for i in 0..seq_len {
                let grow = &g[(base_row + i) * d + col0..(base_row + i) * d + col0 + dh];
                let prow = &probs[pbase + i * seq_len..pbase + (i + 1) * seq_len];
                // dA[j] = dot(g_i, V_j); dV_j += A[i][j] * g_i
                for j in 0..seq_len {
                    let m = drop_mask
                        .as_ref()
                        .map(|m| m[pbase + i * seq_len + j])
                        .unwrap_or(1.0);
                    let a = prow[j] * m;
                    let vrow = &vd[(base_row + j) * d + col0..(base_row + j) * d + col0 + dh];
                    da[j] = kernels::dot(grow, vrow) * m; // includes dropout VJP
                    if a != 0.0 {
                        let dvrow = &mut dv_c[j * d + col0..j * d + col0 + dh];
                        for (o, &gv) in dvrow.iter_mut().zip(grow) {
                            *o += a * gv;
                        }
                    }
                }
                // softmax VJP over valid columns (probs are 0 elsewhere)
                let t = kernels::dot(&da, prow);
                for j in 0..seq_len {
                    ds[j] = prow[j] * (da[j] - t);
                }
                // dQ_i += scale * sum_j dS[j] K_j ; dK_j += scale * dS[j] Q_i
                let qrow = &qd[(base_row + i) * d + col0..(base_row + i) * d + col0 + dh];
                let dqrow = &mut dq_c[i * d + col0..i * d + col0 + dh];
                for j in 0..seq_len {
                    if ds[j] == 0.0 {
                        continue;
                    }
                    let c = scale * ds[j];
                    let krow = &kd[(base_row + j) * d + col0..(base_row + j) * d + col0 + dh];
                    for (o, &kv) in dqrow.iter_mut().zip(krow) {
                        *o += c * kv;
                    }
                    let dkrow = &mut dk_c[j * d + col0..j * d + col0 + dh];
                    for (o, &qv) in dkrow.iter_mut().zip(qrow) {
                        *o += c * qv;
                    }
                }
            }
        }
    };
    {
        use rayon::prelude::*;
        let chunk = seq_len * d;
        if n_sents >= 4 {
            dq.par_chunks_mut(chunk)
                .zip_eq(dk.par_chunks_mut(chunk))
                .zip_eq(dv.par_chunks_mut(chunk))
                .enumerate()
                .for_each(per_sentence);
        } else {
            dq.chunks_mut(chunk)
                .zip(dk.chunks_mut(chunk))
                .zip(dv.chunks_mut(chunk))
                .enumerate()
                .for_each(per_sentence);
        }
    }
    acc(nodes, grads, q, |buf| add_into(buf, &dq, 1.0));
    acc(nodes, grads, k, |buf| add_into(buf, &dk, 1.0));
    acc(nodes, grads, v, |buf| add_into(buf, &dv, 1.0));
}

/// Activation buffers run hundreds of KB; above glibc's default mmap
/// threshold every alloc/free pair is an mmap + page-fault + munmap cycle
/// that dwarfs the math on them. Raising the threshold once keeps those
/// blocks on the free list.
fn tune_allocator() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
    });
}

fn add_into(dst: &mut [f32], src: &[f32], c: f32) {
    debug_assert_eq!(dst.len(), src.len());
    for (o, &s) in dst.iter_mut().zip(src) {
        *o += c * s;
    }
}

// ── f64 tape replay ─────────────────────────────────────────────────
//
// Re-executes the recorded forward in f64, substituting `overrides` for
// leaf values. This is the evaluation path of the finite-difference
// gradient checker: the function under test is the recorded tape (with its
// dropout masks and gather indices frozen in), evaluated precisely enough
// that central differences resolve f32-scale gradients.

impl Graph {
    pub(crate) fn replay_f64(
        &self,
        overrides: &std::collections::HashMap<NodeId, Vec<f64>>,
        loss: NodeId,
    ) -> Result<f64> {
        Ok(self.replay_values_f64(overrides, loss)?[loss][0])
    }

    pub(crate) fn replay_values_f64(
        &self,
        overrides: &std::collections::HashMap<NodeId, Vec<f64>>,
        upto: NodeId,
    ) -> Result<Vec<Vec<f64>>> {
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(upto + 1);
        for id in 0..=upto {
            let v = self.replay_node_f64(id, &vals, overrides)?;
            vals.push(v);
        }
        Ok(vals)
    }

    /// f64 analytic gradients: an f64 forward replay followed by a reverse
    /// sweep whose rules mirror the f32 backward exactly. This is the
    /// analytic side of gradient checking — 32-bit backward noise on
    /// near-zero coordinates would otherwise drown the comparison.
    pub(crate) fn grads_f64(&self, loss: NodeId) -> Result<Vec<Option<Vec<f64>>>> {
        if loss >= self.nodes.len() {
            return Err(TensorError::State(format!("loss node {loss} does not exist")));
        }
        if self.nodes[loss].value.len() != 1 {
            return Err(TensorError::State("backward requires a scalar loss".into()));
        }
        let overrides = std::collections::HashMap::new();
        let vals = self.replay_values_f64(&overrides, loss)?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss + 1];
        grads[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            let Some(g_out) = grads[id].take() else { continue };
            if self.nodes[id].needs_grad {
                backward_node_f64(&self.nodes, &vals, &mut grads, id, &g_out);
            }
            grads[id] = Some(g_out);
        }
        Ok(grads)
    }

    fn replay_node_f64(
        &self,
        id: NodeId,
        vals: &[Vec<f64>],
        overrides: &std::collections::HashMap<NodeId, Vec<f64>>,
    ) -> Result<Vec<f64>> {
        let node = &self.nodes[id];
        let out = match &node.op {
            Op::Constant | Op::Var | Op::Param(_) => match overrides.get(&id) {
                Some(v) => v.clone(),
                None => node.value.data().iter().map(|&x| x as f64).collect(),
            },
            &Op::Add(a, b) => vals[a].iter().zip(&vals[b]).map(|(x, y)| x + y).collect(),
            &Op::AddScaled(a, b, c) => {
                let c = c as f64;
                vals[a].iter().zip(&vals[b]).map(|(x, y)| x + c * y).collect()
            }
            &Op::Scale(a, c) => vals[a].iter().map(|x| x * c as f64).collect(),
            &Op::Mul(a, b) => vals[a].iter().zip(&vals[b]).map(|(x, y)| x * y).collect(),
            &Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                let n = self.nodes[b].value.cols();
                let mut out = vec![0.0f64; m * n];
                for i in 0..m {
                    for l in 0..k {
                        let av = vals[a][i * k + l];
                        for j in 0..n {
                            out[i * n + j] += av * vals[b][l * n + j];
                        }
                    }
                }
                out
            }
            &Op::MatmulNT(a, b) => {
                let (m, k) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                let n = self.nodes[b].value.rows();
                let mut out = vec![0.0f64; m * n];
                for i in 0..m {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for l in 0..k {
                            acc += vals[a][i * k + l] * vals[b][j * k + l];
                        }
                        out[i * n + j] = acc;
                    }
                }
                out
            }
            &Op::AddRowsCycled(a, b) => {
                let (ra, ca) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                let rb = self.nodes[b].value.rows();
                let mut out = vals[a].clone();
                for r in 0..ra {
                    for j in 0..ca {
                        out[r * ca + j] += vals[b][(r % rb) * ca + j];
                    }
                }
                out
            }
            Op::GatherRows { src, ids } => {
                let cols = self.nodes[*src].value.cols();
                let mut out = Vec::with_capacity(ids.len() * cols);
                for &i in ids {
                    out.extend_from_slice(&vals[*src][i * cols..(i + 1) * cols]);
                }
                out
            }
            &Op::TakeRow0 { src, period } => {
                let cols = self.nodes[src].value.cols();
                let groups = self.nodes[src].value.rows() / period;
                let mut out = Vec::with_capacity(groups * cols);
                for s in 0..groups {
                    let r = s * period;
                    out.extend_from_slice(&vals[src][r * cols..(r + 1) * cols]);
                }
                out
            }
            &Op::SpliceRow0 { base, rows, period } => {
                let cols = self.nodes[base].value.cols();
                let groups = self.nodes[rows].value.rows();
                let mut out = vals[base].clone();
                for s in 0..groups {
                    let dst = s * period * cols;
                    out[dst..dst + cols].copy_from_slice(&vals[rows][s * cols..(s + 1) * cols]);
                }
                out
            }
            Op::Gelu { x, .. } => vals[*x].iter().map(|&x| gelu_f64(x)).collect(),
            Op::LayerNorm { x, gain, bias, eps, .. } => {
                let (rows, cols) = (self.nodes[*x].value.rows(), self.nodes[*x].value.cols());
                let eps = *eps as f64;
                let mut out = vec![0.0f64; rows * cols];
                for r in 0..rows {
                    let row = &vals[*x][r * cols..(r + 1) * cols];
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    for j in 0..cols {
                        out[r * cols + j] = (row[j] - mean) * rstd * vals[*gain][j] + vals[*bias][j];
                    }
                }
                out
            }
            Op::Dropout { x, mask } => vals[*x].iter().zip(mask).map(|(v, &m)| v * m as f64).collect(),
            Op::Attention { q, k, v, n_heads, seq_len, valid, drop_mask, scale, .. } => {
                let (rows, d) = (self.nodes[*q].value.rows(), self.nodes[*q].value.cols());
                let dh = d / n_heads;
                let n_sents = rows / seq_len;
                let scale = *scale as f64;
                let p = *seq_len;
                let mut out = vec![0.0f64; rows * d];
                let mut prow = vec![0.0f64; p];
                for s in 0..n_sents {
                    let base_row = s * p;
                    let vmask = &valid[base_row..base_row + p];
                    for h in 0..*n_heads {
                        let col0 = h * dh;
                        let pbase = ((s * n_heads) + h) * p * p;
                        for i in 0..p {
                            let qrow = &vals[*q][(base_row + i) * d + col0..(base_row + i) * d + col0 + dh];
                            let mut max = f64::NEG_INFINITY;
                            for j in 0..p {
                                let krow =
                                    &vals[*k][(base_row + j) * d + col0..(base_row + j) * d + col0 + dh];
                                prow[j] = scale * qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                                if vmask[j] && prow[j] > max {
                                    max = prow[j];
                                }
                            }
                            let mut sum = 0.0;
                            for j in 0..p {
                                if vmask[j] {
                                    prow[j] = (prow[j] - max).exp();
                                    sum += prow[j];
                                } else {
                                    prow[j] = 0.0;
                                }
                            }
                            for j in 0..p {
                                let mut a = prow[j] / sum;
                                if let Some(m) = drop_mask {
                                    a *= m[pbase + i * p + j] as f64;
                                }
                                if a == 0.0 {
                                    continue;
                                }
                                let vrow =
                                    &vals[*v][(base_row + j) * d + col0..(base_row + j) * d + col0 + dh];
                                let orow =
                                    &mut out[(base_row + i) * d + col0..(base_row + i) * d + col0 + dh];
                                for (o, &vv) in orow.iter_mut().zip(vrow) {
                                    *o += a * vv;
                                }
                            }
                        }
                    }
                }
                out
            }
            Op::CrossEntropyRows { logits, targets, .. } => {
                let (rows, cols) = (self.nodes[*logits].value.rows(), self.nodes[*logits].value.cols());
                let mut total = 0.0f64;
                for r in 0..rows {
                    let row = &vals[*logits][r * cols..(r + 1) * cols];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                    total += max + sum.ln() - row[targets[r]];
                }
                vec![total / rows as f64]
            }
            Op::RowsNormalize { x, .. } => {
                let (rows, cols) = (self.nodes[*x].value.rows(), self.nodes[*x].value.cols());
                let mut out = vec![0.0f64; rows * cols];
                for r in 0..rows {
                    let row = &vals[*x][r * cols..(r + 1) * cols];
                    let norm = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        return Err(TensorError::DegenerateInput {
                            op: "rows_normalize(f64)",
                            detail: format!("row {r}"),
                        });
                    }
                    for j in 0..cols {
                        out[r * cols + j] = row[j] / norm;
                    }
                }
                out
            }
            &Op::CosineSim { a, b, .. } => {
                let dot: f64 = vals[a].iter().zip(&vals[b]).map(|(x, y)| x * y).sum();
                let na = vals[a].iter().map(|&v| v * v).sum::<f64>().sqrt();
                let nb = vals[b].iter().map(|&v| v * v).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    return Err(TensorError::DegenerateInput {
                        op: "cosine_sim(f64)",
                        detail: "zero norm".into(),
                    });
                }
                vec![dot / (na * nb)]
            }
            &Op::MeanAll(a) => vec![vals[a].iter().sum::<f64>() / vals[a].len() as f64],
            &Op::SumAll(a) => vec![vals[a].iter().sum::<f64>()],
            #[cfg(test)]
            &Op::BrokenScale(a) => vals[a].iter().map(|x| 2.0 * x).collect(),
        };
        Ok(out)
    }
}

fn gelu_f64(x: f64) -> f64 {
    // Same tanh approximation and constants as the f32 path.
    let c = 0.797_884_6f32 as f64;
    let a = 0.044_715f32 as f64;
    let u = c * (x + a * x * x * x);
    0.5 * x * (1.0 + kernels::fast_tanh_f64(u))
}


// ── f64 backward mirror ─────────────────────────────────────────────
//
// Rule-for-rule transcription of `backward_node` over the f64 replay
// values. Saved forward quantities (layer-norm stats, log-sum-exps,
// attention probabilities, norms) are recomputed in f64; recorded masks,
// indices and targets are reused as-is. A divergence between this and the
// f32 rules is caught by the precision-consistency tests.

fn acc64(nodes: &[Node], grads: &mut [Option<Vec<f64>>], input: NodeId, update: impl FnOnce(&mut [f64])) {
    if !nodes[input].needs_grad {
        return;
    }
    let n = nodes[input].value.len();
    let buf = grads[input].get_or_insert_with(|| vec![0.0; n]);
    update(buf);
}

fn matmul_acc_f64(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[l * n + j];
            }
        }
    }
}

fn matmul_nt_acc_f64(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[i * k + l] * b[j * k + l];
            }
            out[i * n + j] += acc;
        }
    }
}

fn matmul_tn_acc_f64(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for l in 0..k {
        for i in 0..m {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[l * n + j] += av * b[i * n + j];
            }
        }
    }
}

fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gelu_deriv_f64(x: f64) -> f64 {
    let c = 0.797_884_6f32 as f64;
    let a = 0.044_715f32 as f64;
    let u = c * (x + a * x * x * x);
    let t = kernels::fast_tanh_f64(u);
    let du = c * (1.0 + 3.0 * a * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn backward_node_f64(nodes: &[Node], vals: &[Vec<f64>], grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
    match &nodes[id].op {
        Op::Constant | Op::Var | Op::Param(_) => {}

        &Op::Add(a, b) => {
            acc64(nodes, grads, a, |buf| buf.iter_mut().zip(g).for_each(|(o, &s)| *o += s));
            acc64(nodes, grads, b, |buf| buf.iter_mut().zip(g).for_each(|(o, &s)| *o += s));
        }

        &Op::AddScaled(a, b, c) => {
            let c = c as f64;
            acc64(nodes, grads, a, |buf| buf.iter_mut().zip(g).for_each(|(o, &s)| *o += s));
            acc64(nodes, grads, b, |buf| buf.iter_mut().zip(g).for_each(|(o, &s)| *o += c * s));
        }

        &Op::Scale(a, c) => {
            let c = c as f64;
            acc64(nodes, grads, a, |buf| buf.iter_mut().zip(g).for_each(|(o, &s)| *o += c * s));
        }

        &Op::Mul(a, b) => {
            acc64(nodes, grads, a, |buf| {
                for ((o, &gv), &bv) in buf.iter_mut().zip(g).zip(&vals[b]) {
                    *o += gv * bv;
                }
            });
            acc64(nodes, grads, b, |buf| {
                for ((o, &gv), &av) in buf.iter_mut().zip(g).zip(&vals[a]) {
                    *o += gv * av;
                }
            });
        }

        &Op::Matmul(a, b) => {
            let (m, k) = (nodes[a].value.rows(), nodes[a].value.cols());
            let n = nodes[b].value.cols();
            acc64(nodes, grads, a, |buf| matmul_nt_acc_f64(buf, g, &vals[b], m, n, k));
            acc64(nodes, grads, b, |buf| matmul_tn_acc_f64(buf, &vals[a], g, m, k, n));
        }

        &Op::MatmulNT(a, b) => {
            let (m, k) = (nodes[a].value.rows(), nodes[a].value.cols());
            let n = nodes[b].value.rows();
            acc64(nodes, grads, a, |buf| matmul_acc_f64(buf, g, &vals[b], m, n, k));
            acc64(nodes, grads, b, |buf| matmul_tn_acc_f64(buf, g, &vals[a], m, n, k));
        }

        &Op::AddRowsCycled(a, b) => {
            let (ra, ca) = (nodes[a].value.rows(), nodes[a].value.cols());
            let rb = nodes[b].value.rows();
            acc64(nodes, grads, a, |buf| buf.iter_mut().zip(g).for_each(|(o, &s)| *o += s));
            acc64(nodes, grads, b, |buf| {
                for r in 0..ra {
                    let dst = &mut buf[(r % rb) * ca..(r % rb + 1) * ca];
                    for (o, &gv) in dst.iter_mut().zip(&g[r * ca..(r + 1) * ca]) {
                        *o += gv;
                    }
                }
            });
        }

        Op::GatherRows { src, ids } => {
            let src = *src;
            let cols = nodes[src].value.cols();
            acc64(nodes, grads, src, |buf| {
                for (out_r, &src_r) in ids.iter().enumerate() {
                    let dst = &mut buf[src_r * cols..(src_r + 1) * cols];
                    for (o, &gv) in dst.iter_mut().zip(&g[out_r * cols..(out_r + 1) * cols]) {
                        *o += gv;
                    }
                }
            });
        }

        &Op::TakeRow0 { src, period } => {
            let cols = nodes[src].value.cols();
            let groups = nodes[id].value.rows();
            acc64(nodes, grads, src, |buf| {
                for s in 0..groups {
                    let dst = &mut buf[s * period * cols..(s * period + 1) * cols];
                    for (o, &gv) in dst.iter_mut().zip(&g[s * cols..(s + 1) * cols]) {
                        *o += gv;
                    }
                }
            });
        }

        &Op::SpliceRow0 { base, rows, period } => {
            let cols = nodes[base].value.cols();
            let groups = nodes[rows].value.rows();
            acc64(nodes, grads, rows, |buf| {
                for s in 0..groups {
                    let src = &g[s * period * cols..(s * period + 1) * cols];
                    for (o, &gv) in buf[s * cols..(s + 1) * cols].iter_mut().zip(src) {
                        *o += gv;
                    }
                }
            });
            acc64(nodes, grads, base, |buf| {
                for (r, chunk) in g.chunks(cols).enumerate() {
                    if r % period == 0 {
                        continue;
                    }
                    for (o, &gv) in buf[r * cols..(r + 1) * cols].iter_mut().zip(chunk) {
                        *o += gv;
                    }
                }
            });
        }

        Op::Gelu { x, .. } => {
            let x = *x;
            acc64(nodes, grads, x, |buf| {
                for ((o, &gv), &xv) in buf.iter_mut().zip(g).zip(&vals[x]) {
                    *o += gv * gelu_deriv_f64(xv);
                }
            });
        }

        Op::LayerNorm { x, gain, bias, eps, .. } => {
            let (x, gain, bias) = (*x, *gain, *bias);
            let (rows, cols) = (nodes[x].value.rows(), nodes[x].value.cols());
            let eps = *eps as f64;
            // recompute the per-row stats at f64 precision
            let stats: Vec<(f64, f64)> = (0..rows)
                .map(|r| {
                    let row = &vals[x][r * cols..(r + 1) * cols];
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                    (mean, 1.0 / (var + eps).sqrt())
                })
                .collect();
            acc64(nodes, grads, x, |buf| {
                for r in 0..rows {
                    let (mean, rstd) = stats[r];
                    let xr = &vals[x][r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..cols {
                        let xhat = (xr[j] - mean) * rstd;
                        let dxhat = gr[j] * vals[gain][j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    let inv_n = 1.0 / cols as f64;
                    let dst = &mut buf[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        let xhat = (xr[j] - mean) * rstd;
                        let dxhat = gr[j] * vals[gain][j];
                        dst[j] += rstd * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
                    }
                }
            });
            acc64(nodes, grads, gain, |buf| {
                for r in 0..rows {
                    let (mean, rstd) = stats[r];
                    let xr = &vals[x][r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        buf[j] += gr[j] * (xr[j] - mean) * rstd;
                    }
                }
            });
            acc64(nodes, grads, bias, |buf| {
                for r in 0..rows {
                    for (o, &gv) in buf.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                        *o += gv;
                    }
                }
            });
        }

        Op::Dropout { x, mask } => {
            let x = *x;
            acc64(nodes, grads, x, |buf| {
                for ((o, &gv), &m) in buf.iter_mut().zip(g).zip(mask) {
                    *o += gv * m as f64;
                }
            });
        }

        Op::Attention { q, k, v, n_heads, seq_len, valid, drop_mask, scale, .. } => {
            let (q, k, v) = (*q, *k, *v);
            let (n_heads, seq_len) = (*n_heads, *seq_len);
            let scale = *scale as f64;
            let (rows, d) = (nodes[q].value.rows(), nodes[q].value.cols());
            let dh = d / n_heads;
            let n_sents = rows / seq_len;
            let p = seq_len;
            // recompute probabilities in f64
            let mut probs = vec![0.0f64; n_sents * n_heads * p * p];
            for s in 0..n_sents {
                let base_row = s * p;
                let vmask = &valid[base_row..base_row + p];
                for h in 0..n_heads {
                    let col0 = h * dh;
                    let pbase = ((s * n_heads) + h) * p * p;
                    for i in 0..p {
                        let qrow = &vals[q][(base_row + i) * d + col0..(base_row + i) * d + col0 + dh];
                        let prow = &mut probs[pbase + i * p..pbase + (i + 1) * p];
                        let mut max = f64::NEG_INFINITY;
                        for j in 0..p {
                            let krow = &vals[k][(base_row + j) * d + col0..(base_row + j) * d + col0 + dh];
                            prow[j] = scale * dot_f64(qrow, krow);
                            if vmask[j] && prow[j] > max {
                                max = prow[j];
                            }
                        }
                        let mut sum = 0.0;
                        for j in 0..p {
                            if vmask[j] {
                                prow[j] = (prow[j] - max).exp();
                                sum += prow[j];
                            } else {
                                prow[j] = 0.0;
                            }
                        }
                        for j in 0..p {
                            prow[j] /= sum;
                        }
                    }
                }
            }
            let mut dq = vec![0.0f64; rows * d];
            let mut dk = vec![0.0f64; rows * d];
            let mut dv = vec![0.0f64; rows * d];
            let mut da = vec![0.0f64; p];
            let mut ds = vec![0.0f64; p];
            for s in 0..n_sents {
                let base_row = s * p;
                for h in 0..n_heads {
                    let col0 = h * dh;
                    let pbase = ((s * n_heads) + h) * p * p;
                    for i in 0..p {
                        let grow = &g[(base_row + i) * d + col0..(base_row + i) * d + col0 + dh];
                        let prow = &probs[pbase + i * p..pbase + (i + 1) * p];
                        for j in 0..p {
                            let m = drop_mask
                                .as_ref()
                                .map(|m| m[pbase + i * p + j] as f64)
                                .unwrap_or(1.0);
                            let a = prow[j] * m;
                            let vrow =
                                &vals[v][(base_row + j) * d + col0..(base_row + j) * d + col0 + dh];
                            da[j] = dot_f64(grow, vrow) * m;
                            if a != 0.0 {
                                let dvrow =
                                    &mut dv[(base_row + j) * d + col0..(base_row + j) * d + col0 + dh];
                                for (o, &gv) in dvrow.iter_mut().zip(grow) {
                                    *o += a * gv;
                                }
                            }
                        }
                        let t = dot_f64(&da, prow);
                        for j in 0..p {
                            ds[j] = prow[j] * (da[j] - t);
                        }
                        let qrow = &vals[q][(base_row + i) * d + col0..(base_row + i) * d + col0 + dh];
                        let dqrow = &mut dq[(base_row + i) * d + col0..(base_row + i) * d + col0 + dh];
                        for j in 0..p {
                            if ds[j] == 0.0 {
                                continue;
                            }
                            let c = scale * ds[j];
                            let krow =
                                &vals[k][(base_row + j) * d + col0..(base_row + j) * d + col0 + dh];
                            for (o, &kv) in dqrow.iter_mut().zip(krow) {
                                *o += c * kv;
                            }
                            let dkrow =
                                &mut dk[(base_row + j) * d + col0..(base_row + j) * d + col0 + dh];
                            for (o, &qv) in dkrow.iter_mut().zip(qrow) {
                                *o += c * qv;
                            }
                        }
                    }
                }
            }
            acc64(nodes, grads, q, |buf| buf.iter_mut().zip(&dq).for_each(|(o, &s)| *o += s));
            acc64(nodes, grads, k, |buf| buf.iter_mut().zip(&dk).for_each(|(o, &s)| *o += s));
            acc64(nodes, grads, v, |buf| buf.iter_mut().zip(&dv).for_each(|(o, &s)| *o += s));
        }

        Op::CrossEntropyRows { logits, targets, .. } => {
            let logits = *logits;
            let (rows, cols) = (nodes[logits].value.rows(), nodes[logits].value.cols());
            let gscale = g[0] / rows as f64;
            let lse: Vec<f64> = (0..rows)
                .map(|r| {
                    let row = &vals[logits][r * cols..(r + 1) * cols];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
                })
                .collect();
            acc64(nodes, grads, logits, |buf| {
                for r in 0..rows {
                    let lrow = &vals[logits][r * cols..(r + 1) * cols];
                    let dst = &mut buf[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        let p = (lrow[j] - lse[r]).exp();
                        let indicator = if j == targets[r] { 1.0 } else { 0.0 };
                        dst[j] += gscale * (p - indicator);
                    }
                }
            });
        }

        Op::RowsNormalize { x, .. } => {
            let x = *x;
            let (rows, cols) = (nodes[x].value.rows(), nodes[x].value.cols());
            acc64(nodes, grads, x, |buf| {
                for r in 0..rows {
                    let xr = &vals[x][r * cols..(r + 1) * cols];
                    let norm = xr.iter().map(|&v| v * v).sum::<f64>().sqrt();
                    let inv = 1.0 / norm;
                    let xhat: Vec<f64> = xr.iter().map(|&v| v * inv).collect();
                    let gr = &g[r * cols..(r + 1) * cols];
                    let d = dot_f64(&xhat, gr);
                    let dst = &mut buf[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        dst[j] += inv * (gr[j] - xhat[j] * d);
                    }
                }
            });
        }

        &Op::CosineSim { a, b, .. } => {
            let na = vals[a].iter().map(|&v| v * v).sum::<f64>().sqrt();
            let nb = vals[b].iter().map(|&v| v * v).sum::<f64>().sqrt();
            let cos = dot_f64(&vals[a], &vals[b]) / (na * nb);
            let gv = g[0];
            acc64(nodes, grads, a, |buf| {
                for (j, o) in buf.iter_mut().enumerate() {
                    *o += gv * (vals[b][j] / (na * nb) - cos * vals[a][j] / (na * na));
                }
            });
            acc64(nodes, grads, b, |buf| {
                for (j, o) in buf.iter_mut().enumerate() {
                    *o += gv * (vals[a][j] / (na * nb) - cos * vals[b][j] / (nb * nb));
                }
            });
        }

        &Op::MeanAll(a) => {
            let inv = 1.0 / nodes[a].value.len() as f64;
            let gv = g[0];
            acc64(nodes, grads, a, |buf| buf.iter_mut().for_each(|o| *o += gv * inv));
        }

        &Op::SumAll(a) => {
            let gv = g[0];
            acc64(nodes, grads, a, |buf| buf.iter_mut().for_each(|o| *o += gv));
        }

        #[cfg(test)]
        &Op::BrokenScale(a) => {
            // wrong on purpose: forward doubles, this claims a factor 3
            let gv: Vec<f64> = g.iter().map(|&v| 3.0 * v).collect();
            acc64(nodes, grads, a, |buf| buf.iter_mut().zip(&gv).for_each(|(o, &s)| *o += s));
        }
    }
}
