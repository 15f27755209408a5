//! Tape-based reverse-mode autodiff over [`Tensor`].
//!
//! A [`Graph`] records every forward operation as a node on a flat tape.
//! Construction is eager: each method computes the output value immediately
//! and returns a [`Var`] handle. [`Graph::backward`] then walks the tape in
//! reverse, accumulating gradients for every node and routing parameter
//! gradients back to the caller by slot index.
//!
//! The op set is exactly what a post-norm encoder-decoder transformer needs:
//! affine maps, batched matmul, head split/merge, softmax and log-softmax
//! over the last axis, layer norm, embedding lookup, inverted dropout, and a
//! label-smoothed NLL head that reduces to a scalar. Generic over [`Scalar`]
//! so the same tape runs at f32 for training and f64 for gradient checks.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on the tape. Only valid for the graph that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S: Scalar> {
    /// Leaf that routes its gradient to a parameter slot.
    Param {
        slot: usize,
    },
    /// Leaf with no gradient of its own (inputs, masks, position tables).
    Constant,
    Add(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Bmm {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
    },
    Embed {
        table: Var,
        ids: Vec<u32>,
    },
    Dropout {
        x: Var,
        mask: Vec<bool>,
        keep: f64,
    },
    SmoothedNll {
        log_probs: Var,
        targets: Vec<u32>,
        active: Vec<bool>,
        epsilon: f64,
    },
    Reshape {
        x: Var,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Gradients for every tape node, produced by [`Graph::backward`].
pub struct Gradients<S: Scalar = f32> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to one node, if any flowed there.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Collect parameter gradients by slot, summing if a slot was used by
    /// more than one leaf.
    pub fn param_grads(&self, graph: &Graph<S>) -> Vec<(usize, Tensor<S>)> {
        let mut out: Vec<(usize, Tensor<S>)> = Vec::new();
        for (i, node) in graph.nodes.iter().enumerate() {
            let Op::Param { slot } = node.op else {
                continue;
            };
            let Some(g) = &self.grads[i] else { continue };
            if let Some((_, acc)) = out.iter_mut().find(|(s, _)| *s == slot) {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            } else {
                out.push((slot, g.clone()));
            }
        }
        out
    }
}

/// Eager forward tape. See the module docs for the op set.
pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<S: Scalar> Graph<S> {
    /// Evaluation-mode tape: dropout is the identity.
    pub fn eval() -> Self {
        Graph {
            nodes: Vec::new(),
            dropout_rng: None,
        }
    }

    /// Training-mode tape: dropout masks are drawn from the given stream.
    pub fn train(dropout_rng: ChaCha8Rng) -> Self {
        Graph {
            nodes: Vec::new(),
            dropout_rng: Some(dropout_rng),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Leaf constant. The only node kind allowed to hold non-finite entries
    /// (attention masks use -inf).
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Constant)
    }

    /// Leaf whose gradient is reported under `slot` by
    /// [`Gradients::param_grads`].
    pub fn param(&mut self, value: Tensor<S>, slot: usize) -> Var {
        self.push(value, Op::Param { slot })
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::InvalidInput(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.maximum(S::ZERO));
        self.push(value, Op::Relu(x))
    }

    /// Affine map `y = x W^T + b` with `x: (n, in)`, `w: (out, in)`,
    /// `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || ws[0] != bs[0] {
            return Err(Error::InvalidInput(format!(
                "linear shape mismatch: x {xs:?}, w {ws:?}, b {bs:?}"
            )));
        }
        let (n, d_in, d_out) = (xs[0], xs[1], ws[0]);
        let mut out = vec![S::ZERO; n * d_out];
        gemm(
            self.value(x).data(),
            (n, d_in),
            false,
            self.value(w).data(),
            (d_out, d_in),
            true,
            &mut out,
        );
        let bias = self.value(b).data();
        for row in out.chunks_mut(d_out) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let value = Tensor::new(vec![n, d_out], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    /// Batched matmul over rank-3 tensors: `a: (n, m, k)` times
    /// `b: (n, k, p)`, or `b: (n, p, k)` when `transpose_b`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ashape, bshape) = (
            self.value(a).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        let ok = ashape.len() == 3
            && bshape.len() == 3
            && ashape[0] == bshape[0]
            && if transpose_b {
                ashape[2] == bshape[2]
            } else {
                ashape[2] == bshape[1]
            };
        if !ok {
            return Err(Error::InvalidInput(format!(
                "bmm shape mismatch: a {ashape:?}, b {bshape:?}, transpose_b {transpose_b}"
            )));
        }
        let (n, m, k) = (ashape[0], ashape[1], ashape[2]);
        let p = if transpose_b { bshape[1] } else { bshape[2] };
        let mut out = vec![S::ZERO; n * m * p];
        for i in 0..n {
            gemm(
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                (m, k),
                false,
                &self.value(b).data()[i * bshape[1] * bshape[2]..(i + 1) * bshape[1] * bshape[2]],
                (bshape[1], bshape[2]),
                transpose_b,
                &mut out[i * m * p..(i + 1) * m * p],
            );
        }
        let value = Tensor::new(vec![n, m, p], out)?;
        Ok(self.push(value, Op::Bmm { a, b, transpose_b }))
    }

    /// Reinterpret `(batch*seq, heads*dh)` as per-head sequences
    /// `(batch*heads, seq, dh)`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let xs = self.value(x).shape();
        if xs.len() != 2 || xs[0] != batch * seq || heads == 0 || xs[1] % heads != 0 {
            return Err(Error::InvalidInput(format!(
                "split_heads shape mismatch: x {xs:?}, batch {batch}, seq {seq}, heads {heads}"
            )));
        }
        let d = xs[1];
        let dh = d / heads;
        let src = self.value(x).data();
        let mut out = vec![S::ZERO; src.len()];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..seq {
                    let from = (b * seq + t) * d + h * dh;
                    let to = ((b * heads + h) * seq + t) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let value = Tensor::new(vec![batch * heads, seq, dh], out)?;
        Ok(self.push(
            value,
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            },
        ))
    }

    /// Inverse of [`Graph::split_heads`]: `(batch*heads, seq, dh)` back to
    /// `(batch*seq, heads*dh)`.
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let xs = self.value(x).shape();
        if xs.len() != 3 || xs[0] != batch * heads || xs[1] != seq {
            return Err(Error::InvalidInput(format!(
                "merge_heads shape mismatch: x {xs:?}, batch {batch}, seq {seq}, heads {heads}"
            )));
        }
        let dh = xs[2];
        let d = heads * dh;
        let src = self.value(x).data();
        let mut out = vec![S::ZERO; src.len()];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..seq {
                    let from = ((b * heads + h) * seq + t) * dh;
                    let to = (b * seq + t) * d + h * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let value = Tensor::new(vec![batch * seq, d], out)?;
        Ok(self.push(
            value,
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            },
        ))
    }

    /// Softmax over the last axis. Accepts -inf entries (masked positions get
    /// probability zero) but rejects rows that are masked out entirely. NaN
    /// or +inf cannot come from masking, so those surface as divergence.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let width = last_axis_width(self.value(x))?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().cloned().fold(row[0], |a, b| a.maximum(b));
            if !max.is_finite() {
                if row.iter().any(|v| !v.is_finite() && !(*v < S::ZERO)) {
                    return Err(Error::Divergence(
                        "softmax input went non-finite".to_string(),
                    ));
                }
                return Err(Error::InvalidInput(
                    "softmax row has no finite entry (fully masked)".to_string(),
                ));
            }
            let mut sum = S::ZERO;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax(x)))
    }

    /// Log-softmax over the last axis. The input here is logits, which no op
    /// masks, so a non-finite entry means the run blew up and is reported as
    /// divergence.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let width = last_axis_width(self.value(x))?;
        if !self.value(x).all_finite() {
            return Err(Error::Divergence(
                "log_softmax input went non-finite".to_string(),
            ));
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().cloned().fold(row[0], |a, b| a.maximum(b));
            let mut sum = S::ZERO;
            for v in row.iter() {
                sum += (*v - max).exp();
            }
            let log_z = max + sum.ln();
            for v in row.iter_mut() {
                *v = *v - log_z;
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(value, Op::LogSoftmax(x)))
    }

    /// Layer norm over the last axis with learned gain and shift,
    /// `y = gain * (x - mean) / sqrt(var + 1e-5) + shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let width = last_axis_width(self.value(x))?;
        let (gs, ss) = (self.value(gain).shape(), self.value(shift).shape());
        if gs != [width] || ss != [width] {
            return Err(Error::InvalidInput(format!(
                "layer_norm shape mismatch: x width {width}, gain {gs:?}, shift {ss:?}"
            )));
        }
        let mut out = self.value(x).data().to_vec();
        let g = self.value(gain).data().to_vec();
        let s = self.value(shift).data().to_vec();
        for row in out.chunks_mut(width) {
            let (mean, inv_sigma) = row_norm_stats(row);
            for (v, (&gv, &sv)) in row.iter_mut().zip(g.iter().zip(&s)) {
                *v = (*v - mean) * inv_sigma * gv + sv;
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, shift }))
    }

    /// Row lookup: `table: (vocab, d)`, output `(ids.len(), d)`.
    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let ts = self.value(table).shape();
        if ts.len() != 2 {
            return Err(Error::InvalidInput(format!(
                "embed table must be rank 2, got {ts:?}"
            )));
        }
        let (vocab, d) = (ts[0], ts[1]);
        if ids.is_empty() {
            return Err(Error::InvalidInput(
                "embed needs at least one id".to_string(),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::InvalidInput(format!(
                "embed id {bad} out of range (vocab {vocab})"
            )));
        }
        let src = self.value(table).data();
        let mut out = vec![S::ZERO; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&src[id as usize * d..(id as usize + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Inverted dropout: keeps each entry with probability `1 - p` and
    /// rescales by `1/(1-p)`. Identity in eval mode or at `p = 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidInput(format!(
                "dropout rate must be in [0, 1), got {p}"
            )));
        }
        if self.dropout_rng.is_none() || p == 0.0 {
            return Ok(x);
        }
        let n = self.value(x).numel();
        let keep = 1.0 - p;
        let rng = self.dropout_rng.as_mut().expect("checked above");
        let mask: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < keep).collect();
        let inv = S::from_f64(1.0 / keep);
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { v * inv } else { S::ZERO })
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask, keep }))
    }

    /// Label-smoothed negative log-likelihood, averaged over active rows.
    ///
    /// Targets mix `1 - epsilon` on the label with `epsilon` spread uniformly
    /// over the whole vocabulary. Rows with `active[i] == false` (padding)
    /// contribute nothing.
    pub fn smoothed_nll(
        &mut self,
        log_probs: Var,
        targets: &[u32],
        active: &[bool],
        epsilon: f64,
    ) -> Result<Var> {
        let ls = self.value(log_probs).shape();
        if ls.len() != 2 {
            return Err(Error::InvalidInput(format!(
                "smoothed_nll needs rank-2 log probs, got {ls:?}"
            )));
        }
        let (n, vocab) = (ls[0], ls[1]);
        if targets.len() != n || active.len() != n {
            return Err(Error::InvalidInput(format!(
                "smoothed_nll row mismatch: {n} log-prob rows, {} targets, {} active flags",
                targets.len(),
                active.len()
            )));
        }
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::InvalidInput(format!(
                "label smoothing must be in [0, 1], got {epsilon}"
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::InvalidInput(format!(
                "target {bad} out of range (vocab {vocab})"
            )));
        }
        let total = active.iter().filter(|&&a| a).count();
        if total == 0 {
            return Err(Error::InvalidInput(
                "smoothed_nll needs at least one active row".to_string(),
            ));
        }
        let lp = self.value(log_probs).data();
        let mut loss = 0.0f64;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            let row = &lp[i * vocab..(i + 1) * vocab];
            let on_target = row[targets[i] as usize].to_f64();
            let row_sum: f64 = row.iter().map(|v| v.to_f64()).sum();
            loss -= (1.0 - epsilon) * on_target + epsilon / vocab as f64 * row_sum;
        }
        loss /= total as f64;
        let value = Tensor::scalar(S::from_f64(loss));
        Ok(self.push(
            value,
            Op::SmoothedNll {
                log_probs,
                targets: targets.to_vec(),
                active: active.to_vec(),
                epsilon,
            },
        ))
    }

    /// Same data, new shape (element counts must match).
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Reverse pass from a scalar loss node. Returns per-node gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidInput(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(S::ONE));
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(
        &self,
        i: usize,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<()> {
        match &self.nodes[i].op {
            Op::Param { .. } | Op::Constant => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.data(), self.value(*a).shape());
                accumulate(grads, *b, g.data(), self.value(*b).shape());
            }
            Op::Scale(x, c) => {
                let dx: Vec<S> = g.data().iter().map(|&v| v * *c).collect();
                accumulate(grads, *x, &dx, self.value(*x).shape());
            }
            Op::Relu(x) => {
                let dx: Vec<S> = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &xv)| if xv > S::ZERO { gv } else { S::ZERO })
                    .collect();
                accumulate(grads, *x, &dx, self.value(*x).shape());
            }
            Op::Linear { x, w, b } => {
                let (n, d_in) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let d_out = self.value(*w).shape()[0];
                let mut dx = vec![S::ZERO; n * d_in];
                gemm(
                    g.data(),
                    (n, d_out),
                    false,
                    self.value(*w).data(),
                    (d_out, d_in),
                    false,
                    &mut dx,
                );
                accumulate(grads, *x, &dx, self.value(*x).shape());
                let mut dw = vec![S::ZERO; d_out * d_in];
                gemm(
                    g.data(),
                    (n, d_out),
                    true,
                    self.value(*x).data(),
                    (n, d_in),
                    false,
                    &mut dw,
                );
                accumulate(grads, *w, &dw, self.value(*w).shape());
                let mut db = vec![S::ZERO; d_out];
                for row in g.data().chunks(d_out) {
                    for (acc, &gv) in db.iter_mut().zip(row) {
                        *acc += gv;
                    }
                }
                accumulate(grads, *b, &db, self.value(*b).shape());
            }
            Op::Bmm { a, b, transpose_b } => {
                let ashape = self.value(*a).shape();
                let bshape = self.value(*b).shape();
                let (n, m, k) = (ashape[0], ashape[1], ashape[2]);
                let p = if *transpose_b { bshape[1] } else { bshape[2] };
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![S::ZERO; av.len()];
                let mut db = vec![S::ZERO; bv.len()];
                let bstride = bshape[1] * bshape[2];
                for idx in 0..n {
                    let gslice = &g.data()[idx * m * p..(idx + 1) * m * p];
                    let aslice = &av[idx * m * k..(idx + 1) * m * k];
                    let bslice = &bv[idx * bstride..(idx + 1) * bstride];
                    if *transpose_b {
                        // c = a b^T: da = g b, db = g^T a
                        gemm(
                            gslice,
                            (m, p),
                            false,
                            bslice,
                            (p, k),
                            false,
                            &mut da[idx * m * k..(idx + 1) * m * k],
                        );
                        gemm(
                            gslice,
                            (m, p),
                            true,
                            aslice,
                            (m, k),
                            false,
                            &mut db[idx * bstride..(idx + 1) * bstride],
                        );
                    } else {
                        // c = a b: da = g b^T, db = a^T g
                        gemm(
                            gslice,
                            (m, p),
                            false,
                            bslice,
                            (k, p),
                            true,
                            &mut da[idx * m * k..(idx + 1) * m * k],
                        );
                        gemm(
                            aslice,
                            (m, k),
                            true,
                            gslice,
                            (m, p),
                            false,
                            &mut db[idx * bstride..(idx + 1) * bstride],
                        );
                    }
                }
                accumulate(grads, *a, &da, ashape);
                accumulate(grads, *b, &db, bshape);
            }
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let d = self.value(*x).shape()[1];
                let dh = d / heads;
                let mut dx = vec![S::ZERO; g.numel()];
                for b in 0..*batch {
                    for h in 0..*heads {
                        for t in 0..*seq {
                            let from = ((b * heads + h) * seq + t) * dh;
                            let to = (b * seq + t) * d + h * dh;
                            dx[to..to + dh].copy_from_slice(&g.data()[from..from + dh]);
                        }
                    }
                }
                accumulate(grads, *x, &dx, self.value(*x).shape());
            }
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let dh = self.value(*x).shape()[2];
                let d = heads * dh;
                let mut dx = vec![S::ZERO; g.numel()];
                for b in 0..*batch {
                    for h in 0..*heads {
                        for t in 0..*seq {
                            let from = (b * seq + t) * d + h * dh;
                            let to = ((b * heads + h) * seq + t) * dh;
                            dx[to..to + dh].copy_from_slice(&g.data()[from..from + dh]);
                        }
                    }
                }
                accumulate(grads, *x, &dx, self.value(*x).shape());
            }
            Op::Softmax(x) => {
                let width = *self.nodes[i]
                    .value
                    .shape()
                    .last()
                    .expect("softmax output rank");
                let p = self.nodes[i].value.data();
                let mut dx = vec![S::ZERO; p.len()];
                for r in 0..p.len() / width {
                    let pr = &p[r * width..(r + 1) * width];
                    let gr = &g.data()[r * width..(r + 1) * width];
                    let mut dot = S::ZERO;
                    for (&pv, &gv) in pr.iter().zip(gr) {
                        dot += pv * gv;
                    }
                    for (o, (&pv, &gv)) in dx[r * width..(r + 1) * width]
                        .iter_mut()
                        .zip(pr.iter().zip(gr))
                    {
                        *o = pv * (gv - dot);
                    }
                }
                accumulate(grads, *x, &dx, self.value(*x).shape());
            }
            Op::LogSoftmax(x) => {
                let width = *self.nodes[i]
                    .value
                    .shape()
                    .last()
                    .expect("log_softmax output rank");
                let y = self.nodes[i].value.data();
                let mut dx = vec![S::ZERO; y.len()];
                for r in 0..y.len() / width {
                    let yr = &y[r * width..(r + 1) * width];
                    let gr = &g.data()[r * width..(r + 1) * width];
                    let mut gsum = S::ZERO;
                    for &gv in gr {
                        gsum += gv;
                    }
                    for (o, (&yv, &gv)) in dx[r * width..(r + 1) * width]
                        .iter_mut()
                        .zip(yr.iter().zip(gr))
                    {
                        *o = gv - yv.exp() * gsum;
                    }
                }
                accumulate(grads, *x, &dx, self.value(*x).shape());
            }
            Op::LayerNorm { x, gain, shift } => {
                let width = *self
                    .value(*x)
                    .shape()
                    .last()
                    .expect("layer_norm input rank");
                let xr = self.value(*x).data();
                let gainv = self.value(*gain).data();
                let rows = xr.len() / width;
                let mut dx = vec![S::ZERO; xr.len()];
                let mut dgain = vec![S::ZERO; width];
                let mut dshift = vec![S::ZERO; width];
                let inv_w = S::ONE / S::from_f64(width as f64);
                for r in 0..rows {
                    let row = &xr[r * width..(r + 1) * width];
                    let gr = &g.data()[r * width..(r + 1) * width];
                    let (mean, inv_sigma) = row_norm_stats(row);
                    let mut mean_gg = S::ZERO;
                    let mut mean_ggx = S::ZERO;
                    for j in 0..width {
                        let xh = (row[j] - mean) * inv_sigma;
                        let gg = gr[j] * gainv[j];
                        dgain[j] += gr[j] * xh;
                        dshift[j] += gr[j];
                        mean_gg += gg;
                        mean_ggx += gg * xh;
                    }
                    mean_gg *= inv_w;
                    mean_ggx *= inv_w;
                    for j in 0..width {
                        let xh = (row[j] - mean) * inv_sigma;
                        let gg = gr[j] * gainv[j];
                        dx[r * width + j] = (gg - mean_gg - xh * mean_ggx) * inv_sigma;
                    }
                }
                accumulate(grads, *x, &dx, self.value(*x).shape());
                accumulate(grads, *gain, &dgain, self.value(*gain).shape());
                accumulate(grads, *shift, &dshift, self.value(*shift).shape());
            }
            Op::Embed { table, ids } => {
                let d = self.value(*table).shape()[1];
                let mut dt = vec![S::ZERO; self.value(*table).numel()];
                for (row, &id) in ids.iter().enumerate() {
                    let src = &g.data()[row * d..(row + 1) * d];
                    for (o, &gv) in dt[id as usize * d..(id as usize + 1) * d]
                        .iter_mut()
                        .zip(src)
                    {
                        *o += gv;
                    }
                }
                accumulate(grads, *table, &dt, self.value(*table).shape());
            }
            Op::Dropout { x, mask, keep } => {
                let inv = S::from_f64(1.0 / keep);
                let dx: Vec<S> = g
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&gv, &m)| if m { gv * inv } else { S::ZERO })
                    .collect();
                accumulate(grads, *x, &dx, self.value(*x).shape());
            }
            Op::SmoothedNll {
                log_probs,
                targets,
                active,
                epsilon,
            } => {
                let vocab = self.value(*log_probs).shape()[1];
                let total = active.iter().filter(|&&a| a).count();
                let gs = g.data()[0];
                let unit = gs * S::from_f64(1.0 / total as f64);
                let off = unit * S::from_f64(epsilon / vocab as f64);
                let on = unit * S::from_f64(1.0 - epsilon);
                let mut dlp = vec![S::ZERO; self.value(*log_probs).numel()];
                for (row, (&t, &a)) in targets.iter().zip(active).enumerate() {
                    if !a {
                        continue;
                    }
                    for v in dlp[row * vocab..(row + 1) * vocab].iter_mut() {
                        *v = *v - off;
                    }
                    dlp[row * vocab + t as usize] -= on;
                }
                accumulate(grads, *log_probs, &dlp, self.value(*log_probs).shape());
            }
            Op::Reshape { x } => {
                accumulate(grads, *x, g.data(), self.value(*x).shape());
            }
        }
        Ok(())
    }
}

/// Mean and inverse standard deviation of one row, with the layer norm
/// epsilon folded in.
fn row_norm_stats<S: Scalar>(row: &[S]) -> (S, S) {
    let inv_w = S::ONE / S::from_f64(row.len() as f64);
    let mut mean = S::ZERO;
    for &v in row {
        mean += v;
    }
    mean *= inv_w;
    let mut var = S::ZERO;
    for &v in row {
        let d = v - mean;
        var += d * d;
    }
    var *= inv_w;
    (mean, S::ONE / (var + S::from_f64(1e-5)).sqrt())
}

fn last_axis_width<S: Scalar>(t: &Tensor<S>) -> Result<usize> {
    match t.shape().last() {
        Some(&w) if w > 0 => Ok(w),
        _ => Err(Error::InvalidInput("tensor has no last axis".to_string())),
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, delta: &[S], shape: &[usize]) {
    match &mut grads[v.0] {
        Some(t) => {
            for (a, &b) in t.data_mut().iter_mut().zip(delta) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), delta.to_vec()).expect("gradient shape"));
        }
    }
}

/// `out += a op_a . b op_b` for row-major slices via ndarray's gemm.
/// Shapes are the *stored* (rows, cols) of each slice; transposition is
/// applied on top.
fn gemm<S: Scalar>(
    a: &[S],
    a_shape: (usize, usize),
    transpose_a: bool,
    b: &[S],
    b_shape: (usize, usize),
    transpose_b: bool,
    out: &mut [S],
) {
    let av = ArrayView2::from_shape(a_shape, a).expect("gemm lhs shape");
    let bv = ArrayView2::from_shape(b_shape, b).expect("gemm rhs shape");
    let av = if transpose_a { av.reversed_axes() } else { av };
    let bv = if transpose_b { bv.reversed_axes() } else { bv };
    let (m, n) = (av.nrows(), bv.ncols());
    let mut cv = ArrayViewMut2::from_shape((m, n), out).expect("gemm out shape");
    general_mat_mul(S::ONE, &av, &bv, S::ONE, &mut cv);
}
