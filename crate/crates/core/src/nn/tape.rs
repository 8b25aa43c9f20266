//! Eager reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as a node holding its inputs, opcode,
//! and forward value. `backward` walks the nodes in reverse creation order
//! (a topological order by construction) and accumulates gradients for every
//! node created via [`Tape::param`], keyed by the caller's parameter index.
//! All math is `f64`; masked softmax entries (`-inf` logits) get exactly
//! zero probability and exactly zero gradient.

use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::{self, Tensor};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param { param: usize },
    Add,
    AddRow,
    Scale { c: f64 },
    MatMul { ta: bool, tb: bool },
    Gelu,
    /// Parents: `[x (n×d), gain (1×d), bias (1×d)]`.
    LayerNorm { eps: f64 },
    SoftmaxRows,
    GatherRows { indices: Vec<usize> },
    SliceCols { start: usize, len: usize },
    ConcatRows { sizes: Vec<usize> },
    ConcatCols { sizes: Vec<usize> },
    /// Row `g` of the output is the mean of parent rows `groups[g]`
    /// (empty group → zero row).
    GroupMeanRows { groups: Vec<Vec<usize>> },
    CrossEntropyMean { targets: Vec<usize> },
    BceWithLogitsMean { targets: Tensor },
    Dropout { mask: Vec<f64> },
    /// Scalar dot product of the flattened parent with fixed weights.
    WeightedSum { weights: Vec<f64> },
}

struct Node {
    op: Op,
    parents: Vec<NodeId>,
    value: Tensor,
}

/// The default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, parents, value });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, vec![], value)
    }

    /// Register a trainable leaf; gradients come back under `param`.
    pub fn param(&mut self, param: usize, value: &Tensor) -> NodeId {
        self.push(Op::Param { param }, vec![], value.clone())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = tensor::add(self.value(a), self.value(b));
        self.push(Op::Add, vec![a, b], value)
    }

    /// Broadcast-add a 1×d row vector node to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = tensor::add_row(self.value(a), self.value(b));
        self.push(Op::AddRow, vec![a, b], value)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = tensor::scale(self.value(a), c);
        self.push(Op::Scale { c }, vec![a], value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> NodeId {
        let value = tensor::matmul(self.value(a), self.value(b), ta, tb);
        self.push(Op::MatMul { ta, tb }, vec![a, b], value)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let data = x.data.iter().map(|&v| tensor::gelu(v)).collect();
        let value = Tensor { rows: x.rows, cols: x.cols, data };
        self.push(Op::Gelu, vec![a], value)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (xs, g, b) = (self.value(x), self.value(gain), self.value(bias));
        assert_eq!((g.rows, g.cols), (1, xs.cols), "layer_norm gain shape");
        assert_eq!((b.rows, b.cols), (1, xs.cols), "layer_norm bias shape");
        let mut value = Tensor::zeros(xs.rows, xs.cols);
        for i in 0..xs.rows {
            let row = xs.row(i);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let out = value.row_mut(i);
            for j in 0..row.len() {
                out[j] = (row[j] - mean) * inv * g.data[j] + b.data[j];
            }
        }
        self.push(Op::LayerNorm { eps: LAYER_NORM_EPS }, vec![x, gain, bias], value)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let value = tensor::softmax_rows(self.value(a));
        self.push(Op::SoftmaxRows, vec![a], value)
    }

    /// Output row `i` is parent row `indices[i]`; indices may repeat.
    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        let x = self.value(a);
        let mut value = Tensor::zeros(indices.len(), x.cols);
        for (i, &idx) in indices.iter().enumerate() {
            assert!(idx < x.rows, "gather index {idx} out of {} rows", x.rows);
            value.row_mut(i).copy_from_slice(x.row(idx));
        }
        self.push(Op::GatherRows { indices }, vec![a], value)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = self.value(a);
        assert!(start + len <= x.cols, "slice_cols out of range");
        let mut value = Tensor::zeros(x.rows, len);
        for i in 0..x.rows {
            value.row_mut(i).copy_from_slice(&x.row(i)[start..start + len]);
        }
        self.push(Op::SliceCols { start, len }, vec![a], value)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let cols = self.value(parts[0]).cols;
        let mut sizes = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols, "concat_rows column mismatch");
            sizes.push(t.rows);
            data.extend_from_slice(&t.data);
        }
        let rows = sizes.iter().sum();
        let value = Tensor { rows, cols, data };
        self.push(Op::ConcatRows { sizes }, parts.to_vec(), value)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = self.value(parts[0]).rows;
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows, rows, "concat_cols row mismatch");
            sizes.push(t.cols);
        }
        let cols: usize = sizes.iter().sum();
        let mut value = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let mut at = 0;
            for &p in parts {
                let t = self.value(p);
                value.data[i * cols + at..i * cols + at + t.cols].copy_from_slice(t.row(i));
                at += t.cols;
            }
        }
        self.push(Op::ConcatCols { sizes }, parts.to_vec(), value)
    }

    /// Row `g` of the output = mean over parent rows `groups[g]`; an empty
    /// group produces a zero row.
    pub fn group_mean_rows(&mut self, a: NodeId, groups: Vec<Vec<usize>>) -> NodeId {
        let x = self.value(a);
        let mut value = Tensor::zeros(groups.len(), x.cols);
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let out = value.row_mut(g);
            for &i in members {
                assert!(i < x.rows, "group member {i} out of {} rows", x.rows);
                for (o, &v) in out.iter_mut().zip(x.row(i)) {
                    *o += v;
                }
            }
            let inv = 1.0 / members.len() as f64;
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        self.push(Op::GroupMeanRows { groups }, vec![a], value)
    }

    /// Mean softmax cross-entropy of logit rows against target ids.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let x = self.value(logits);
        assert_eq!(targets.len(), x.rows, "one target per logit row");
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < x.cols, "target {t} out of {} classes", x.cols);
            let row = x.row(i);
            loss += tensor::log_sum_exp(row) - row[t];
        }
        loss /= targets.len() as f64;
        self.push(Op::CrossEntropyMean { targets }, vec![logits], Tensor::scalar(loss))
    }

    /// Mean binary cross-entropy with logits against a same-shape multi-hot
    /// target tensor, averaged over every entry.
    pub fn bce_with_logits_mean(&mut self, logits: NodeId, targets: Tensor) -> NodeId {
        let x = self.value(logits);
        assert_eq!(x.shape(), targets.shape(), "bce target shape");
        let mut loss = 0.0;
        for (&v, &t) in x.data.iter().zip(&targets.data) {
            loss += v.max(0.0) - v * t + (-v.abs()).exp().ln_1p();
        }
        loss /= x.len() as f64;
        self.push(Op::BceWithLogitsMean { targets }, vec![logits], Tensor::scalar(loss))
    }

    /// Inverted dropout; `rate == 0` is the identity (no node recorded).
    pub fn dropout<R: Rng>(&mut self, a: NodeId, rate: f64, rng: &mut R) -> NodeId {
        assert!((0.0..1.0).contains(&rate), "dropout rate in [0, 1)");
        if rate == 0.0 {
            return a;
        }
        let x = self.value(a);
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = x.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor { rows: x.rows, cols: x.cols, data };
        self.push(Op::Dropout { mask }, vec![a], value)
    }

    /// Scalar `sum(flatten(a) ⊙ weights)`.
    pub fn weighted_sum(&mut self, a: NodeId, weights: Vec<f64>) -> NodeId {
        let x = self.value(a);
        assert_eq!(weights.len(), x.len(), "weighted_sum length");
        let v = x.data.iter().zip(&weights).map(|(a, w)| a * w).sum();
        self.push(Op::WeightedSum { weights }, vec![a], Tensor::scalar(v))
    }

    /// Reverse-mode gradients of scalar node `root` with respect to every
    /// parameter leaf, keyed by parameter index.
    pub fn backward(&self, root: NodeId) -> BTreeMap<usize, Tensor> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::scalar(1.0));
        let mut out: BTreeMap<usize, Tensor> = BTreeMap::new();

        for id in (0..=root).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Const => {}
                Op::Param { param } => match out.entry(*param) {
                    std::collections::btree_map::Entry::Vacant(e) => {
                        e.insert(dy);
                    }
                    std::collections::btree_map::Entry::Occupied(mut e) => {
                        let g = e.get_mut();
                        for (a, b) in g.data.iter_mut().zip(&dy.data) {
                            *a += b;
                        }
                    }
                },
                Op::Add => {
                    accumulate(&mut grads, node.parents[0], dy.clone());
                    accumulate(&mut grads, node.parents[1], dy);
                }
                Op::AddRow => {
                    let mut db = Tensor::zeros(1, dy.cols);
                    for i in 0..dy.rows {
                        for (o, &v) in db.data.iter_mut().zip(dy.row(i)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, node.parents[0], dy);
                    accumulate(&mut grads, node.parents[1], db);
                }
                Op::Scale { c } => {
                    accumulate(&mut grads, node.parents[0], tensor::scale(&dy, *c));
                }
                Op::MatMul { ta, tb } => {
                    let a = self.value(node.parents[0]);
                    let b = self.value(node.parents[1]);
                    let da_pre = tensor::matmul(&dy, b, false, !tb);
                    let da = if *ta { da_pre.transpose() } else { da_pre };
                    let db_pre = tensor::matmul(a, &dy, !ta, false);
                    let db = if *tb { db_pre.transpose() } else { db_pre };
                    accumulate(&mut grads, node.parents[0], da);
                    accumulate(&mut grads, node.parents[1], db);
                }
                Op::Gelu => {
                    let x = self.value(node.parents[0]);
                    let data = x
                        .data
                        .iter()
                        .zip(&dy.data)
                        .map(|(&v, &g)| g * tensor::gelu_grad(v))
                        .collect();
                    accumulate(
                        &mut grads,
                        node.parents[0],
                        Tensor { rows: x.rows, cols: x.cols, data },
                    );
                }
                Op::LayerNorm { eps } => {
                    let x = self.value(node.parents[0]);
                    let g = self.value(node.parents[1]);
                    let d = x.cols as f64;
                    let mut dx = Tensor::zeros(x.rows, x.cols);
                    let mut dgain = Tensor::zeros(1, x.cols);
                    let mut dbias = Tensor::zeros(1, x.cols);
                    for i in 0..x.rows {
                        let row = x.row(i);
                        let mean = row.iter().sum::<f64>() / d;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        let dyr = dy.row(i);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        let dxhat: Vec<f64> = dyr
                            .iter()
                            .zip(&g.data)
                            .map(|(dyv, gv)| dyv * gv)
                            .collect();
                        for j in 0..x.cols {
                            dgain.data[j] += dyr[j] * xhat[j];
                            dbias.data[j] += dyr[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat[j];
                        }
                        m1 /= d;
                        m2 /= d;
                        let out = dx.row_mut(i);
                        for j in 0..x.cols {
                            out[j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                    accumulate(&mut grads, node.parents[0], dx);
                    accumulate(&mut grads, node.parents[1], dgain);
                    accumulate(&mut grads, node.parents[2], dbias);
                }
                Op::SoftmaxRows => {
                    let p = &node.value;
                    let mut dx = Tensor::zeros(p.rows, p.cols);
                    for i in 0..p.rows {
                        let pr = p.row(i);
                        let dyr = dy.row(i);
                        let s: f64 = pr.iter().zip(dyr).map(|(p, d)| p * d).sum();
                        let out = dx.row_mut(i);
                        for j in 0..p.cols {
                            out[j] = pr[j] * (dyr[j] - s);
                        }
                    }
                    accumulate(&mut grads, node.parents[0], dx);
                }
                Op::GatherRows { indices } => {
                    let x = self.value(node.parents[0]);
                    let mut dx = Tensor::zeros(x.rows, x.cols);
                    for (i, &idx) in indices.iter().enumerate() {
                        for (o, &v) in dx.row_mut(idx).iter_mut().zip(dy.row(i)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, node.parents[0], dx);
                }
                Op::SliceCols { start, len } => {
                    let x = self.value(node.parents[0]);
                    let mut dx = Tensor::zeros(x.rows, x.cols);
                    for i in 0..x.rows {
                        dx.row_mut(i)[*start..start + len].copy_from_slice(dy.row(i));
                    }
                    accumulate(&mut grads, node.parents[0], dx);
                }
                Op::ConcatRows { sizes } => {
                    let mut at = 0;
                    for (k, &sz) in sizes.iter().enumerate() {
                        let part = Tensor {
                            rows: sz,
                            cols: dy.cols,
                            data: dy.data[at * dy.cols..(at + sz) * dy.cols].to_vec(),
                        };
                        accumulate(&mut grads, node.parents[k], part);
                        at += sz;
                    }
                }
                Op::ConcatCols { sizes } => {
                    let mut at = 0;
                    for (k, &sz) in sizes.iter().enumerate() {
                        let mut part = Tensor::zeros(dy.rows, sz);
                        for i in 0..dy.rows {
                            part.row_mut(i).copy_from_slice(&dy.row(i)[at..at + sz]);
                        }
                        accumulate(&mut grads, node.parents[k], part);
                        at += sz;
                    }
                }
                Op::GroupMeanRows { groups } => {
                    let x = self.value(node.parents[0]);
                    let mut dx = Tensor::zeros(x.rows, x.cols);
                    for (g, members) in groups.iter().enumerate() {
                        if members.is_empty() {
                            continue;
                        }
                        let w = 1.0 / members.len() as f64;
                        for &i in members {
                            for (o, &v) in dx.row_mut(i).iter_mut().zip(dy.row(g)) {
                                *o += v * w;
                            }
                        }
                    }
                    accumulate(&mut grads, node.parents[0], dx);
                }
                Op::CrossEntropyMean { targets } => {
                    let x = self.value(node.parents[0]);
                    let scale = dy.item() / targets.len() as f64;
                    let mut dx = tensor::softmax_rows(x);
                    for (i, &t) in targets.iter().enumerate() {
                        dx.data[i * dx.cols + t] -= 1.0;
                    }
                    for v in dx.data.iter_mut() {
                        *v *= scale;
                    }
                    accumulate(&mut grads, node.parents[0], dx);
                }
                Op::BceWithLogitsMean { targets } => {
                    let x = self.value(node.parents[0]);
                    let scale = dy.item() / x.len() as f64;
                    let data = x
                        .data
                        .iter()
                        .zip(&targets.data)
                        .map(|(&v, &t)| (tensor::sigmoid(v) - t) * scale)
                        .collect();
                    accumulate(
                        &mut grads,
                        node.parents[0],
                        Tensor { rows: x.rows, cols: x.cols, data },
                    );
                }
                Op::Dropout { mask } => {
                    let data = dy.data.iter().zip(mask).map(|(v, m)| v * m).collect();
                    accumulate(
                        &mut grads,
                        node.parents[0],
                        Tensor { rows: dy.rows, cols: dy.cols, data },
                    );
                }
                Op::WeightedSum { weights } => {
                    let x = self.value(node.parents[0]);
                    let s = dy.item();
                    let data = weights.iter().map(|w| w * s).collect();
                    accumulate(
                        &mut grads,
                        node.parents[0],
                        Tensor { rows: x.rows, cols: x.cols, data },
                    );
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut grads[id] {
        Some(g) => {
            debug_assert_eq!(g.shape(), delta.shape());
            for (a, b) in g.data.iter_mut().zip(&delta.data) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}
