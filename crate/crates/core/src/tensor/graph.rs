//! Reverse-mode tape.
//!
//! A [`Graph`] records every operation applied to its variables. Parameter
//! leaves borrow their tensors, so building a graph copies no weights.
//! [`Graph::backward`] returns the gradients of every leaf that requires one;
//! [`super::ParamSet::accumulate`] adds them into the parameter tensors.

use std::borrow::Cow;

use rand::Rng as _;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{ParamId, Tensor, TensorError};
use crate::rng::Rng;

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        s: f32,
    },
    Softmax {
        a: usize,
    },
    LayerNorm {
        x: usize,
        gamma: Option<usize>,
        beta: Option<usize>,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Gelu {
        a: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<f32>,
        count: usize,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Dropout {
        a: usize,
        mask: Vec<f32>,
    },
    GatherRows {
        a: usize,
        rows: Vec<usize>,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
}

#[derive(Debug)]
struct Node<'p> {
    shape: Vec<usize>,
    value: Cow<'p, [f32]>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

#[derive(Debug, Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    checked: bool,
}

/// Gradients of the leaves of one graph with respect to one scalar loss.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient per parameter leaf. A parameter registered twice yields two entries.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f32])> {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.grads[node].as_deref().map(|g| (id, g)))
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn permute_data(src: &[f32], shape: &[usize], perm: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(src[off]);
        let mut d = nd;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn grad_slot<'g>(
    nodes: &[Node<'_>],
    grads: &'g mut [Option<Vec<f32>>],
    j: usize,
) -> Option<&'g mut Vec<f32>> {
    if !nodes[j].needs_grad {
        return None;
    }
    let len = nodes[j].value.len();
    Some(grads[j].get_or_insert_with(|| vec![0.0; len]))
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph::default()
    }

    /// In checked mode every op verifies its output is finite.
    pub fn checked(mut self, on: bool) -> Self {
        self.checked = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'p, [f32]>, op: Op, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn emit(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<f32>,
        op: Op,
        inputs: &[usize],
    ) -> Result<Var, TensorError> {
        if self.checked && value.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(self.push(shape, Cow::Owned(value), op, inputs))
    }

    fn leaf(
        &mut self,
        shape: Vec<usize>,
        value: Cow<'p, [f32]>,
        needs_grad: bool,
        param: Option<ParamId>,
    ) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            needs_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.shape, Cow::Owned(t.data), false, None)
    }

    /// Borrowed leaf; differentiable when `t.requires_grad`.
    pub fn input(&mut self, t: &'p Tensor) -> Var {
        self.leaf(
            t.shape.clone(),
            Cow::Borrowed(&t.data),
            t.requires_grad,
            None,
        )
    }

    /// Borrowed parameter leaf whose gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, t: &'p Tensor) -> Var {
        self.leaf(t.shape.clone(), Cow::Borrowed(&t.data), true, Some(id))
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Batched matrix product. `a` is `[.., m, k]`; `b` is either `[k, n]`
    /// (shared across the batch) or `[.., k, n]` with `a`'s leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sb[..sb.len() - 2] != *lead {
            return Err(mismatch());
        }
        let mut out = vec![0.0f32; batch * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            if shared_rhs {
                gemm_nn(av, bv, &mut out, batch * m, k, n);
            } else {
                for i in 0..batch {
                    gemm_nn(
                        &av[i * m * k..(i + 1) * m * k],
                        &bv[i * k * n..(i + 1) * k * n],
                        &mut out[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        self.emit(
            "matmul",
            shape,
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            &[a.0, b.0],
        )
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// `a + b`, where `b`'s shape is a suffix of `a`'s (broadcast over leading dims).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.broadcast_check("add", a, b)?;
        let bv = self.value(b);
        let inner = bv.len().max(1);
        let out: Vec<f32> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % inner])
            .collect();
        self.emit(
            "add",
            self.shape(a).to_vec(),
            out,
            Op::Add { a: a.0, b: b.0 },
            &[a.0, b.0],
        )
    }

    /// Elementwise `a * b` with the same broadcast rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.broadcast_check("mul", a, b)?;
        let bv = self.value(b);
        let inner = bv.len().max(1);
        let out: Vec<f32> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x * bv[i % inner])
            .collect();
        self.emit(
            "mul",
            self.shape(a).to_vec(),
            out,
            Op::Mul { a: a.0, b: b.0 },
            &[a.0, b.0],
        )
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var, TensorError> {
        let out: Vec<f32> = self.value(a).iter().map(|x| x * s).collect();
        self.emit(
            "scale",
            self.shape(a).to_vec(),
            out,
            Op::Scale { a: a.0, s },
            &[a.0],
        )
    }

    fn last_dim(&self, op: &'static str, a: Var) -> Result<usize, TensorError> {
        match self.shape(a).last() {
            Some(&d) if d > 0 => Ok(d),
            _ => Err(TensorError::BadShape {
                op,
                shape: self.shape(a).to_vec(),
                reason: "needs a non-empty last dimension".into(),
            }),
        }
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let d = self.last_dim("softmax", a)?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(d) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            let inv = 1.0 / sum;
            for x in row.iter_mut() {
                *x *= inv;
            }
        }
        self.emit(
            "softmax",
            self.shape(a).to_vec(),
            out,
            Op::Softmax { a: a.0 },
            &[a.0],
        )
    }

    /// Normalizes the last dimension to zero mean and unit variance, then
    /// applies the optional affine `gamma * x + beta`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: f32,
    ) -> Result<Var, TensorError> {
        let d = self.last_dim("layer_norm", x)?;
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x);
        let rows = xv.len() / d;
        let mut xhat = vec![0.0f32; xv.len()];
        let mut rstd = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gamma {
            let gv = self.value(g);
            for (i, o) in out.iter_mut().enumerate() {
                *o *= gv[i % d];
            }
        }
        if let Some(b) = beta {
            let bv = self.value(b);
            for (i, o) in out.iter_mut().enumerate() {
                *o += bv[i % d];
            }
        }
        let mut inputs = vec![x.0];
        inputs.extend(gamma.map(|v| v.0));
        inputs.extend(beta.map(|v| v.0));
        self.emit(
            "layer_norm",
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.map(|v| v.0),
                beta: beta.map(|v| v.0),
                xhat,
                rstd,
            },
            &inputs,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let out: Vec<f32> = self.value(a).iter().map(|&x| gelu(x)).collect();
        self.emit(
            "gelu",
            self.shape(a).to_vec(),
            out,
            Op::Gelu { a: a.0 },
            &[a.0],
        )
    }

    /// Rows of a `[rows, dim]` table selected by `ids`; output `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var, TensorError> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(TensorError::BadShape {
                op: "embedding",
                shape: st,
                reason: "table must be 2-D".into(),
            });
        }
        let (rows, dim) = (st[0], st[1]);
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::IndexOutOfRange {
                table: "embedding".into(),
                index: bad,
                bound: rows,
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in &ids {
            out.extend_from_slice(&tv[i * dim..(i + 1) * dim]);
        }
        let n = ids.len();
        self.emit(
            "embedding",
            vec![n, dim],
            out,
            Op::Embedding {
                table: table.0,
                ids,
            },
            &[table.0],
        )
    }

    /// Mean cross-entropy of `[n, classes]` logits over targets that are not
    /// `ignore_index`. Zero when every target is ignored.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[i64],
        ignore_index: i64,
    ) -> Result<Var, TensorError> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: sl,
                rhs: vec![targets.len()],
            });
        }
        let classes = sl[1];
        let mut tg = Vec::with_capacity(targets.len());
        for &t in targets {
            if t == ignore_index {
                tg.push(None);
            } else if t < 0 || t as usize >= classes {
                return Err(TensorError::IndexOutOfRange {
                    table: "cross_entropy targets".into(),
                    index: t.max(0) as usize,
                    bound: classes,
                });
            } else {
                tg.push(Some(t as usize));
            }
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0f32; lv.len()];
        let mut total = 0.0f32;
        let mut count = 0usize;
        for (r, t) in tg.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &lv[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            let prow = &mut probs[r * classes..(r + 1) * classes];
            for (p, &x) in prow.iter_mut().zip(row) {
                *p = (x - max).exp();
                sum += *p;
            }
            for p in prow.iter_mut() {
                *p /= sum;
            }
            total += sum.ln() + max - row[t];
            count += 1;
        }
        let loss = if count == 0 {
            0.0
        } else {
            total / count as f32
        };
        self.emit(
            "cross_entropy",
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits: logits.0,
                targets: tg,
                probs,
                count,
            },
            &[logits.0],
        )
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(TensorError::BadShape {
                op: "transpose",
                shape: self.shape(a).to_vec(),
                reason: "needs at least 2 dimensions".into(),
            });
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(a, &perm)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..shape.len()).collect::<Vec<_>>() {
            return Err(TensorError::BadShape {
                op: "permute",
                shape,
                reason: format!("{perm:?} is not a permutation"),
            });
        }
        let (out, out_shape) = permute_data(self.value(a), &shape, perm);
        self.emit(
            "permute",
            out_shape,
            out,
            Op::Permute {
                a: a.0,
                perm: perm.to_vec(),
            },
            &[a.0],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(a).to_vec();
        self.emit(
            "reshape",
            shape.to_vec(),
            out,
            Op::Reshape { a: a.0 },
            &[a.0],
        )
    }

    /// Inverted dropout: zeroes each element with probability `p` and
    /// scales survivors by `1/(1-p)`. Identity when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f32, rng: &mut Rng) -> Result<Var, TensorError> {
        if p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return Err(TensorError::BadShape {
                op: "dropout",
                shape: self.shape(a).to_vec(),
                reason: format!("probability {p} must be below 1"),
            });
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f32> = (0..self.value(a).len())
            .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep })
            .collect();
        let out: Vec<f32> = self
            .value(a)
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        self.emit(
            "dropout",
            self.shape(a).to_vec(),
            out,
            Op::Dropout { a: a.0, mask },
            &[a.0],
        )
    }

    /// Rows of a 2-D value.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::BadShape {
                op: "gather_rows",
                shape: s,
                reason: "input must be 2-D".into(),
            });
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= s[0]) {
            return Err(TensorError::IndexOutOfRange {
                table: "gather_rows".into(),
                index: bad,
                bound: s[0],
            });
        }
        let d = s[1];
        let av = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&av[r * d..(r + 1) * d]);
        }
        self.emit(
            "gather_rows",
            vec![rows.len(), d],
            out,
            Op::GatherRows {
                a: a.0,
                rows: rows.to_vec(),
            },
            &[a.0],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s: f32 = self.value(a).iter().sum();
        self.emit("sum", vec![], vec![s], Op::Sum { a: a.0 }, &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.value(a).len().max(1) as f32;
        let s: f32 = self.value(a).iter().sum::<f32>() / n;
        self.emit("mean", vec![], vec![s], Op::Mean { a: a.0 }, &[a.0])
    }

    /// Gradients of the scalar `loss` with respect to every differentiable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &gout, &mut grads);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|id| (id, i)))
            .collect();
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) || !n.needs_grad {
                grads[i] = None;
            } else if grads[i].is_none() {
                grads[i] = Some(vec![0.0; n.value.len()]);
            }
        }
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, node: &Node<'p>, gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($j:expr, |$g:ident| $body:block) => {
                if let Some($g) = grad_slot(nodes, grads, $j) {
                    $body
                }
            };
        }
        let val = |j: usize| -> &[f32] { &nodes[j].value };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let (a, b, batch, m, k, n) = (*a, *b, *batch, *m, *k, *n);
                with_grad!(a, |ga| {
                    let bv = val(b);
                    if *shared_rhs {
                        gemm_nt(gout, bv, ga, batch * m, n, k);
                    } else {
                        for i in 0..batch {
                            gemm_nt(
                                &gout[i * m * n..(i + 1) * m * n],
                                &bv[i * k * n..(i + 1) * k * n],
                                &mut ga[i * m * k..(i + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                });
                with_grad!(b, |gb| {
                    let av = val(a);
                    if *shared_rhs {
                        gemm_tn(av, gout, gb, batch * m, k, n);
                    } else {
                        for i in 0..batch {
                            gemm_tn(
                                &av[i * m * k..(i + 1) * m * k],
                                &gout[i * m * n..(i + 1) * m * n],
                                &mut gb[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                with_grad!(*a, |ga| {
                    for (x, g) in ga.iter_mut().zip(gout) {
                        *x += g;
                    }
                });
                with_grad!(*b, |gb| {
                    let inner = gb.len().max(1);
                    for (i, g) in gout.iter().enumerate() {
                        gb[i % inner] += g;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let inner = bv.len().max(1);
                with_grad!(*a, |ga| {
                    for (i, (x, g)) in ga.iter_mut().zip(gout).enumerate() {
                        *x += g * bv[i % inner];
                    }
                });
                with_grad!(*b, |gb| {
                    for (i, g) in gout.iter().enumerate() {
                        gb[i % inner] += g * av[i];
                    }
                });
            }
            Op::Scale { a, s } => {
                with_grad!(*a, |ga| {
                    for (x, g) in ga.iter_mut().zip(gout) {
                        *x += g * s;
                    }
                });
            }
            Op::Softmax { a } => {
                let y = &node.value;
                let d = *node.shape.last().expect("softmax shape");
                with_grad!(*a, |ga| {
                    for ((gr, yr), dr) in ga
                        .chunks_exact_mut(d)
                        .zip(y.chunks_exact(d))
                        .zip(gout.chunks_exact(d))
                    {
                        let dot: f32 = yr.iter().zip(dr).map(|(y, g)| y * g).sum();
                        for ((x, y), g) in gr.iter_mut().zip(yr).zip(dr) {
                            *x += y * (g - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *node.shape.last().expect("layer_norm shape");
                let gamma_v = gamma.map(&val);
                with_grad!(*x, |gx| {
                    let mut dxhat = vec![0.0f32; d];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let go = &gout[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = go[j] * gamma_v.map_or(1.0, |g| g[j]);
                        }
                        let sum_d: f32 = dxhat.iter().sum();
                        let sum_dx: f32 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let scale = rs / d as f32;
                        for (j, gxj) in gx[r * d..(r + 1) * d].iter_mut().enumerate() {
                            *gxj += scale * (d as f32 * dxhat[j] - sum_d - xh[j] * sum_dx);
                        }
                    }
                });
                if let Some(g) = gamma {
                    with_grad!(*g, |gg| {
                        for (i, (go, xh)) in gout.iter().zip(xhat).enumerate() {
                            gg[i % d] += go * xh;
                        }
                    });
                }
                if let Some(b) = beta {
                    with_grad!(*b, |gb| {
                        for (i, go) in gout.iter().enumerate() {
                            gb[i % d] += go;
                        }
                    });
                }
            }
            Op::Gelu { a } => {
                let av = val(*a);
                with_grad!(*a, |ga| {
                    for ((x, g), &v) in ga.iter_mut().zip(gout).zip(av) {
                        *x += g * gelu_grad(v);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = node.shape[1];
                with_grad!(*table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for (x, g) in gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&gout[r * d..(r + 1) * d])
                        {
                            *x += g;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let classes = nodes[*logits].shape[1];
                let scale = gout[0] / *count as f32;
                with_grad!(*logits, |gl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = &mut gl[r * classes..(r + 1) * classes];
                        for (x, p) in row.iter_mut().zip(&probs[r * classes..(r + 1) * classes]) {
                            *x += p * scale;
                        }
                        row[t] -= scale;
                    }
                });
            }
            Op::Reshape { a } => {
                with_grad!(*a, |ga| {
                    for (x, g) in ga.iter_mut().zip(gout) {
                        *x += g;
                    }
                });
            }
            Op::Permute { a, perm } => {
                let (back, _) = permute_data(gout, &node.shape, &inverse_perm(perm));
                with_grad!(*a, |ga| {
                    for (x, g) in ga.iter_mut().zip(&back) {
                        *x += g;
                    }
                });
            }
            Op::Dropout { a, mask } => {
                with_grad!(*a, |ga| {
                    for ((x, g), m) in ga.iter_mut().zip(gout).zip(mask) {
                        *x += g * m;
                    }
                });
            }
            Op::GatherRows { a, rows } => {
                let d = node.shape[1];
                with_grad!(*a, |ga| {
                    for (i, &r) in rows.iter().enumerate() {
                        for (x, g) in ga[r * d..(r + 1) * d]
                            .iter_mut()
                            .zip(&gout[i * d..(i + 1) * d])
                        {
                            *x += g;
                        }
                    }
                });
            }
            Op::Sum { a } => {
                with_grad!(*a, |ga| {
                    for x in ga.iter_mut() {
                        *x += gout[0];
                    }
                });
            }
            Op::Mean { a } => {
                with_grad!(*a, |ga| {
                    let s = gout[0] / ga.len().max(1) as f32;
                    for x in ga.iter_mut() {
                        *x += s;
                    }
                });
            }
        }
    }
}
