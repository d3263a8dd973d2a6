//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records primitive operations as they execute; [`Tape::backward`]
//! replays the record in reverse, accumulating gradients for every parameter
//! leaf. The op set is exactly what the policy and value networks need:
//! dense matmul, elementwise math, softmax/log-softmax, layer norm,
//! embedding lookup, concat/slice/reshape, reductions, and cross-entropy.
//!
//! Broadcasting is deliberately restricted to rank-1 bias addition over the
//! last axis; every other op requires exact shape agreement.

mod gradcheck;
mod store;

pub use gradcheck::grad_check;
pub use store::{
    load_checkpoint, save_checkpoint, sha256_hex, AdamConfig, Gradients, ParameterStore,
    StoreError,
};

use ndarray::{ArrayD, Axis, Ix1, Ix2, IxDyn};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {got:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("{op}: index {index} out of bounds for length {len}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("softmax lane contains no finite entry")]
    EmptySoftmaxLane,
    #[error("gradient check: {0}")]
    GradCheck(String),
}

pub type AdResult<T> = Result<T, AdError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// (matrix, bias): bias is rank-1 over the last axis of the matrix.
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Softmax(NodeId, usize),
    LogSoftmax(NodeId),
    /// (input, gain, bias) normalized over the last axis.
    LayerNorm(NodeId, NodeId, NodeId),
    Embedding(NodeId, Vec<usize>),
    Concat(Vec<NodeId>, usize),
    Slice(NodeId, usize, usize, usize),
    ReduceSum(NodeId, Option<usize>),
    ReduceMean(NodeId, Option<usize>),
    CrossEntropy(NodeId, usize),
    Transpose(NodeId),
    Reshape(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Pick(NodeId, usize),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
    param_name: Option<String>,
}

/// Wengert-list tape. One tape per loss evaluation; consumed by `backward`.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a 0-d node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.ndim(), 0);
        self.nodes[id.0].value.iter().copied().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param_name: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, value: f64) -> NodeId {
        self.constant(ndarray::arr0(value).into_dyn())
    }

    /// Trainable leaf; `backward` reports its gradient under `name`.
    pub fn param(&mut self, name: &str, value: ArrayD<f64>) -> NodeId {
        let id = self.push(value, Op::Leaf, true);
        self.nodes[id.0].param_name = Some(name.to_string());
        id
    }

    /// Binds every parameter of `store` under its own name and returns a
    /// lookup handle. Guarantees that `backward` reports a gradient entry
    /// (zero if unused) for the whole store.
    pub fn bind_store(&mut self, store: &ParameterStore) -> BoundStore {
        let mut bound = BoundStore::default();
        for (name, value) in store.iter() {
            let id = self.param(name, value.clone());
            bound.ids.insert(name.to_string(), id);
        }
        bound
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let a2 = as_2d(av, "matmul")?;
        let b2 = as_2d(bv, "matmul")?;
        if a2.shape()[1] != b2.shape()[0] {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let out = a2.dot(&b2).into_dyn();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Matmul(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() == bv.shape() {
            let out = av + bv;
            let rg = self.needs(a) || self.needs(b);
            return Ok(self.push(out, Op::Add(a, b), rg));
        }
        // Bias broadcast: (.., H) + (H,)
        if bv.ndim() == 1 && av.ndim() >= 1 && av.shape()[av.ndim() - 1] == bv.shape()[0] {
            let out = av + bv;
            let rg = self.needs(a) || self.needs(b);
            return Ok(self.push(out, Op::AddBias(a, b), rg));
        }
        Err(AdError::ShapeMismatch {
            op: "add",
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(AdError::ShapeMismatch {
                op: "multiply",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let out = av * bv;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a.0].value.mapv(f64::exp);
        let rg = self.needs(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a.0].value.mapv(f64::ln);
        let rg = self.needs(a);
        self.push(out, Op::Ln(a), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a.0].value.mapv(f64::tanh);
        let rg = self.needs(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let rg = self.needs(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Softmax along `axis`. Entries of `-inf` yield exact zeros, so additive
    /// masks give hard-zero probabilities. A lane with no finite entry is an
    /// error.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> AdResult<NodeId> {
        let av = &self.nodes[a.0].value;
        if axis >= av.ndim() {
            return Err(AdError::BadRank {
                op: "softmax",
                expected: axis + 1,
                got: av.shape().to_vec(),
            });
        }
        let mut out = av.clone();
        for mut lane in out.lanes_mut(Axis(axis)) {
            softmax_lane(lane.as_slice_mut().expect("contiguous lane"))?;
        }
        let rg = self.needs(a);
        Ok(self.push(out, Op::Softmax(a, axis), rg))
    }

    /// Numerically stable log-softmax of a 1-D vector. Masked (`-inf`)
    /// entries stay `-inf`; indexing them is the caller's bug.
    pub fn log_softmax(&mut self, a: NodeId) -> AdResult<NodeId> {
        let av = &self.nodes[a.0].value;
        let v = as_1d(av, "log_softmax")?;
        let lse = log_sum_exp(v.as_slice().unwrap())?;
        let out = v.mapv(|x| x - lse).into_dyn();
        let rg = self.needs(a);
        Ok(self.push(out, Op::LogSoftmax(a), rg))
    }

    /// Layer normalization over the last axis: `gain * (x - mean) / std + bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> AdResult<NodeId> {
        let xv = &self.nodes[x.0].value;
        let h = xv.shape()[xv.ndim() - 1];
        for (other, name) in [(gain, "gain"), (bias, "bias")] {
            let ov = &self.nodes[other.0].value;
            if ov.ndim() != 1 || ov.shape()[0] != h {
                let _ = name;
                return Err(AdError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: xv.shape().to_vec(),
                    rhs: ov.shape().to_vec(),
                });
            }
        }
        let gv = self.nodes[gain.0].value.clone();
        let bv = self.nodes[bias.0].value.clone();
        let mut out = xv.clone();
        for mut lane in out.lanes_mut(Axis(xv.ndim() - 1)) {
            let n = lane.len() as f64;
            let mean = lane.sum() / n;
            let var = lane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = (var + LAYER_NORM_EPS).sqrt();
            for (i, v) in lane.iter_mut().enumerate() {
                *v = gv[[i]] * ((*v - mean) / std) + bv[[i]];
            }
        }
        let rg = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(out, Op::LayerNorm(x, gain, bias), rg))
    }

    /// Gathers rows of `table` at `ids`, producing `(ids.len(), H)`.
    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[usize]) -> AdResult<NodeId> {
        let tv = as_2d(&self.nodes[table.0].value, "embedding_lookup")?;
        let vocab = tv.shape()[0];
        let h = tv.shape()[1];
        let mut out = ndarray::Array2::<f64>::zeros((ids.len(), h));
        for (r, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(AdError::IndexOutOfBounds {
                    op: "embedding_lookup",
                    index: id,
                    len: vocab,
                });
            }
            out.row_mut(r).assign(&tv.row(id));
        }
        let rg = self.needs(table);
        Ok(self.push(out.into_dyn(), Op::Embedding(table, ids.to_vec()), rg))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> AdResult<NodeId> {
        if parts.is_empty() {
            return Err(AdError::BadRank {
                op: "concat",
                expected: 1,
                got: vec![0],
            });
        }
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).map_err(|_| AdError::ShapeMismatch {
            op: "concat",
            lhs: self.nodes[parts[0].0].value.shape().to_vec(),
            rhs: self.nodes[parts[parts.len() - 1].0].value.shape().to_vec(),
        })?;
        let rg = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Contiguous range `[start, end)` along `axis`.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> AdResult<NodeId> {
        let av = &self.nodes[a.0].value;
        if axis >= av.ndim() || end > av.shape()[axis] || start > end {
            return Err(AdError::IndexOutOfBounds {
                op: "slice",
                index: end,
                len: if axis < av.ndim() { av.shape()[axis] } else { 0 },
            });
        }
        let out = av.slice_axis(Axis(axis), ndarray::Slice::from(start..end)).to_owned();
        let rg = self.needs(a);
        Ok(self.push(out, Op::Slice(a, axis, start, end), rg))
    }

    pub fn reduce_sum(&mut self, a: NodeId, axis: Option<usize>) -> AdResult<NodeId> {
        let av = &self.nodes[a.0].value;
        let out = match axis {
            None => ndarray::arr0(av.sum()).into_dyn(),
            Some(ax) => {
                if ax >= av.ndim() {
                    return Err(AdError::BadRank {
                        op: "reduce_sum",
                        expected: ax + 1,
                        got: av.shape().to_vec(),
                    });
                }
                av.sum_axis(Axis(ax))
            }
        };
        let rg = self.needs(a);
        Ok(self.push(out, Op::ReduceSum(a, axis), rg))
    }

    pub fn reduce_mean(&mut self, a: NodeId, axis: Option<usize>) -> AdResult<NodeId> {
        let av = &self.nodes[a.0].value;
        let out = match axis {
            None => ndarray::arr0(av.mean().unwrap_or(0.0)).into_dyn(),
            Some(ax) => {
                if ax >= av.ndim() {
                    return Err(AdError::BadRank {
                        op: "reduce_mean",
                        expected: ax + 1,
                        got: av.shape().to_vec(),
                    });
                }
                av.mean_axis(Axis(ax)).expect("non-empty axis")
            }
        };
        let rg = self.needs(a);
        Ok(self.push(out, Op::ReduceMean(a, axis), rg))
    }

    /// Negative log-likelihood of `target` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> AdResult<NodeId> {
        let lv = as_1d(&self.nodes[logits.0].value, "cross_entropy")?;
        if target >= lv.len() {
            return Err(AdError::IndexOutOfBounds {
                op: "cross_entropy",
                index: target,
                len: lv.len(),
            });
        }
        let lse = log_sum_exp(lv.as_slice().unwrap())?;
        let out = ndarray::arr0(lse - lv[target]).into_dyn();
        let rg = self.needs(logits);
        Ok(self.push(out, Op::CrossEntropy(logits, target), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> AdResult<NodeId> {
        let av = as_2d(&self.nodes[a.0].value, "transpose")?;
        let out = av.t().to_owned().into_dyn();
        let rg = self.needs(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> AdResult<NodeId> {
        let av = &self.nodes[a.0].value;
        let out = av
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .map_err(|_| AdError::ShapeMismatch {
                op: "reshape",
                lhs: av.shape().to_vec(),
                rhs: shape.to_vec(),
            })?;
        let rg = self.needs(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.nodes[a.0].value.mapv(|x| x * c);
        let rg = self.needs(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.nodes[a.0].value.mapv(|x| x + c);
        let rg = self.needs(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// Scalar element `a[i]` of a 1-D vector.
    pub fn pick(&mut self, a: NodeId, i: usize) -> AdResult<NodeId> {
        let av = as_1d(&self.nodes[a.0].value, "pick")?;
        if i >= av.len() {
            return Err(AdError::IndexOutOfBounds {
                op: "pick",
                index: i,
                len: av.len(),
            });
        }
        let out = ndarray::arr0(av[i]).into_dyn();
        let rg = self.needs(a);
        Ok(self.push(out, Op::Pick(a, i), rg))
    }

    /// Mean of the row block `[start, end)` of a 2-D node, as a `(1, H)` row.
    pub fn mean_rows(&mut self, a: NodeId, start: usize, end: usize) -> AdResult<NodeId> {
        let sliced = self.slice(a, 0, start, end)?;
        let mean = self.reduce_mean(sliced, Some(0))?;
        let h = self.nodes[mean.0].value.shape()[0];
        self.reshape(mean, &[1, h])
    }

    /// Runs reverse accumulation from a scalar `loss` and returns gradients
    /// for every named parameter leaf (zeros where no path reached the leaf).
    /// Consumes the tape.
    pub fn backward(self, loss: NodeId) -> AdResult<Gradients> {
        let nodes = self.nodes;
        if nodes[loss.0].value.ndim() != 0 {
            return Err(AdError::NonScalarLoss(nodes[loss.0].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ndarray::arr0(1.0).into_dyn());

        for idx in (0..nodes.len()).rev() {
            if !nodes[idx].requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            backprop_node(&nodes, idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut out = Gradients::default();
        for (idx, node) in nodes.iter().enumerate() {
            if let Some(name) = &node.param_name {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| ArrayD::zeros(node.value.raw_dim()));
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }
}

/// Parameter leaves bound from a [`ParameterStore`].
#[derive(Default)]
pub struct BoundStore {
    ids: std::collections::BTreeMap<String, NodeId>,
}

impl BoundStore {
    pub fn get(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter not bound: {name}"))
    }
}

fn backprop_node(nodes: &[Node], idx: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
    let add_to = |grads: &mut [Option<ArrayD<f64>>], id: NodeId, delta: ArrayD<f64>| {
        if !nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => *acc += &delta,
            slot @ None => *slot = Some(delta),
        }
    };

    match &nodes[idx].op {
        Op::Leaf => {}
        Op::Matmul(a, b) => {
            let av = nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
            let bv = nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
            let gv = g.view().into_dimensionality::<Ix2>().unwrap();
            add_to(grads, *a, gv.dot(&bv.t()).into_dyn());
            add_to(grads, *b, av.t().dot(&gv).into_dyn());
        }
        Op::Add(a, b) => {
            add_to(grads, *a, g.clone());
            add_to(grads, *b, g.clone());
        }
        Op::AddBias(a, b) => {
            add_to(grads, *a, g.clone());
            let h = nodes[b.0].value.shape()[0];
            let flat = g.view().into_shape_with_order((g.len() / h, h)).unwrap();
            add_to(grads, *b, flat.sum_axis(Axis(0)).into_dyn());
        }
        Op::Mul(a, b) => {
            add_to(grads, *a, g * &nodes[b.0].value);
            add_to(grads, *b, g * &nodes[a.0].value);
        }
        Op::Exp(a) => add_to(grads, *a, g * &nodes[idx].value),
        Op::Ln(a) => add_to(grads, *a, g / &nodes[a.0].value),
        Op::Tanh(a) => {
            let y = &nodes[idx].value;
            add_to(grads, *a, g * &y.mapv(|t| 1.0 - t * t));
        }
        Op::Relu(a) => {
            let mask = nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
            add_to(grads, *a, g * &mask);
        }
        Op::Softmax(a, axis) => {
            // dx = p * (g - sum(g * p)) lane-wise.
            let p = &nodes[idx].value;
            let gp = g * p;
            let sums = gp.sum_axis(Axis(*axis));
            let mut dx = ArrayD::<f64>::zeros(p.raw_dim());
            let mut sum_iter = sums.iter();
            for ((mut out_lane, p_lane), gp_lane) in dx
                .lanes_mut(Axis(*axis))
                .into_iter()
                .zip(p.lanes(Axis(*axis)))
                .zip(gp.lanes(Axis(*axis)))
            {
                let s = *sum_iter.next().unwrap();
                for (o, (pv, gpv)) in out_lane.iter_mut().zip(p_lane.iter().zip(gp_lane.iter())) {
                    *o = gpv - pv * s;
                }
            }
            add_to(grads, *a, dx);
        }
        Op::LogSoftmax(a) => {
            let y = nodes[idx].value.view().into_dimensionality::<Ix1>().unwrap();
            let gv = g.view().into_dimensionality::<Ix1>().unwrap();
            let gsum = gv.sum();
            let p = y.mapv(|ly| if ly == f64::NEG_INFINITY { 0.0 } else { ly.exp() });
            let dx = (&gv - &(&p * gsum)).into_dyn();
            add_to(grads, *a, dx);
        }
        Op::LayerNorm(x, gain, bias) => {
            let xv = &nodes[x.0].value;
            let gv = nodes[gain.0].value.view().into_dimensionality::<Ix1>().unwrap();
            let h = xv.shape()[xv.ndim() - 1];
            let rows = xv.len() / h;
            let x2 = xv.view().into_shape_with_order((rows, h)).unwrap();
            let g2 = g.view().into_shape_with_order((rows, h)).unwrap();
            let mut dx = ndarray::Array2::<f64>::zeros((rows, h));
            let mut dgain = ndarray::Array1::<f64>::zeros(h);
            let mut dbias = ndarray::Array1::<f64>::zeros(h);
            for r in 0..rows {
                let xr = x2.row(r);
                let gr = g2.row(r);
                let n = h as f64;
                let mean = xr.sum() / n;
                let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let std = (var + LAYER_NORM_EPS).sqrt();
                let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) / std).collect();
                let dxhat: Vec<f64> = gr.iter().zip(gv.iter()).map(|(g, gn)| g * gn).collect();
                let mean_dxhat = dxhat.iter().sum::<f64>() / n;
                let mean_dxhat_xhat =
                    dxhat.iter().zip(&xhat).map(|(d, xh)| d * xh).sum::<f64>() / n;
                for c in 0..h {
                    dx[[r, c]] = (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat) / std;
                    dgain[c] += gr[c] * xhat[c];
                    dbias[c] += gr[c];
                }
            }
            add_to(grads, *x, dx.into_shape_with_order(xv.raw_dim()).unwrap().into_dyn());
            add_to(grads, *gain, dgain.into_dyn());
            add_to(grads, *bias, dbias.into_dyn());
        }
        Op::Embedding(table, ids) => {
            let tv = &nodes[table.0].value;
            let mut dt = ArrayD::<f64>::zeros(tv.raw_dim());
            let h = tv.shape()[1];
            let g2 = g.view().into_shape_with_order((ids.len(), h)).unwrap();
            let mut dt2 = dt.view_mut().into_shape_with_order((tv.shape()[0], h)).unwrap();
            for (r, &id) in ids.iter().enumerate() {
                let mut row = dt2.row_mut(id);
                row += &g2.row(r);
            }
            drop(dt2);
            add_to(grads, *table, dt);
        }
        Op::Concat(parts, axis) => {
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].value.shape()[*axis];
                let part_g = g
                    .slice_axis(Axis(*axis), ndarray::Slice::from(offset..offset + len))
                    .to_owned();
                add_to(grads, *p, part_g);
                offset += len;
            }
        }
        Op::Slice(a, axis, start, end) => {
            let av = &nodes[a.0].value;
            let mut da = ArrayD::<f64>::zeros(av.raw_dim());
            da.slice_axis_mut(Axis(*axis), ndarray::Slice::from(*start..*end))
                .assign(g);
            add_to(grads, *a, da);
        }
        Op::ReduceSum(a, axis) => {
            let av = &nodes[a.0].value;
            let da = match axis {
                None => ArrayD::from_elem(av.raw_dim(), g.iter().copied().next().unwrap()),
                Some(ax) => broadcast_along_axis(av, g, *ax),
            };
            add_to(grads, *a, da);
        }
        Op::ReduceMean(a, axis) => {
            let av = &nodes[a.0].value;
            let da = match axis {
                None => {
                    let c = 1.0 / av.len() as f64;
                    ArrayD::from_elem(av.raw_dim(), g.iter().copied().next().unwrap() * c)
                }
                Some(ax) => {
                    let c = 1.0 / av.shape()[*ax] as f64;
                    let scaled = g.mapv(|v| v * c);
                    broadcast_along_axis(av, &scaled, *ax)
                }
            };
            add_to(grads, *a, da);
        }
        Op::CrossEntropy(logits, target) => {
            let lv = nodes[logits.0].value.view().into_dimensionality::<Ix1>().unwrap();
            let gs = g.iter().copied().next().unwrap();
            let lse = log_sum_exp(lv.as_slice().unwrap()).expect("finite logits");
            let mut dl = lv.mapv(|x| (x - lse).exp() * gs);
            dl[*target] -= gs;
            add_to(grads, *logits, dl.into_dyn());
        }
        Op::Transpose(a) => {
            let gv = g.view().into_dimensionality::<Ix2>().unwrap();
            add_to(grads, *a, gv.t().to_owned().into_dyn());
        }
        Op::Reshape(a) => {
            let av = &nodes[a.0].value;
            let da = g.clone().into_shape_with_order(av.raw_dim()).unwrap();
            add_to(grads, *a, da);
        }
        Op::Scale(a, c) => add_to(grads, *a, g.mapv(|v| v * c)),
        Op::AddScalar(a) => add_to(grads, *a, g.clone()),
        Op::Pick(a, i) => {
            let av = &nodes[a.0].value;
            let mut da = ArrayD::<f64>::zeros(av.raw_dim());
            let gs = g.iter().copied().next().unwrap();
            da[[*i]] = gs;
            add_to(grads, *a, da);
        }
    }
}

/// Repeats `reduced` (shape = input minus `axis`) along `axis` to match `like`.
fn broadcast_along_axis(like: &ArrayD<f64>, reduced: &ArrayD<f64>, axis: usize) -> ArrayD<f64> {
    let mut out = ArrayD::<f64>::zeros(like.raw_dim());
    for (mut lane, &r) in out.lanes_mut(Axis(axis)).into_iter().zip(reduced.iter()) {
        lane.fill(r);
    }
    out
}

fn softmax_lane(lane: &mut [f64]) -> AdResult<()> {
    let max = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(AdError::EmptySoftmaxLane);
    }
    let mut sum = 0.0;
    for v in lane.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in lane.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

fn log_sum_exp(xs: &[f64]) -> AdResult<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(AdError::EmptySoftmaxLane);
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

fn as_2d<'a>(
    v: &'a ArrayD<f64>,
    op: &'static str,
) -> AdResult<ndarray::ArrayView2<'a, f64>> {
    v.view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| AdError::BadRank {
            op,
            expected: 2,
            got: v.shape().to_vec(),
        })
}

fn as_1d<'a>(
    v: &'a ArrayD<f64>,
    op: &'static str,
) -> AdResult<ndarray::ArrayView1<'a, f64>> {
    v.view()
        .into_dimensionality::<Ix1>()
        .map_err(|_| AdError::BadRank {
            op,
            expected: 1,
            got: v.shape().to_vec(),
        })
}
