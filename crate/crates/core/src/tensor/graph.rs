//! Fixed operation graph with reverse-mode differentiation.
//!
//! A graph is built once as a topologically ordered list of nodes (each node
//! may only reference earlier nodes), then run with [`OpGraph::forward`],
//! which caches whatever each backward rule needs, and differentiated with
//! [`OpGraph::backward`]. Parameters are referenced by name and resolved
//! against a [`ParamStore`] at forward time.

use std::collections::BTreeMap;

use super::{
    batchnorm2d, batchnorm2d_backward, conv2d_3x3, conv2d_3x3_backward, gelu, gelu_backward,
    linear, linear_backward, rows_cols, BnCache, BnMode, ParamStore, Tensor,
};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::real::Real;
use crate::stss::{stss_backward_raw, stss_flops, stss_forward_raw, SimilarityPolicy, WindowSpec};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl From<Mode> for BnMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input(usize),
    Linear { x: NodeId, w: String, b: String },
    Conv3x3 { x: NodeId, w: String, b: String },
    BatchNorm { x: NodeId, prefix: String },
    Gelu(NodeId),
    Add(NodeId, NodeId),
    /// Keep the first `keep` axes, replace the rest with `tail`.
    Reshape { x: NodeId, keep: usize, tail: Vec<usize> },
    Permute { x: NodeId, perm: Vec<usize> },
    /// Concatenate along the last axis.
    Concat(NodeId, NodeId),
    /// Mean over the trailing `count` axes.
    MeanTrailing { x: NodeId, count: usize },
    /// Mean over every axis but the last.
    MeanRows(NodeId),
    Stss { x: NodeId, window: WindowSpec, policy: SimilarityPolicy },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) => vec![],
            Op::Linear { x, .. }
            | Op::Conv3x3 { x, .. }
            | Op::BatchNorm { x, .. }
            | Op::Reshape { x, .. }
            | Op::Permute { x, .. }
            | Op::MeanTrailing { x, .. }
            | Op::Stss { x, .. } => vec![*x],
            Op::Gelu(x) | Op::MeanRows(x) => vec![*x],
            Op::Add(a, b) | Op::Concat(a, b) => vec![*a, *b],
        }
    }
}

/// Per-node state captured by the forward pass.
#[derive(Debug, Clone)]
enum Saved<T> {
    None,
    /// Parameter values used (weights, gamma) for the backward rule.
    Params(Vec<Tensor<T>>),
    Bn(Box<BnCache<T>>, Tensor<T>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    label: Option<String>,
}

/// Gradients produced by [`OpGraph::backward`].
#[derive(Debug, Clone)]
pub struct Backward<T> {
    /// One gradient per input slot.
    pub inputs: Vec<Tensor<T>>,
    /// Gradients of trainable parameters referenced by the graph.
    pub params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Backward<T> {
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (name, g) in &self.params {
            store.accumulate_grad(name, g)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct OpGraph<T> {
    nodes: Vec<Node>,
    num_inputs: usize,
    output: Option<NodeId>,
    // forward state
    values: Vec<Tensor<T>>,
    saved: Vec<Saved<T>>,
    flops: Vec<u64>,
    running: Vec<(String, Tensor<T>)>,
    exec: Exec,
}

impl<T: Real> Default for OpGraph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> OpGraph<T> {
    pub fn new() -> Self {
        OpGraph {
            nodes: Vec::new(),
            num_inputs: 0,
            output: None,
            values: Vec::new(),
            saved: Vec::new(),
            flops: Vec::new(),
            running: Vec::new(),
            exec: Exec::Sequential,
        }
    }

    fn push(&mut self, op: Op) -> NodeId {
        debug_assert!(op.inputs().iter().all(|&i| i < self.nodes.len()));
        self.values.clear();
        self.nodes.push(Node { op, label: None });
        self.nodes.len() - 1
    }

    pub fn input(&mut self) -> NodeId {
        let slot = self.num_inputs;
        self.num_inputs += 1;
        self.push(Op::Input(slot))
    }

    /// Uses parameters `{prefix}.w` (`[cin, cout]`) and `{prefix}.b`.
    pub fn linear(&mut self, x: NodeId, prefix: &str) -> NodeId {
        self.push(Op::Linear {
            x,
            w: format!("{prefix}.w"),
            b: format!("{prefix}.b"),
        })
    }

    /// Uses parameters `{prefix}.w` (`[3, 3, cin, cout]`) and `{prefix}.b`.
    pub fn conv3x3(&mut self, x: NodeId, prefix: &str) -> NodeId {
        self.push(Op::Conv3x3 {
            x,
            w: format!("{prefix}.w"),
            b: format!("{prefix}.b"),
        })
    }

    /// Uses `{prefix}.gamma`, `.beta`, `.rmean`, `.rvar`.
    pub fn batchnorm(&mut self, x: NodeId, prefix: &str) -> NodeId {
        self.push(Op::BatchNorm {
            x,
            prefix: prefix.to_string(),
        })
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Gelu(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn reshape(&mut self, x: NodeId, keep: usize, tail: &[usize]) -> NodeId {
        self.push(Op::Reshape {
            x,
            keep,
            tail: tail.to_vec(),
        })
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> NodeId {
        self.push(Op::Permute {
            x,
            perm: perm.to_vec(),
        })
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Concat(a, b))
    }

    pub fn mean_trailing(&mut self, x: NodeId, count: usize) -> NodeId {
        self.push(Op::MeanTrailing { x, count })
    }

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        self.push(Op::MeanRows(x))
    }

    pub fn stss(&mut self, x: NodeId, window: WindowSpec, policy: SimilarityPolicy) -> NodeId {
        self.push(Op::Stss { x, window, policy })
    }

    /// Attaches a name to a node for later lookup with [`OpGraph::find`].
    pub fn label(&mut self, id: NodeId, label: impl Into<String>) {
        self.nodes[id].label = Some(label.into());
    }

    pub fn find(&self, label: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.label.as_deref() == Some(label))
    }

    pub fn set_output(&mut self, id: NodeId) {
        assert!(id < self.nodes.len());
        self.output = Some(id);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output.or_else(|| self.nodes.len().checked_sub(1))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_inputs(&self) -> usize {
        self.num_inputs
    }

    /// Cached forward value of a node.
    pub fn value(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.values.get(id)
    }

    /// Names of every parameter the graph reads.
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match &n.op {
                Op::Linear { w, b, .. } | Op::Conv3x3 { w, b, .. } => {
                    out.push(w.clone());
                    out.push(b.clone());
                }
                Op::BatchNorm { prefix, .. } => {
                    for s in ["gamma", "beta", "rmean", "rvar"] {
                        out.push(format!("{prefix}.{s}"));
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Floating point operations of the last forward pass.
    pub fn flops(&self) -> u64 {
        self.flops.iter().sum()
    }

    /// Batch-norm running statistics computed by the last train-mode pass.
    pub fn running_updates(&self) -> &[(String, Tensor<T>)] {
        &self.running
    }

    pub fn commit_running_stats(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (name, v) in &self.running {
            store.set_value(name, v.clone())?;
        }
        Ok(())
    }

    /// Evaluates every node, caching activations for [`OpGraph::backward`].
    pub fn forward(
        &mut self,
        inputs: &[Tensor<T>],
        params: &ParamStore<T>,
        mode: Mode,
        exec: Exec,
    ) -> Result<Tensor<T>> {
        if inputs.len() != self.num_inputs {
            return Err(Error::Input(format!(
                "graph expects {} inputs, got {}",
                self.num_inputs,
                inputs.len()
            )));
        }
        let out_id = self
            .output()
            .ok_or_else(|| Error::State("forward on an empty graph".into()))?;
        self.values.clear();
        self.saved.clear();
        self.flops.clear();
        self.running.clear();
        self.exec = exec;
        for id in 0..self.nodes.len() {
            let (value, saved, flops) = self.eval_node(id, inputs, params, mode, exec)?;
            if !value.all_finite() {
                return Err(Error::State(format!(
                    "non-finite activation at node {id} ({:?})",
                    self.nodes[id].op
                )));
            }
            self.values.push(value);
            self.saved.push(saved);
            self.flops.push(flops);
        }
        Ok(self.values[out_id].clone())
    }

    fn eval_node(
        &mut self,
        id: NodeId,
        inputs: &[Tensor<T>],
        params: &ParamStore<T>,
        mode: Mode,
        exec: Exec,
    ) -> Result<(Tensor<T>, Saved<T>, u64)> {
        let v = &self.values;
        Ok(match &self.nodes[id].op {
            Op::Input(slot) => (inputs[*slot].clone(), Saved::None, 0),
            Op::Linear { x, w, b } => {
                let (wt, bt) = (params.value(w)?, params.value(b)?);
                let y = linear(&v[*x], wt, bt, exec)?;
                let flops = 2 * (v[*x].len() * wt.shape()[1]) as u64;
                (y, Saved::Params(vec![wt.clone()]), flops)
            }
            Op::Conv3x3 { x, w, b } => {
                let (wt, bt) = (params.value(w)?, params.value(b)?);
                let y = conv2d_3x3(&v[*x], wt, bt, exec)?;
                let flops = 2 * 9 * (v[*x].len() * wt.shape()[3]) as u64;
                (y, Saved::Params(vec![wt.clone()]), flops)
            }
            Op::BatchNorm { x, prefix } => {
                let p = |s: &str| params.value(&format!("{prefix}.{s}"));
                let (gamma, beta, rmean, rvar) = (p("gamma")?, p("beta")?, p("rmean")?, p("rvar")?);
                let (y, cache) = batchnorm2d(&v[*x], gamma, beta, rmean, rvar, mode.into())?;
                if mode == Mode::Train {
                    let (m, s) = cache.updated_running(rmean, rvar);
                    self.running.push((format!("{prefix}.rmean"), m));
                    self.running.push((format!("{prefix}.rvar"), s));
                }
                let flops = 4 * v[*x].len() as u64;
                (y, Saved::Bn(Box::new(cache), gamma.clone()), flops)
            }
            Op::Gelu(x) => (gelu(&v[*x]), Saved::None, 8 * v[*x].len() as u64),
            Op::Add(a, b) => (v[*a].add(&v[*b])?, Saved::None, v[*a].len() as u64),
            Op::Reshape { x, keep, tail } => {
                let src = &v[*x];
                if *keep > src.rank() {
                    return Err(Error::dim("reshape", src.shape(), tail));
                }
                let mut shape = src.shape()[..*keep].to_vec();
                shape.extend_from_slice(tail);
                (src.clone().reshape(&shape)?, Saved::None, 0)
            }
            Op::Permute { x, perm } => (v[*x].permute(perm)?, Saved::None, 0),
            Op::Concat(a, b) => (concat_last(&v[*a], &v[*b])?, Saved::None, 0),
            Op::MeanTrailing { x, count } => {
                let src = &v[*x];
                if *count == 0 || *count >= src.rank() {
                    return Err(Error::dim("mean_trailing", src.shape(), &[*count]));
                }
                let keep = src.rank() - count;
                let k: usize = src.shape()[keep..].iter().product();
                let inv = T::of(1.0 / k as f64);
                let data = src.data().chunks(k).map(|c| c.iter().copied().sum::<T>() * inv).collect();
                (Tensor::new(&src.shape()[..keep], data)?, Saved::None, src.len() as u64)
            }
            Op::MeanRows(x) => {
                let src = &v[*x];
                let (rows, c) = rows_cols(src.shape());
                let mut acc = vec![0.0f64; c];
                for row in src.data().chunks(c) {
                    for (a, r) in acc.iter_mut().zip(row) {
                        *a += r.f64();
                    }
                }
                let data = acc.iter().map(|a| T::of(a / rows as f64)).collect();
                (Tensor::new(&[c], data)?, Saved::None, src.len() as u64)
            }
            Op::Stss { x, window, policy } => {
                let y = stss_forward_raw(&v[*x], *window, *policy, exec)?;
                (y, Saved::None, stss_flops(v[*x].shape(), *window))
            }
        })
    }

    /// Reverse-mode pass from `loss_grad` (the gradient of the loss with
    /// respect to the output node). Nodes are visited in exact reverse
    /// order; fan-out gradients are summed.
    pub fn backward(&self, loss_grad: &Tensor<T>, params: &ParamStore<T>) -> Result<Backward<T>> {
        if self.values.len() != self.nodes.len() || self.nodes.is_empty() {
            return Err(Error::State("backward called before forward".into()));
        }
        let out_id = self.output().expect("non-empty");
        if loss_grad.shape() != self.values[out_id].shape() {
            return Err(Error::dim("backward loss_grad", loss_grad.shape(), self.values[out_id].shape()));
        }
        let exec = self.exec;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[out_id] = Some(loss_grad.clone());
        let mut inputs: Vec<Option<Tensor<T>>> = vec![None; self.num_inputs];
        let mut pgrads: BTreeMap<String, Tensor<T>> = BTreeMap::new();

        fn acc<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
            match slot {
                Some(s) => s.add_assign(&g),
                None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }
        let mut pacc = |name: &str, g: Tensor<T>| -> Result<()> {
            if params.entry(name)?.trainable {
                match pgrads.get_mut(name) {
                    Some(s) => s.add_assign(&g)?,
                    None => {
                        pgrads.insert(name.to_string(), g);
                    }
                }
            }
            Ok(())
        };

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let v = &self.values;
            match (&self.nodes[id].op, &self.saved[id]) {
                (Op::Input(slot), _) => acc(&mut inputs[*slot], g)?,
                (Op::Linear { x, w, b }, Saved::Params(p)) => {
                    let (dx, dw, db) = linear_backward(&v[*x], &p[0], &g, exec)?;
                    pacc(w, dw)?;
                    pacc(b, db)?;
                    acc(&mut grads[*x], dx)?;
                }
                (Op::Conv3x3 { x, w, b }, Saved::Params(p)) => {
                    let (dx, dw, db) = conv2d_3x3_backward(&v[*x], &p[0], &g, exec)?;
                    pacc(w, dw)?;
                    pacc(b, db)?;
                    acc(&mut grads[*x], dx)?;
                }
                (Op::BatchNorm { x, prefix }, Saved::Bn(cache, gamma)) => {
                    let (dx, dgamma, dbeta) = batchnorm2d_backward(cache, gamma, &g)?;
                    pacc(&format!("{prefix}.gamma"), dgamma)?;
                    pacc(&format!("{prefix}.beta"), dbeta)?;
                    acc(&mut grads[*x], dx)?;
                }
                (Op::Gelu(x), _) => {
                    let dx = gelu_backward(&v[*x], &g);
                    acc(&mut grads[*x], dx)?;
                }
                (Op::Add(a, b), _) => {
                    acc(&mut grads[*b], g.clone())?;
                    acc(&mut grads[*a], g)?;
                }
                (Op::Reshape { x, .. }, _) => {
                    let dx = g.reshape(v[*x].shape())?;
                    acc(&mut grads[*x], dx)?;
                }
                (Op::Permute { x, perm }, _) => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    acc(&mut grads[*x], g.permute(&inv)?)?;
                }
                (Op::Concat(a, b), _) => {
                    let (ca, cb) = (v[*a].last_dim(), v[*b].last_dim());
                    let (mut ga, mut gb) = (Vec::with_capacity(v[*a].len()), Vec::with_capacity(v[*b].len()));
                    for row in g.data().chunks(ca + cb) {
                        ga.extend_from_slice(&row[..ca]);
                        gb.extend_from_slice(&row[ca..]);
                    }
                    acc(&mut grads[*b], Tensor::new(v[*b].shape(), gb)?)?;
                    acc(&mut grads[*a], Tensor::new(v[*a].shape(), ga)?)?;
                }
                (Op::MeanTrailing { x, .. }, _) => {
                    let k = v[*x].len() / g.len();
                    let inv = T::of(1.0 / k as f64);
                    let data = g.data().iter().flat_map(|&d| std::iter::repeat_n(d * inv, k)).collect();
                    acc(&mut grads[*x], Tensor::new(v[*x].shape(), data)?)?;
                }
                (Op::MeanRows(x), _) => {
                    let (rows, _) = rows_cols(v[*x].shape());
                    let inv = T::of(1.0 / rows as f64);
                    let row: Vec<T> = g.data().iter().map(|&d| d * inv).collect();
                    let data = (0..rows).flat_map(|_| row.iter().copied()).collect();
                    acc(&mut grads[*x], Tensor::new(v[*x].shape(), data)?)?;
                }
                (Op::Stss { x, window, policy }, _) => {
                    let dx = stss_backward_raw(&v[*x], *window, *policy, &g, exec)?;
                    acc(&mut grads[*x], dx)?;
                }
                (op, _) => unreachable!("missing saved state for {op:?}"),
            }
        }
        let inputs = inputs
            .into_iter()
            .enumerate()
            .map(|(slot, g)| {
                g.unwrap_or_else(|| {
                    let id = self
                        .nodes
                        .iter()
                        .position(|n| matches!(n.op, Op::Input(s) if s == slot))
                        .expect("input node");
                    Tensor::zeros(self.values[id].shape())
                })
            })
            .collect();
        Ok(Backward { inputs, params: pgrads })
    }
}

fn concat_last<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ra, ca) = rows_cols(a.shape());
    let (rb, cb) = rows_cols(b.shape());
    if ra != rb || a.shape()[..a.rank() - 1] != b.shape()[..b.rank() - 1] {
        return Err(Error::dim("concat", a.shape(), b.shape()));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for (x, y) in a.data().chunks(ca).zip(b.data().chunks(cb)) {
        data.extend_from_slice(x);
        data.extend_from_slice(y);
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = ca + cb;
    Tensor::new(&shape, data)
}
