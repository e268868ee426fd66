//! Operation tape and reverse-mode traversal.
//!
//! Each op declares what its backward reads: its inputs, its own output, or
//! nothing. A node's output is kept on the tape only when its own backward
//! or some consumer's backward needs it; everything else is freed as soon
//! as the forward code drops its handle. The traversal walks nodes in
//! reverse record order and drops a node's gradient and retained output as
//! soon as the node itself has been processed: all of its consumers come
//! later in record order, so nothing can ask for them again.

use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{ParamId, ParamStore, Shape, Tensor};
use crate::error::{Error, Result};

/// What a backward closure reads besides the incoming gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Saved {
    Nothing,
    /// The values of all inputs.
    Inputs,
    /// The node's own output.
    Output,
}

/// Backward closure: receives (and owns) the gradient w.r.t. the node
/// output and returns one optional gradient per recorded input, in input
/// order.
pub type BackwardFn = Box<dyn Fn(&mut BackwardCtx<'_>, Tensor) -> Result<Vec<Option<Tensor>>>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// A value flowing through a forward pass, optionally tracked by a tape.
#[derive(Clone)]
pub struct Var {
    tape: u64,
    node: Option<usize>,
    value: Rc<Tensor>,
}

impl Var {
    /// Untracked value, e.g. the result of an inference-mode op.
    pub fn constant(value: Tensor) -> Self {
        Var {
            tape: 0,
            node: None,
            value: Rc::new(value),
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node.map(NodeId)
    }

    /// Takes the tensor out, copying only if it is still shared.
    pub fn into_tensor(self) -> Tensor {
        Rc::try_unwrap(self.value).unwrap_or_else(|rc| (*rc).clone())
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("node", &self.node)
            .field("shape", &self.shape())
            .finish()
    }
}

struct Node {
    op: &'static str,
    inputs: Vec<usize>,
    shape: Shape,
    saved: Option<Rc<Tensor>>,
    reads_output: bool,
    leaf: bool,
    requires_grad: bool,
    params: Vec<ParamId>,
    backward: Option<BackwardFn>,
}

/// Static description of a recorded node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeInfo {
    pub op: &'static str,
    pub inputs: Vec<NodeId>,
    pub shape: Shape,
    pub params: Vec<ParamId>,
    pub leaf: bool,
    pub requires_grad: bool,
    /// Whether the output is currently held for backward.
    pub retained: bool,
}

/// Read access to retained values during a backward call.
pub struct BackwardCtx<'a> {
    nodes: &'a [Node],
    node: usize,
    output: Option<Rc<Tensor>>,
    params: &'a mut ParamStore,
}

impl<'a> BackwardCtx<'a> {
    /// Retained value of the `k`-th input.
    pub fn input(&self, k: usize) -> Result<&'a Tensor> {
        let nodes = self.nodes;
        let j = nodes[self.node].inputs[k];
        nodes[j].saved.as_deref().ok_or(Error::MissingActivation {
            node: j,
            op: nodes[j].op,
        })
    }

    fn missing_output(&self) -> Error {
        Error::MissingActivation {
            node: self.node,
            op: self.nodes[self.node].op,
        }
    }

    /// Retained output of the node being differentiated.
    pub fn output(&self) -> Result<&Tensor> {
        self.output.as_deref().ok_or_else(|| self.missing_output())
    }

    /// Moves the retained output out, copying only if something else still
    /// holds it.
    pub fn take_output(&mut self) -> Result<Tensor> {
        let rc = self.output.take().ok_or_else(|| self.missing_output())?;
        Ok(Rc::try_unwrap(rc).unwrap_or_else(|rc| (*rc).clone()))
    }

    pub fn needs_input_grad(&self, k: usize) -> bool {
        self.nodes[self.nodes[self.node].inputs[k]].requires_grad
    }

    pub fn params(&mut self) -> &mut ParamStore {
        self.params
    }
}

/// Gradients of tape leaves that were created with `requires_grad`.
pub struct Gradients {
    tape: u64,
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    fn key(&self, var: &Var) -> Option<usize> {
        var.node.filter(|_| var.tape == self.tape)
    }

    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        self.key(var).and_then(|n| self.leaves.get(&n))
    }

    pub fn take(&mut self, var: &Var) -> Option<Tensor> {
        self.key(var).and_then(|n| self.leaves.remove(&n))
    }
}

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static FAULT: Cell<Option<&'static str>> = const { Cell::new(None) };
}

/// Test hook: while set, the backward pass of every node whose op name
/// equals `op` returns doubled input gradients.
pub fn inject_fault(op: Option<&'static str>) {
    FAULT.with(|f| f.set(op));
}

pub struct Tape {
    id: u64,
    recording: bool,
    nodes: Vec<Node>,
    retained_bytes: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records operations for backpropagation.
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            recording: true,
            nodes: Vec::new(),
            retained_bytes: 0,
        }
    }

    /// A tape that records nothing; values are freed as soon as the
    /// caller drops them.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes of non-leaf outputs currently held for backward.
    pub fn retained_bytes(&self) -> usize {
        self.retained_bytes
    }

    /// Recomputes [`retained_bytes`](Self::retained_bytes) from the nodes.
    pub fn recount_retained_bytes(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !n.leaf)
            .filter_map(|n| n.saved.as_ref())
            .map(|t| t.bytes())
            .sum()
    }

    pub fn op_name(&self, node: NodeId) -> &'static str {
        self.nodes[node.0].op
    }

    /// Node descriptions in record order.
    pub fn nodes(&self) -> Vec<NodeInfo> {
        self.nodes
            .iter()
            .map(|n| NodeInfo {
                op: n.op,
                inputs: n.inputs.iter().copied().map(NodeId).collect(),
                shape: n.shape,
                params: n.params.clone(),
                leaf: n.leaf,
                requires_grad: n.requires_grad,
                retained: n.saved.is_some(),
            })
            .collect()
    }

    /// Op names in record order.
    pub fn ops(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op).collect()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let value = Rc::new(value);
        if !self.recording {
            return Var {
                tape: self.id,
                node: None,
                value,
            };
        }
        let idx = self.push_leaf(value.clone(), requires_grad);
        Var {
            tape: self.id,
            node: Some(idx),
            value,
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push_leaf(&mut self, value: Rc<Tensor>, requires_grad: bool) -> usize {
        self.nodes.push(Node {
            op: "leaf",
            inputs: Vec::new(),
            shape: value.shape(),
            saved: Some(value),
            reads_output: false,
            leaf: true,
            requires_grad,
            params: Vec::new(),
            backward: None,
        });
        self.nodes.len() - 1
    }

    fn node_for(&mut self, var: &Var) -> usize {
        match var.node {
            Some(n) if var.tape == self.id => n,
            _ => self.push_leaf(var.value.clone(), false),
        }
    }

    /// Records an executed operation. `saved` declares which values its
    /// backward reads; those are kept until the node has been differentiated.
    pub fn record(
        &mut self,
        op: &'static str,
        inputs: &[&Var],
        output: Tensor,
        params: &[ParamId],
        saved: Saved,
        backward: BackwardFn,
    ) -> Var {
        let value = Rc::new(output);
        if !self.recording {
            return Var {
                tape: self.id,
                node: None,
                value,
            };
        }
        let idx: Vec<usize> = inputs.iter().map(|v| self.node_for(v)).collect();
        if saved == Saved::Inputs {
            for (&j, v) in idx.iter().zip(inputs) {
                self.keep(j, &v.value);
            }
        }
        let requires_grad = !params.is_empty() || idx.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            inputs: idx,
            shape: value.shape(),
            saved: None,
            reads_output: saved == Saved::Output,
            leaf: false,
            requires_grad,
            params: params.to_vec(),
            backward: Some(backward),
        });
        let node = self.nodes.len() - 1;
        if saved == Saved::Output {
            self.keep(node, &value);
        }
        Var {
            tape: self.id,
            node: Some(node),
            value,
        }
    }

    fn keep(&mut self, node: usize, value: &Rc<Tensor>) {
        let n = &mut self.nodes[node];
        if n.saved.is_none() {
            n.saved = Some(value.clone());
            if !n.leaf {
                self.retained_bytes += value.bytes();
            }
        }
    }

    /// Drops a retained output ahead of the backward pass.
    pub fn release(&mut self, node: NodeId) {
        let n = &mut self.nodes[node.0];
        if let Some(t) = n.saved.take() {
            if !n.leaf {
                self.retained_bytes -= t.bytes();
            }
        }
    }

    /// Backpropagates from a scalar loss, accumulating parameter gradients
    /// into `params`. Returns gradients of leaves that require them.
    pub fn backward(&mut self, loss: &Var, params: &mut ParamStore) -> Result<Gradients> {
        if loss.shape().numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape()));
        }
        let seed = Tensor::full(loss.shape(), 1.0);
        self.backward_from(loss, seed, params)
    }

    /// Backpropagates `seed` as the gradient of `output`.
    pub fn backward_from(
        &mut self,
        output: &Var,
        seed: Tensor,
        params: &mut ParamStore,
    ) -> Result<Gradients> {
        match output.node {
            Some(n) if output.tape == self.id => self.backward_node(NodeId(n), seed, params),
            _ => Err(Error::Untracked),
        }
    }

    /// Like [`backward_from`](Self::backward_from), addressed by node, so
    /// the caller may drop its handle on the output first.
    pub fn backward_node(
        &mut self,
        node: NodeId,
        seed: Tensor,
        params: &mut ParamStore,
    ) -> Result<Gradients> {
        let root = node.0;
        if seed.shape() != self.nodes[root].shape {
            return Err(Error::shape(
                "backprop",
                self.nodes[root].shape,
                seed.shape(),
            ));
        }
        let fault = FAULT.with(Cell::get);
        let mut grads: Vec<Option<Tensor>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(seed);
        let mut out = Gradients {
            tape: self.id,
            leaves: HashMap::new(),
        };

        for i in (0..=root).rev() {
            let Some(grad) = grads[i].take() else {
                self.release(NodeId(i));
                continue;
            };
            if self.nodes[i].leaf {
                if self.nodes[i].requires_grad {
                    out.leaves.insert(i, grad);
                }
                continue;
            }
            if !self.nodes[i].requires_grad {
                self.release(NodeId(i));
                continue;
            }
            let f = self.nodes[i]
                .backward
                .take()
                .expect("non-leaf node without backward");
            // consumers are done, so the output is only needed if f reads it
            let output = self.nodes[i].saved.take();
            if let Some(t) = &output {
                self.retained_bytes -= t.bytes();
            }
            let output = output.filter(|_| self.nodes[i].reads_output);
            let mut input_grads = {
                let mut ctx = BackwardCtx {
                    nodes: &self.nodes,
                    node: i,
                    output,
                    params,
                };
                f(&mut ctx, grad)?
            };
            if fault == Some(self.nodes[i].op) {
                input_grads.iter_mut().flatten().for_each(|g| g.scale(2.0));
            }
            debug_assert_eq!(input_grads.len(), self.nodes[i].inputs.len());
            for (k, g) in input_grads.into_iter().enumerate() {
                let Some(g) = g else { continue };
                let j = self.nodes[i].inputs[k];
                if !self.nodes[j].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    g.shape(),
                    self.nodes[j].shape,
                    "gradient shape for {}",
                    self.nodes[j].op
                );
                grads[j] = Some(match grads[j].take() {
                    Some(mut acc) => {
                        acc.add_assign(&g);
                        acc
                    }
                    None => g,
                });
            }
            self.release(NodeId(i));
        }
        Ok(out)
    }
}
