//! Reverse-mode tape.
//!
//! Every differentiable op pushes a [`Node`] holding its parents and a
//! backward closure that captures whatever forward values the rule needs.
//! A tape built with [`Tape::inference`] records nothing: values live only
//! as long as the [`Var`] handles that own them.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maps the output gradient to one gradient per op input (`None` where an
/// input is not differentiable or receives nothing).
pub type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

pub(crate) struct Node {
    pub(crate) op: &'static str,
    pub(crate) inputs: Vec<Option<usize>>,
    pub(crate) backward: Option<BackwardFn>,
    pub(crate) label: Option<String>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that never records; ops only compute values.
    pub fn inference() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.leaf_arc(Arc::new(value), None)
    }

    /// Differentiable input carrying a label that [`Gradients::by_label`] can find.
    pub fn named_leaf(&self, name: &str, value: Tensor) -> Var<'_> {
        self.leaf_arc(Arc::new(value), Some(name.to_string()))
    }

    pub fn param(&self, p: &Param) -> Var<'_> {
        self.leaf_arc(Arc::clone(&p.value), Some(p.name.clone()))
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        Var {
            tape: self,
            id: None,
            value: Arc::new(value),
        }
    }

    fn leaf_arc(&self, value: Arc<Tensor>, label: Option<String>) -> Var<'_> {
        let id = self.recording.then(|| {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                op: "leaf",
                inputs: Vec::new(),
                backward: None,
                label,
            });
            nodes.len() - 1
        });
        Var { tape: self, id, value }
    }

    /// True when an op over `inputs` must be recorded.
    pub fn needs_grad(&self, inputs: &[&Var<'_>]) -> bool {
        self.recording && inputs.iter().any(|v| v.id.is_some())
    }

    /// Records an op. `backward` is only kept when some input is differentiable.
    pub fn record<'t>(
        &'t self,
        op: &'static str,
        inputs: &[&Var<'t>],
        value: Tensor,
        backward: impl Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'t> {
        debug_assert!(
            !inputs.iter().all(|v| v.value.all_finite()) || value.all_finite(),
            "{op} produced non-finite output from finite inputs"
        );
        let id = self.needs_grad(inputs).then(|| {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                op,
                inputs: inputs.iter().map(|v| v.id).collect(),
                backward: Some(Box::new(backward)),
                label: None,
            });
            nodes.len() - 1
        });
        Var {
            tape: self,
            id,
            value: Arc::new(value),
        }
    }

    /// Gradients of a scalar `loss` with respect to every leaf it depends on.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        if loss.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                "loss",
                format!("expected a scalar, got shape {:?}", loss.value.shape()),
            ));
        }
        self.backward_from(loss, Tensor::full(loss.value.shape().to_vec(), 1.0))
    }

    /// Propagates an explicit output gradient `seed` from `out`.
    pub fn backward_from(&self, out: &Var<'_>, seed: Tensor) -> Result<Gradients> {
        seed.expect_same_shape("backward", &out.value)?;
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root) = out.id else {
            return Ok(Gradients::new(grads, &nodes));
        };
        let order = topo_order(&nodes, root)?;
        grads[root] = Some(seed);
        for &id in order.iter().rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parts = backward(&g);
            debug_assert_eq!(parts.len(), node.inputs.len(), "{} backward arity", node.op);
            for (input, part) in node.inputs.iter().zip(parts) {
                if let (Some(pid), Some(part)) = (input, part) {
                    match &mut grads[*pid] {
                        Some(acc) => acc.add_assign(&part),
                        slot => *slot = Some(part),
                    }
                }
            }
        }
        Ok(Gradients::new(grads, &nodes))
    }

    #[cfg(test)]
    pub(crate) fn rewire_input_for_test(&self, node: usize, slot: usize, parent: usize) {
        self.nodes.borrow_mut()[node].inputs[slot] = Some(parent);
    }
}

/// Nodes reachable from `root`, parents before children. Errors on a cycle.
fn topo_order(nodes: &[Node], root: usize) -> Result<Vec<usize>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Open,
        Done,
    }
    let mut mark = vec![Mark::New; nodes.len()];
    let mut order = Vec::new();
    // (node, next input slot to visit)
    let mut stack = vec![(root, 0usize)];
    mark[root] = Mark::Open;
    while let Some((id, slot)) = stack.pop() {
        let inputs = &nodes[id].inputs;
        if slot < inputs.len() {
            stack.push((id, slot + 1));
            if let Some(p) = inputs[slot] {
                if p >= nodes.len() {
                    return Err(Error::invalid("backward", format!("node {id} references missing node {p}")));
                }
                match mark[p] {
                    Mark::Open => return Err(Error::TapeCycle(p)),
                    Mark::New => {
                        mark[p] = Mark::Open;
                        stack.push((p, 0));
                    }
                    Mark::Done => {}
                }
            }
        } else {
            mark[id] = Mark::Done;
            order.push(id);
        }
    }
    Ok(order)
}

/// Handle to a value, optionally attached to a recording tape.
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: Option<usize>,
    value: Arc<Tensor>,
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_arc(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> Option<usize> {
        self.id
    }

    pub fn into_tensor(self) -> Tensor {
        Arc::try_unwrap(self.value).unwrap_or_else(|a| (*a).clone())
    }
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{:?} {:?}", self.id, self.value)
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    by_label: HashMap<String, Vec<usize>>,
}

impl Gradients {
    fn new(mut grads: Vec<Option<Tensor>>, nodes: &[Node]) -> Self {
        let mut leaves = HashMap::new();
        let mut by_label: HashMap<String, Vec<usize>> = HashMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if node.backward.is_some() {
                continue;
            }
            if let Some(l) = &node.label {
                by_label.entry(l.clone()).or_default().push(id);
            }
            if let Some(g) = grads[id].take() {
                leaves.insert(id, g);
            }
        }
        Gradients { leaves, by_label }
    }

    pub fn get(&self, v: &Var<'_>) -> Option<&Tensor> {
        v.id.and_then(|id| self.leaves.get(&id))
    }

    /// Gradient for `v`, zeros if it received none.
    pub fn wrt(&self, v: &Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape().to_vec()))
    }

    /// Sum of gradients over every leaf bound under `label`.
    pub fn by_label(&self, label: &str) -> Option<Tensor> {
        let ids = self.by_label.get(label)?;
        let mut acc: Option<Tensor> = None;
        for id in ids {
            if let Some(g) = self.leaves.get(id) {
                match &mut acc {
                    Some(a) => a.add_assign(g),
                    None => acc = Some(g.clone()),
                }
            }
        }
        acc
    }
}

/// A named trainable tensor.
#[derive(Clone, Debug)]
pub struct Param {
    name: String,
    value: Arc<Tensor>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            name: name.into(),
            value: Arc::new(value),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }

    pub fn set(&mut self, value: Tensor) -> Result<()> {
        value.expect_same_shape("Param::set", &self.value)?;
        self.value = Arc::new(value);
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}
