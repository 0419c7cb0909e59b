use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Maps the gradient of a node's output to gradients of its parents.
///
/// Receives the upstream gradient and a mask telling which parents need one;
/// returns one entry per parent (`None` where the mask is false).
pub(crate) type BackwardFn = Box<dyn Fn(&[f32], &[bool]) -> Vec<Option<Vec<f32>>>>;

struct Node {
    op: &'static str,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
    leaf_grad: Option<Vec<f32>>,
    is_leaf: bool,
}

/// Record of executed differentiable ops.
///
/// Nodes are appended as ops execute, so insertion order is a topological
/// order of the compute graph. Values are owned by the [`Var`] handles and by
/// backward closures that need them, not by the tape itself; a forward pass
/// with no trainable leaves therefore keeps only live values in memory.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    flops: Cell<u64>,
    branches: Option<Cell<u64>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    requires_grad: bool,
    value: Rc<Tensor>,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that also fingerprints the branch taken by every non-smooth op
    /// (relu, abs, clamp, max selections). Two forward passes with equal
    /// fingerprints lie on the same smooth piece of the function.
    pub fn with_branch_log() -> Self {
        Self {
            branches: Some(Cell::new(0xcbf2_9ce4_8422_2325)),
            ..Self::default()
        }
    }

    pub fn branch_signature(&self) -> Option<u64> {
        self.branches.as_ref().map(Cell::get)
    }

    pub(crate) fn note_branches<I: Iterator<Item = u32>>(&self, choices: impl FnOnce() -> I) {
        if let Some(h) = &self.branches {
            let mut acc = h.get();
            for c in choices() {
                acc = (acc ^ c as u64).wrapping_mul(0x0100_0000_01b3);
            }
            h.set(acc);
        }
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let id = self.push_node(Node {
            op: "leaf",
            parents: Vec::new(),
            requires_grad,
            backward: None,
            leaf_grad: None,
            is_leaf: true,
        });
        Var {
            tape: self,
            id,
            requires_grad,
            value: Rc::new(value),
        }
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Floating-point operations executed by ops recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    /// Names of the recorded ops, in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op).collect()
    }

    fn push_node(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Appends the result of an op. Rejects non-finite outputs.
    pub(crate) fn record<'t, F>(
        &'t self,
        op: &'static str,
        value: Tensor,
        parents: &[&Var<'t>],
        flops: u64,
        backward: F,
    ) -> Result<Var<'t>>
    where
        F: Fn(&[f32], &[bool]) -> Vec<Option<Vec<f32>>> + 'static,
    {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        for p in parents {
            debug_assert!(std::ptr::eq(p.tape, self), "{op}: parent from another tape");
        }
        self.flops.set(self.flops.get() + flops);
        let requires_grad = parents.iter().any(|p| p.requires_grad);
        let id = self.push_node(Node {
            op,
            parents: parents.iter().map(|p| p.id).collect(),
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
            leaf_grad: None,
            is_leaf: false,
        });
        Ok(Var {
            tape: self,
            id,
            requires_grad,
            value: Rc::new(value),
        })
    }

    /// Propagates d(loss)/d(node) back to every trainable leaf.
    ///
    /// Leaf gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&self, loss: &Var<'_>) -> Result<()> {
        if loss.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss.value.shape()),
            ));
        }
        if !loss.requires_grad {
            return Ok(());
        }
        let mut leaf_updates: Vec<(usize, Vec<f32>)> = Vec::new();
        {
            let nodes = self.nodes.borrow();
            let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.id + 1];
            grads[loss.id] = Some(vec![1.0]);
            for id in (0..=loss.id).rev() {
                let Some(grad) = grads[id].take() else {
                    continue;
                };
                let node = &nodes[id];
                if node.is_leaf {
                    leaf_updates.push((id, grad));
                    continue;
                }
                let Some(f) = node.backward.as_ref() else {
                    continue;
                };
                let mask: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|&p| nodes[p].requires_grad)
                    .collect();
                let parent_grads = f(&grad, &mask);
                debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
                for (&p, g) in node.parents.iter().zip(parent_grads) {
                    let Some(g) = g else { continue };
                    if !g.iter().all(|v| v.is_finite()) {
                        return Err(Error::NonFinite { op: node.op });
                    }
                    match &mut grads[p] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(g),
                    }
                }
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_updates {
            match &mut nodes[id].leaf_grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.leaf_grad = None;
        }
    }
}

impl<'t> Var<'t> {
    #[inline]
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub(crate) fn value_rc(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    #[inline]
    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    #[inline]
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self) -> Option<Tensor> {
        let nodes = self.tape.nodes.borrow();
        nodes[self.id]
            .leaf_grad
            .as_ref()
            .map(|g| Tensor::new(self.shape(), g.clone()).expect("grad shape matches value"))
    }

    /// Copies the value out of the graph.
    pub fn to_tensor(&self) -> Tensor {
        (*self.value).clone()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value.reshape(shape)?;
        self.tape
            .record("reshape", value, &[self], 0, |g, _| vec![Some(g.to_vec())])
    }

    /// Channel-axis concatenation of `[C_i, H, W]` vars.
    pub fn concat_channels(parts: &[&Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero vars"))?;
        let values: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
        let value = Tensor::concat_channels(&values)?;
        let sizes: Vec<usize> = values.iter().map(|v| v.numel()).collect();
        first.tape.record("concat", value, parts, 0, move |g, mask| {
            let mut offset = 0;
            sizes
                .iter()
                .zip(mask)
                .map(|(&n, &needed)| {
                    let part = needed.then(|| g[offset..offset + n].to_vec());
                    offset += n;
                    part
                })
                .collect()
        })
    }

    /// Channel `c` of a `[C, H, W]` var as `[1, H, W]`.
    pub fn channel(&self, c: usize) -> Result<Var<'t>> {
        let value = self.value.channel(c)?;
        let total = self.value.numel();
        let plane = value.numel();
        self.tape.record("channel", value, &[self], 0, move |g, _| {
            let mut full = vec![0.0; total];
            full[c * plane..(c + 1) * plane].copy_from_slice(g);
            vec![Some(full)]
        })
    }
}
