use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Backward rule: maps the upstream gradient of a node to gradient
/// contributions for its parents, as `(parent id, contribution)` pairs.
/// Rules capture (by value) whatever forward data they need, so a node
/// never reads another node during the reverse sweep.
pub(crate) type BackwardRule = Box<dyn Fn(&Tensor) -> Vec<(usize, Tensor)> + Send>;

pub(crate) struct Node {
    pub value: Tensor,
    pub requires_grad: bool,
    pub rule: Option<BackwardRule>,
}

/// Wengert list for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so every node's parents have
/// smaller indices and one reverse sweep visits each node exactly once.
/// A tape is confined to a single execution context; independent tapes
/// may run concurrently.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Record an input tensor. Gradients accumulate for it only when
    /// `requires_grad` is true.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, None)
    }

    /// Record a tensor that is constant with respect to differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor,
        requires_grad: bool,
        rule: Option<BackwardRule>,
    ) -> Var {
        self.nodes.push(Node { value, requires_grad, rule });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// All variables on the tape, in recording order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(TensorError::OffTape);
        }
        Ok(())
    }

    /// Accumulated gradient of `v` after [`Tape::backward`]. `None` for
    /// variables that do not require gradients or were not reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Reverse-topological gradient accumulation from a scalar root.
    ///
    /// Deterministic: contributions are applied in node order, so repeated
    /// runs over identical inputs produce bitwise-identical gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.check(root)?;
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(TensorError::NotScalar { shape: root_value.shape().to_vec() });
        }
        self.grads.clear();
        self.grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[root.0].requires_grad {
            return Ok(()); // constant root: nothing depends on a leaf
        }
        self.grads[root.0] = Some(Tensor::full(root_value.shape().to_vec(), 1.0));

        for id in (0..=root.0).rev() {
            if self.grads[id].is_none() {
                continue;
            }
            let Some(rule) = self.nodes[id].rule.as_ref() else { continue };
            let upstream = self.grads[id].take().expect("grad present");
            let contributions = rule(&upstream);
            self.grads[id] = Some(upstream);
            for (parent, contribution) in contributions {
                debug_assert!(parent < id, "tape order violated");
                debug_assert_eq!(
                    contribution.shape(),
                    self.nodes[parent].value.shape(),
                    "gradient shape mismatch for node {parent}"
                );
                match &mut self.grads[parent] {
                    Some(acc) => acc.add_assign(&contribution)?,
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }
}
