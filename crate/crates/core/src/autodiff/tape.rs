use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Computes the gradient contribution for each parent of a node, given the
/// gradient flowing into the node's output. `needed[i]` tells whether parent
/// `i` wants a gradient; entries that are not needed may be `None`.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Ordered record of operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's parents have
/// smaller ids and the tape is always topologically sorted. A tape and all
/// of its [`Var`]s belong to one thread.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when nothing flowed into it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, zeros when nothing flowed into it (detached or
    /// unconnected leaves).
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.id]),
        }
    }

    /// Moves the gradient for `var` out, if any.
    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that receives a gradient.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.leaf(Rc::new(value), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(Rc::new(value), false)
    }

    pub(crate) fn leaf(&self, value: Rc<Tensor>, requires_grad: bool) -> Var<'_> {
        self.push_node(Node {
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        })
    }

    /// Records an operation result. The backward rule is dropped when no
    /// parent requires a gradient, so constant subgraphs cost nothing on the
    /// reverse pass.
    pub(crate) fn record(
        &self,
        value: Tensor,
        parents: &[Var<'_>],
        backward: BackwardFn,
    ) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| {
                debug_assert!(std::ptr::eq(p.tape, self), "vars from different tapes");
                nodes[p.id].requires_grad
            })
        };
        self.push_node(Node {
            value: Rc::new(value),
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then_some(backward),
        })
    }

    fn check_root(&self, root: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let value = &nodes[root.id].value;
        if !value.shape().is_empty() {
            return Err(Error::contract(format!(
                "backward root must be a scalar, got shape {:?}",
                value.shape()
            )));
        }
        Ok(())
    }

    /// Reverse pass from a scalar root. Consumes the tape: a second call is a
    /// contract error rather than a silent accumulation.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        self.check_root(root)?;
        if self.consumed.replace(true) {
            return Err(Error::contract("backward already ran on this tape"));
        }
        let nodes = self.nodes.borrow();
        let needed: Vec<bool> = nodes.iter().map(|n| n.requires_grad).collect();
        let mut grads = self.reverse(&nodes, root.id, &needed);
        // Only leaves keep their gradients.
        for (g, n) in grads.iter_mut().zip(nodes.iter()) {
            if n.backward.is_some() || !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Gradient of a scalar root with respect to selected vars, without
    /// consuming the tape and without touching any other gradient. Only the
    /// part of the graph downstream of `wrt` is traversed.
    pub fn grad(&self, root: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Tensor>> {
        self.check_root(root)?;
        let nodes = self.nodes.borrow();
        let mut needed = vec![false; nodes.len()];
        for w in wrt {
            needed[w.id] = nodes[w.id].requires_grad;
        }
        for id in 0..nodes.len() {
            if !needed[id] && nodes[id].requires_grad {
                needed[id] = nodes[id].parents.iter().any(|&p| needed[p]);
            }
        }
        let mut grads = self.reverse(&nodes, root.id, &needed);
        Ok(wrt
            .iter()
            .map(|w| {
                grads[w.id]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(nodes[w.id].value.shape()))
            })
            .collect())
    }

    fn reverse(&self, nodes: &[Node], root: usize, needed: &[bool]) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !needed[root] {
            return grads;
        }
        grads[root] = Some(Tensor::ones(nodes[root].value.shape()));
        for id in (0..=root).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mask: Vec<bool> = node.parents.iter().map(|&p| needed[p]).collect();
            if !mask.iter().any(|&m| m) {
                continue;
            }
            let contributions = backward(&g, &mask);
            debug_assert_eq!(contributions.len(), node.parents.len());
            for ((&p, contrib), &m) in node.parents.iter().zip(contributions).zip(&mask) {
                let (Some(c), true) = (contrib, m) else {
                    continue;
                };
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        grads
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a scalar var.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    /// Same value, cut from the graph: no gradient flows through the result.
    pub fn detach(&self) -> Var<'t> {
        self.tape.leaf(self.value(), false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::new();
        let x = tape.var(Tensor::from_fn(&[2, 3], |i| i as f64));
        let loss = x.sum();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x), Tensor::ones(&[2, 3]));
    }

    #[test]
    fn square_derivative() {
        let tape = Tape::new();
        let x = tape.var(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = x.mul(x).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let tape = Tape::new();
        let x = tape.var(Tensor::ones(&[2]));
        let loss = x.sum();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Contract(_))));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let tape = Tape::new();
        let x = tape.var(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.var(Tensor::ones(&[3]));
        let loss = x.detach().mul(x.detach()).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.wrt(x), Tensor::zeros(&[3]));
    }

    #[test]
    fn side_gradient_does_not_consume() {
        let tape = Tape::new();
        let x = tape.var(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let y = tape.var(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let loss = x.mul(y).unwrap().sum();
        let side = tape.grad(loss, &[x]).unwrap();
        assert_eq!(side[0].data(), &[3.0, 4.0]);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(y).data(), &[1.0, -2.0]);
        assert_eq!(grads.wrt(x).data(), &[3.0, 4.0]);
    }
}
