use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};

use crate::Element;

type BackwardFn<T> = Box<dyn Fn(&ArrayD<T>) -> Vec<Option<ArrayD<T>>>>;

struct Node<T> {
    value: Arc<ArrayD<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Tape of recorded operations.
///
/// Node ids are allocated in execution order, so the tape is already a
/// topological order and backward is a single reverse sweep.
pub struct Graph<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that never receives gradients.
    pub fn constant(&self, value: ArrayD<T>) -> Var<'_, T> {
        self.constant_shared(Arc::new(value))
    }

    pub fn constant_shared(&self, value: Arc<ArrayD<T>>) -> Var<'_, T> {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        })
    }

    /// A differentiable input.
    pub fn leaf(&self, value: ArrayD<T>) -> Var<'_, T> {
        self.leaf_shared(Arc::new(value))
    }

    pub fn leaf_shared(&self, value: Arc<ArrayD<T>>) -> Var<'_, T> {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        })
    }

    pub fn scalar(&self, x: T) -> Var<'_, T> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), x))
    }

    /// Records an operation. `backward` maps the output gradient to one
    /// optional gradient per parent, in order; it is dropped unused when no
    /// parent requires a gradient.
    pub fn record<F>(&self, parents: &[Var<'_, T>], value: ArrayD<T>, backward: F) -> Var<'_, T>
    where
        F: Fn(&ArrayD<T>) -> Vec<Option<ArrayD<T>>> + 'static,
    {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        self.push(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
        })
    }

    fn value_of(&self, id: usize) -> Arc<ArrayD<T>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Gradient of `root` with respect to every leaf it depends on.
    /// Non-scalar roots are seeded with ones (the gradient of their sum).
    pub fn backward(&self, root: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<ArrayD<T>>> = (0..=root.id).map(|_| None).collect();
        let mut out = HashMap::new();
        if !nodes[root.id].requires_grad {
            return Gradients { grads: out };
        }
        grads[root.id] = Some(ArrayD::from_elem(nodes[root.id].value.raw_dim(), T::one()));
        for id in (0..=root.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            match &node.backward {
                None => {
                    if node.requires_grad {
                        out.insert(id, grad);
                    }
                }
                Some(backward) => {
                    let parent_grads = backward(&grad);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !nodes[pid].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(
                            pg.shape(),
                            nodes[pid].value.shape(),
                            "gradient shape mismatch for node {pid}"
                        );
                        match &mut grads[pid] {
                            Some(acc) => acc.zip_mut_with(&pg, |a, &b| *a = *a + b),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Gradients { grads: out }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: HashMap<usize, ArrayD<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&ArrayD<T>> {
        self.grads.get(&var.id)
    }

    /// Gradient for `var`, or zeros when it did not influence the root.
    pub fn wrt(&self, var: Var<'_, T>) -> ArrayD<T> {
        self.grads
            .get(&var.id)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(var.value().raw_dim()))
    }

    pub(crate) fn take_id(&mut self, id: usize) -> Option<ArrayD<T>> {
        self.grads.remove(&id)
    }
}

/// Handle to a node of a [`Graph`].
pub struct Var<'g, T: Element> {
    pub(crate) graph: &'g Graph<T>,
    pub(crate) id: usize,
}

impl<T: Element> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Element> Copy for Var<'_, T> {}

impl<T: Element> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'g, T: Element> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<ArrayD<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn ndim(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.ndim()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on tensor of shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant_shared(self.value())
    }
}
