use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::{Real, Tensor};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &mut Grads<T>)>;

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    needs_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Reverse-mode recording of one forward evaluation.
///
/// Nodes are appended in evaluation order, so node ids are a topological order
/// and the backward sweep simply walks them in reverse.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl<T: Real> Tape<T> {
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

    fn push_node(&self, value: Rc<Tensor<T>>, needs_grad: bool, backward: Option<BackwardFn<T>>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            needs_grad,
            backward,
        });
        nodes.len() - 1
    }

    /// Value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.constant_rc(Rc::new(value))
    }

    pub fn constant_rc(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        let id = self.push_node(value, false, None);
        Var { tape: self, id }
    }

    /// Differentiable input (parameter or probe).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf_rc(Rc::new(value))
    }

    pub fn leaf_rc(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        let id = self.push_node(value, true, None);
        Var { tape: self, id }
    }

    /// Record an op result. The backward closure is dropped when no parent
    /// requires a gradient.
    pub fn record<'t>(
        &'t self,
        value: Tensor<T>,
        parents: &[Var<'t, T>],
        backward: impl Fn(&Tensor<T>, &mut Grads<T>) + 'static,
    ) -> Var<'t, T> {
        let needs = parents.iter().any(|p| p.needs_grad());
        let bw: Option<BackwardFn<T>> = if needs { Some(Box::new(backward)) } else { None };
        let id = self.push_node(Rc::new(value), needs, bw);
        Var { tape: self, id }
    }

    /// Gradients of the scalar `root` with respect to every node that needs one.
    pub fn backward(&self, root: Var<'_, T>) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.len(), 1, "backward root must be a scalar");
        let mut grads = Grads {
            slots: (0..nodes.len()).map(|_| None).collect(),
            needs: nodes.iter().map(|n| n.needs_grad).collect(),
        };
        if !nodes[root.id].needs_grad {
            return grads;
        }
        grads.slots[root.id] = Some(Tensor::new(nodes[root.id].value.shape(), vec![T::one()]));
        for id in (0..=root.id).rev() {
            let Some(bw) = nodes[id].backward.as_ref() else { continue };
            let Some(upstream) = grads.slots[id].take() else { continue };
            bw(&upstream, &mut grads);
            grads.slots[id] = Some(upstream);
        }
        grads
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant_rc(self.value())
    }
}

/// Accumulated gradients from one backward sweep, indexed by node id.
pub struct Grads<T: Real> {
    slots: Vec<Option<Tensor<T>>>,
    needs: Vec<bool>,
}

impl<T: Real> Grads<T> {
    pub fn wants(&self, id: usize) -> bool {
        self.needs[id]
    }

    /// Mutable accumulation buffer for node `id`, zero-initialised on first use.
    /// `None` when the node does not need a gradient.
    pub fn slot(&mut self, id: usize, shape: &[usize]) -> Option<&mut [T]> {
        if !self.needs[id] {
            return None;
        }
        let slot = self.slots[id].get_or_insert_with(|| Tensor::zeros(shape));
        Some(slot.data_mut())
    }

    /// Add `g` into node `id`'s gradient.
    pub fn add(&mut self, id: usize, g: Tensor<T>) {
        if !self.needs[id] {
            return;
        }
        match &mut self.slots[id] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.slots[var.id].as_ref()
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.slots[var.id].take()
    }
}
