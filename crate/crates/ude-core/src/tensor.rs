//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! Every forward op records its parents and a backward step on the result, so
//! calling [`Tensor::backward`] on a scalar loss walks the recorded graph in
//! reverse topological order and accumulates gradients into every reachable
//! tensor that requires them. Graphs are rebuilt per forward pass; parameters
//! are long-lived leaf tensors whose values the optimizer updates in place.
//!
//! Only rank-1 and rank-2 tensors exist here: vectors, matrices, and scalars
//! (a scalar is a one-element vector). That is all an MLP stack needs.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Gradient deltas being propagated during one `backward` call.
///
/// Kept separate from the tensors' persistent `grad` buffers so that repeated
/// `backward` calls accumulate additively instead of re-counting whatever an
/// earlier call already deposited.
pub(crate) struct GradStore {
    map: HashMap<u64, Vec<f64>>,
}

impl GradStore {
    fn new() -> Self {
        GradStore {
            map: HashMap::new(),
        }
    }

    fn seed(&mut self, t: &Tensor, value: f64) {
        self.map.insert(t.id(), vec![value; t.numel()]);
    }

    fn get(&self, id: u64) -> Option<Vec<f64>> {
        self.map.get(&id).cloned()
    }

    /// Accumulate into the in-flight gradient of `t`. No-op unless `t`
    /// participates in differentiation.
    pub(crate) fn add(&mut self, t: &Tensor, f: impl FnOnce(&mut [f64])) {
        if !t.requires_grad() {
            return;
        }
        let buf = self
            .map
            .entry(t.id())
            .or_insert_with(|| vec![0.0; t.numel()]);
        f(buf);
    }
}

pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[f64], &mut GradStore)>;

struct TensorCell {
    id: u64,
    shape: Vec<usize>,
    requires_grad: bool,
    state: RefCell<TensorState>,
    parents: Vec<Tensor>,
    backward_step: Option<BackwardFn>,
}

struct TensorState {
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

/// Shared handle to a node in the computation graph.
#[derive(Clone)]
pub struct Tensor {
    cell: Rc<TensorCell>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id())
            .field("shape", &self.cell.shape)
            .field("requires_grad", &self.cell.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn new_cell(
        values: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward_step: Option<BackwardFn>,
    ) -> Tensor {
        assert!(
            !shape.is_empty() && shape.len() <= 2,
            "tensors are rank 1 or 2, got shape {shape:?}"
        );
        assert_eq!(
            values.len(),
            shape.iter().product::<usize>(),
            "value count {} does not match shape {:?}",
            values.len(),
            shape
        );
        Tensor {
            cell: Rc::new(TensorCell {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                requires_grad,
                state: RefCell::new(TensorState { values, grad: None }),
                parents,
                backward_step,
            }),
        }
    }

    /// Leaf tensor that does not participate in differentiation.
    pub fn constant(values: Vec<f64>, shape: &[usize]) -> Tensor {
        Self::new_cell(values, shape.to_vec(), false, Vec::new(), None)
    }

    /// Leaf tensor tracked for gradients (a model parameter).
    pub fn param(values: Vec<f64>, shape: &[usize]) -> Tensor {
        Self::new_cell(values, shape.to_vec(), true, Vec::new(), None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::constant(vec![value], &[1])
    }

    pub fn vector(values: Vec<f64>) -> Tensor {
        let n = values.len();
        Self::constant(values, &[n])
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Tensor {
        Self::constant(values, &[rows, cols])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::constant(vec![0.0; shape.iter().product()], shape)
    }

    /// Internal: result of a forward op. Drops the graph edges when no parent
    /// requires gradients, so pure inference never accumulates a tape.
    pub(crate) fn from_op(
        values: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward_step: BackwardFn,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Self::new_cell(values, shape, true, parents, Some(backward_step))
        } else {
            Self::new_cell(values, shape, false, Vec::new(), None)
        }
    }

    pub fn id(&self) -> u64 {
        self.cell.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.cell.shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.cell.shape.len()
    }

    /// Rows and columns, treating a vector as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.cell.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!(),
        }
    }

    pub fn numel(&self) -> usize {
        self.cell.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.cell.requires_grad
    }

    pub fn values(&self) -> Vec<f64> {
        self.cell.state.borrow().values.clone()
    }

    /// The single value of a scalar tensor.
    pub fn scalar_value(&self) -> f64 {
        assert_eq!(self.numel(), 1, "scalar_value on non-scalar tensor");
        self.cell.state.borrow().values[0]
    }

    /// Overwrite the stored values (optimizer updates, finite differencing).
    pub fn set_values(&self, values: &[f64]) {
        let mut st = self.cell.state.borrow_mut();
        assert_eq!(st.values.len(), values.len(), "set_values length mismatch");
        st.values.copy_from_slice(values);
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.cell.state.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.cell.state.borrow_mut().grad = None;
    }

    /// A constant leaf holding a copy of this tensor's current values.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.values(), &self.cell.shape)
    }

    /// Propagate gradients from this scalar through the recorded graph.
    ///
    /// Gradients accumulate additively into every reachable tensor with
    /// `requires_grad`; call [`Tensor::zero_grad`] (or let the optimizer do it)
    /// between steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.cell.shape
            )));
        }
        let order = self.topo_order();
        let mut store = GradStore::new();
        store.seed(self, 1.0);
        for node in order.iter().rev() {
            let Some(step) = node.cell.backward_step.as_ref() else {
                continue;
            };
            let Some(out_grad) = store.get(node.id()) else {
                continue;
            };
            let out_values = node.values();
            step(&out_grad, &out_values, &mut store);
        }
        for node in &order {
            if !node.requires_grad() {
                continue;
            }
            if let Some(delta) = store.map.remove(&node.id()) {
                let mut st = node.cell.state.borrow_mut();
                match st.grad.as_mut() {
                    Some(g) => {
                        for (gi, di) in g.iter_mut().zip(&delta) {
                            *gi += di;
                        }
                    }
                    None => st.grad = Some(delta),
                }
            }
        }
        Ok(())
    }

    /// Parents-before-children ordering of the subgraph reachable from here.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut visited: HashSet<u64> = HashSet::new();
        let mut order: Vec<Tensor> = Vec::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in node.cell.parents.iter() {
                if !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}
