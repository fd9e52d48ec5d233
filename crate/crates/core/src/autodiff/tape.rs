//! Reverse-mode tape: every op appends a node holding its value and a
//! vector-Jacobian closure; `backward` walks the nodes once in reverse.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackCtx<'_, T>, &[T], &mut GradSink<T>)>;

struct Node<T> {
    op: &'static str,
    value: Tensor<T>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
    param: Option<ParamId>,
}

/// Computation record for one forward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    bound: RefCell<HashMap<ParamId, usize>>,
    check_finite: bool,
    profile: Option<RefCell<Profile>>,
}

/// Per-op wall-clock totals, collected when `AVFS_PROFILE` is set. Forward
/// time is the gap between consecutive ops, so it includes caller overhead.
#[derive(Debug, Default, Clone)]
pub struct Profile {
    last: Option<Instant>,
    pub forward: HashMap<&'static str, (usize, Duration)>,
    pub backward: HashMap<&'static str, (usize, Duration)>,
}

impl Profile {
    fn forward(&mut self, op: &'static str) {
        let now = Instant::now();
        let dt = self.last.map(|t| now - t).unwrap_or_default();
        let e = self.forward.entry(op).or_default();
        e.0 += 1;
        e.1 += dt;
        self.last = Some(now);
    }

    /// Table sorted by total time, slowest first.
    pub fn report(&self) -> String {
        let mut out = String::new();
        for (name, table) in [("forward", &self.forward), ("backward", &self.backward)] {
            let mut rows: Vec<_> = table.iter().collect();
            rows.sort_by(|a, b| b.1 .1.cmp(&a.1 .1));
            out.push_str(&format!("{name}:\n"));
            for (op, (n, d)) in rows {
                out.push_str(&format!("  {op:<20} {n:>6} {:>10.3} ms\n", d.as_secs_f64() * 1e3));
            }
        }
        out
    }
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Read access to node values while gradients propagate.
pub(crate) struct BackCtx<'a, T> {
    nodes: &'a [Node<T>],
    pub(crate) out: usize,
}

impl<'a, T> BackCtx<'a, T> {
    pub(crate) fn value(&self, id: usize) -> &'a Tensor<T> {
        &self.nodes[id].value
    }

    pub(crate) fn out_value(&self) -> &'a Tensor<T> {
        &self.nodes[self.out].value
    }
}

/// Lazily allocated gradient buffers, one per node that requires grad.
pub(crate) struct GradSink<T> {
    grads: Vec<Option<Vec<T>>>,
    needs: Vec<bool>,
    sizes: Vec<usize>,
}

impl<T: Scalar> GradSink<T> {
    /// Mutable gradient buffer for `id`, or `None` when it needs no gradient.
    pub(crate) fn get(&mut self, id: usize) -> Option<&mut [T]> {
        if !self.needs[id] {
            return None;
        }
        let n = self.sizes[id];
        Some(self.grads[id].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
    }

    pub(crate) fn wants(&self, id: usize) -> bool {
        self.needs[id]
    }

    pub(crate) fn add(&mut self, id: usize, g: &[T]) {
        if let Some(buf) = self.get(id) {
            for (b, &v) in buf.iter_mut().zip(g) {
                *b += v;
            }
        }
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: HashMap<ParamId, Tensor<T>>,
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Gradient of a leaf created with [`Tape::leaf`].
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(&var.id)
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor<T>> {
        self.params
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        let profile = std::env::var_os("AVFS_PROFILE")
            .map(|_| RefCell::new(Profile { last: Some(Instant::now()), ..Profile::default() }));
        Self { nodes: RefCell::new(Vec::new()), bound: RefCell::new(HashMap::new()), check_finite: true, profile }
    }

    pub fn profile(&self) -> Option<Profile> {
        self.profile.as_ref().map(|p| p.borrow().clone())
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient when `requires_grad`.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push_node(Node { op: "leaf", value, requires_grad, backward: None, param: None })
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// Bind a stored parameter; repeated binds of one id share a node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.bound.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let var = self.push_node(Node {
            op: "param",
            value: store.get(id).clone(),
            requires_grad: !store.is_frozen(id),
            backward: None,
            param: Some(id),
        });
        self.bound.borrow_mut().insert(id, var.id);
        var
    }

    fn push_node(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub(crate) fn value(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Append the result of a primitive. The closure runs only when some
    /// parent requires a gradient.
    pub(crate) fn push_op(
        &self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[usize],
        backward: impl Fn(&BackCtx<'_, T>, &[T], &mut GradSink<T>) + 'static,
    ) -> Result<Var<'_, T>> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        let backward: Option<BackwardFn<T>> =
            if requires_grad { Some(Box::new(backward)) } else { None };
        if let Some(p) = &self.profile {
            p.borrow_mut().forward(op);
        }
        Ok(self.push_node(Node { op, value, requires_grad, backward, param: None }))
    }

    /// Propagate from a scalar loss to every node that requires a gradient.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let n = loss.id + 1;
        let mut sink = GradSink {
            grads: (0..n).map(|_| None).collect(),
            needs: nodes[..n].iter().map(|nd| nd.requires_grad).collect(),
            sizes: nodes[..n].iter().map(|nd| nd.value.numel()).collect(),
        };
        let mut out = Gradients { params: HashMap::new(), leaves: HashMap::new() };
        if !root.requires_grad {
            return Ok(out);
        }
        sink.grads[loss.id] = Some(vec![T::one()]);
        for id in (0..n).rev() {
            let Some(g) = sink.grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.backward {
                Some(f) => {
                    let t0 = self.profile.as_ref().map(|_| Instant::now());
                    f(&BackCtx { nodes: &nodes, out: id }, &g, &mut sink);
                    if let (Some(p), Some(t0)) = (&self.profile, t0) {
                        let mut p = p.borrow_mut();
                        let e = p.backward.entry(node.op).or_default();
                        e.0 += 1;
                        e.1 += t0.elapsed();
                    }
                }
                None => {
                    let t = Tensor::new(node.value.shape(), g)?;
                    match node.param {
                        Some(p) => {
                            out.params.insert(p, t);
                        }
                        None => {
                            out.leaves.insert(id, t);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value(self.id).clone()
    }

    pub fn value_ref(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn item(&self) -> T {
        self.tape.value(self.id).item()
    }

    pub fn numel(&self) -> usize {
        self.tape.value(self.id).numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }
}
