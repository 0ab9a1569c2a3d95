//! Computation graph: [`Var`] nodes, gradient mode, and reverse-mode
//! accumulation.
//!
//! Every backward rule is itself written in terms of [`Var`] operations, so
//! running the backward pass with graph construction enabled yields
//! differentiable gradients. That is what makes input-gradient penalties
//! trainable.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::tensor::Tensor;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with graph recording switched on or off, restoring the previous mode.
pub fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(enabled)));
    f()
}

pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

/// Backward rule: `(output, output_grad, needs_grad_per_input) -> input grads`.
pub(crate) type BackwardFn = Box<dyn Fn(&Var, &Var, &[bool]) -> Vec<Option<Var>> + Send + Sync>;

struct Node {
    id: usize,
    value: Tensor,
    requires_grad: bool,
    inputs: Vec<Var>,
    backward: Option<BackwardFn>,
}

/// A value in the computation graph.
#[derive(Clone)]
pub struct Var(Arc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Var#{}({:?}, requires_grad={})",
            self.0.id, self.0.value, self.0.requires_grad
        )
    }
}

impl Var {
    fn from_node(
        value: Tensor,
        requires_grad: bool,
        inputs: Vec<Var>,
        backward: Option<BackwardFn>,
    ) -> Var {
        Var(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            inputs,
            backward,
        }))
    }

    pub fn constant(value: Tensor) -> Var {
        Var::from_node(value, false, Vec::new(), None)
    }

    /// A leaf that gradients are accumulated into.
    pub fn leaf(value: Tensor) -> Var {
        Var::from_node(value, true, Vec::new(), None)
    }

    pub fn scalar(value: f32) -> Var {
        Var::constant(Tensor::scalar(value))
    }

    /// Records an op result. The node only keeps its inputs and rule when some
    /// input requires a gradient and recording is enabled.
    pub(crate) fn record(
        value: Tensor,
        inputs: &[&Var],
        backward: impl Fn(&Var, &Var, &[bool]) -> Vec<Option<Var>> + Send + Sync + 'static,
    ) -> Var {
        if grad_enabled() && inputs.iter().any(|v| v.requires_grad()) {
            Var::from_node(
                value,
                true,
                inputs.iter().map(|&v| v.clone()).collect(),
                Some(Box::new(backward)),
            )
        } else {
            Var::constant(value)
        }
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn item(&self) -> f32 {
        self.0.value.item()
    }

    /// Gradients of this scalar with respect to every leaf it depends on.
    pub fn backward(&self) -> Gradients {
        let wanted = HashSet::new();
        let grads = propagate(self, &wanted, true, false);
        Gradients {
            map: grads
                .into_iter()
                .map(|(id, g)| (id, g.value().clone()))
                .collect(),
        }
    }
}

/// Leaf gradients keyed by node id.
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        self.map.get(&var.id())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Gradients of scalar `output` with respect to `inputs` (which may be interior
/// nodes). With `create_graph` the returned gradients are themselves
/// differentiable. Inputs unreachable from `output` get a zero gradient.
pub fn grad(output: &Var, inputs: &[&Var], create_graph: bool) -> Vec<Var> {
    let wanted: HashSet<usize> = inputs.iter().map(|v| v.id()).collect();
    let mut grads = propagate(output, &wanted, false, create_graph);
    inputs
        .iter()
        .map(|v| {
            grads
                .remove(&v.id())
                .unwrap_or_else(|| Var::constant(Tensor::zeros(v.shape())))
        })
        .collect()
}

/// Core reverse sweep. Keeps gradients for ids in `wanted`, plus all
/// grad-requiring leaves when `all_leaves` is set.
fn propagate(
    root: &Var,
    wanted: &HashSet<usize>,
    all_leaves: bool,
    create_graph: bool,
) -> HashMap<usize, Var> {
    assert_eq!(
        root.value().numel(),
        1,
        "gradient root must be a scalar, got {:?}",
        root.shape()
    );
    let mut out = HashMap::new();
    if !root.requires_grad() {
        return out;
    }

    // Post-order DFS marking which nodes lead to a wanted target.
    let is_target = |v: &Var| wanted.contains(&v.id()) || (all_leaves && v.is_leaf());
    let mut reaches: HashMap<usize, bool> = HashMap::new();
    let mut order: Vec<Var> = Vec::new();
    let mut stack: Vec<(Var, bool)> = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            let r = is_target(&v)
                || v.0
                    .inputs
                    .iter()
                    .any(|p| reaches.get(&p.id()).copied().unwrap_or(false));
            reaches.insert(v.id(), r);
            if r {
                order.push(v);
            }
            continue;
        }
        if reaches.contains_key(&v.id()) {
            continue;
        }
        // placeholder so diamonds are not expanded twice
        reaches.insert(v.id(), false);
        stack.push((v.clone(), true));
        for p in &v.0.inputs {
            if p.requires_grad() && !reaches.contains_key(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    // Ids grow with creation order, so descending id is a valid reverse topological order.
    order.sort_by_key(|v| std::cmp::Reverse(v.id()));

    with_grad_mode(create_graph, || {
        let mut grads: HashMap<usize, Var> = HashMap::new();
        grads.insert(root.id(), Var::constant(Tensor::ones(root.shape())));
        for node in &order {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            if is_target(node) {
                out.insert(node.id(), g.clone());
            }
            let Some(rule) = &node.0.backward else {
                continue;
            };
            let needs: Vec<bool> = node
                .0
                .inputs
                .iter()
                .map(|p| p.requires_grad() && reaches.get(&p.id()).copied().unwrap_or(false))
                .collect();
            if !needs.iter().any(|&n| n) {
                continue;
            }
            let parent_grads = rule(node, &g, &needs);
            debug_assert_eq!(parent_grads.len(), node.0.inputs.len());
            for ((p, pg), need) in node.0.inputs.iter().zip(parent_grads).zip(needs) {
                let (Some(pg), true) = (pg, need) else {
                    continue;
                };
                debug_assert_eq!(pg.shape(), p.shape(), "gradient shape mismatch");
                let acc = match grads.remove(&p.id()) {
                    Some(prev) => prev.add(&pg),
                    None => pg,
                };
                grads.insert(p.id(), acc);
            }
        }
    });
    out
}
