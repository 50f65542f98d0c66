use std::cell::RefCell;
use std::collections::HashMap;

use indexmap::IndexMap;

use crate::store::ParamStore;
use crate::tensor::Tensor;
use crate::BackboneError;

/// Backward closure: (upstream grad, parent values, own value) -> grad per parent.
pub(crate) type BackFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

pub(crate) struct Node {
    pub op: &'static str,
    pub value: Tensor,
    pub parents: Vec<usize>,
    pub back: Option<BackFn>,
    pub param: Option<String>,
}

/// Tape of operations. Ops append nodes; `backward` walks the tape in reverse.
/// One graph per forward pass; parameters enter as named leaves.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: RefCell<Vec<Node>>,
}

/// Handle to a node in a graph. Cheap to copy; all tensor ops live on this type.
#[derive(Copy, Clone)]
pub struct Val<'g> {
    pub(crate) g: &'g Graph,
    pub(crate) id: usize,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn constant(&self, value: Tensor) -> Val<'_> {
        self.push(Node { op: "const", value, parents: vec![], back: None, param: None })
    }

    /// Named trainable leaf. Gradients for it are collected under `name`.
    pub fn param(&self, name: &str, value: Tensor) -> Val<'_> {
        self.push(Node { op: "param", value, parents: vec![], back: None, param: Some(name.to_string()) })
    }

    pub(crate) fn push(&self, node: Node) -> Val<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Val { g: self, id: nodes.len() - 1 }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse pass from a scalar loss. Returns per-parameter gradients keyed by
    /// leaf name; parameters the loss never touched get zero gradients.
    pub fn backward(&self, loss: Val) -> Result<Grads, BackboneError> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.id].value.shape(),
            (1, 1),
            "backward: loss must be scalar, got {:?}",
            nodes[loss.id].value.shape()
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].clone() else { continue };
            let node = &nodes[id];
            let Some(back) = &node.back else { continue };
            let pvals: Vec<&Tensor> = node.parents.iter().map(|&p| &nodes[p].value).collect();
            let pgrads = back(&g, &pvals, &node.value);
            debug_assert_eq!(pgrads.len(), node.parents.len(), "op {} returned wrong grad count", node.op);
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                if !pg.all_finite() {
                    return Err(BackboneError::NonFiniteGrad { op: node.op });
                }
                match &mut grads[p] {
                    Some(t) => t.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let mut map: IndexMap<String, Tensor> = IndexMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if let Some(name) = &node.param {
                let g = grads[id]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.rows, node.value.cols));
                match map.get_mut(name) {
                    Some(t) => t.add_assign(&g),
                    None => {
                        map.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(Grads { map })
    }
}

impl<'g> Val<'g> {
    pub fn value(self) -> Tensor {
        self.g.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(self) -> (usize, usize) {
        self.g.nodes.borrow()[self.id].value.shape()
    }

    pub fn rows(self) -> usize {
        self.shape().0
    }

    pub fn cols(self) -> usize {
        self.shape().1
    }

    pub fn item(self) -> f64 {
        self.g.nodes.borrow()[self.id].value.item()
    }

    pub(crate) fn with_value<R>(self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.g.nodes.borrow()[self.id].value)
    }
}

/// Gradients keyed by parameter name.
pub struct Grads {
    map: IndexMap<String, Tensor>,
}

impl Grads {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Elementwise accumulate another gradient set (entries missing here are inserted).
    pub fn accumulate(&mut self, other: &Grads) {
        for (name, g) in other.iter() {
            match self.map.get_mut(name) {
                Some(t) => t.add_assign(g),
                None => {
                    self.map.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn abs_max(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data.iter())
            .fold(0.0f64, |m, &x| m.max(x.abs()))
    }
}

/// A graph plus the parameter store it reads from. `param` binds a stored tensor
/// into the graph once; repeated lookups return the same node so gradients from
/// every use accumulate on one leaf.
pub struct Session<'a> {
    pub graph: &'a Graph,
    store: &'a ParamStore,
    bound: RefCell<HashMap<String, usize>>,
}

impl<'a> Session<'a> {
    pub fn new(graph: &'a Graph, store: &'a ParamStore) -> Self {
        Session { graph, store, bound: RefCell::new(HashMap::new()) }
    }

    pub fn param(&self, name: &str) -> Val<'a> {
        if let Some(&id) = self.bound.borrow().get(name) {
            return Val { g: self.graph, id };
        }
        let t = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("session: unknown parameter {name:?}"))
            .clone();
        let v = self.graph.param(name, t);
        self.bound.borrow_mut().insert(name.to_string(), v.id);
        v
    }

    pub fn constant(&self, t: Tensor) -> Val<'a> {
        self.graph.constant(t)
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }
}
