use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use super::ops::{forward, vjp, Primitive, Saved};
use super::{ParamStore, StreamKey, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    prim: Option<Primitive>,
    inputs: Vec<usize>,
    saved: Saved,
    requires_grad: bool,
    param: Option<String>,
}

/// Ordered record of primitive applications (a Wengert list).
///
/// Methods take `&self` so calls nest naturally
/// (`tape.add(tape.matmul(a, b)?, c)?`). A tape is owned by one forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<String, Var>>,
    grad_enabled: bool,
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
            params: RefCell::new(HashMap::new()),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing on it requires gradients.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    fn leaf_node(&self, value: Tensor, requires_grad: bool, param: Option<String>) -> Var {
        self.push(Node {
            value,
            prim: None,
            inputs: Vec::new(),
            saved: Saved::None,
            requires_grad: requires_grad && self.grad_enabled,
            param,
        })
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf_node(value, false, None)
    }

    /// An input leaf whose gradient is reported by [`Gradients::var`].
    pub fn input(&self, value: Tensor) -> Var {
        self.leaf_node(value, true, None)
    }

    /// Leaf for a stored parameter. Frozen parameters enter as constants.
    /// Repeated lookups of one name share a single leaf.
    pub fn param(&self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.params.borrow().get(name) {
            return Ok(*v);
        }
        let p = store.get(name)?;
        let v = self.leaf_node(p.value.clone(), p.trainable, Some(name.to_string()));
        self.params.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Record `prim` applied to `inputs`.
    pub fn apply(&self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let (value, saved, requires_grad) = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
            let (value, saved) = forward(&prim, &vals)?;
            let rg = self.grad_enabled && inputs.iter().any(|v| nodes[v.0].requires_grad);
            (value, saved, rg)
        };
        let saved = if requires_grad { saved } else { Saved::None };
        Ok(self.push(Node {
            value,
            prim: Some(prim),
            inputs: inputs.iter().map(|v| v.0).collect(),
            saved,
            requires_grad,
            param: None,
        }))
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[a])
    }
    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::AddScalar(c), &[a])
    }
    /// `1 - a`
    pub fn one_minus(&self, a: Var) -> Result<Var> {
        let n = self.scale(a, -1.0)?;
        self.add_scalar(n, 1.0)
    }
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn affine(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        match b {
            Some(b) => self.apply(Primitive::Affine, &[x, w, b]),
            None => self.apply(Primitive::Affine, &[x, w]),
        }
    }
    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[a])
    }
    pub fn exp(&self, a: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn log(&self, a: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[a])
    }
    pub fn powf(&self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Powf(c), &[a])
    }
    pub fn clamp(&self, a: Var, lo: Option<f64>, hi: Option<f64>) -> Result<Var> {
        self.apply(Primitive::Clamp { lo, hi }, &[a])
    }
    pub fn softmax(&self, a: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[a])
    }
    pub fn layer_norm(&self, a: Var, eps: f64) -> Result<Var> {
        self.apply(Primitive::LayerNorm { eps }, &[a])
    }
    pub fn gelu(&self, a: Var) -> Result<Var> {
        self.apply(Primitive::Gelu, &[a])
    }
    pub fn gather(&self, table: Var, indices: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::Gather { indices }, &[table])
    }
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat { axis }, parts)
    }
    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        self.apply(Primitive::Permute { perm: perm.to_vec() }, &[a])
    }
    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Reshape { shape: shape.to_vec() }, &[a])
    }
    pub fn sum(&self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.apply(Primitive::Sum { axis }, &[a])
    }
    pub fn mean(&self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.apply(Primitive::Mean { axis }, &[a])
    }
    pub fn dropout(&self, a: Var, p: f64, key: StreamKey) -> Result<Var> {
        self.apply(Primitive::Dropout { p, key }, &[a])
    }
    pub fn drop_path(&self, a: Var, p: f64, key: StreamKey) -> Result<Var> {
        self.apply(Primitive::DropPath { p, key }, &[a])
    }
    pub fn im2col(&self, a: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        self.apply(Primitive::Im2Col { kernel, stride, pad }, &[a])
    }

    /// Reverse-mode sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_node = nodes
            .get(root.0)
            .ok_or_else(|| Error::Usage(format!("root {} not on this tape", root.0)))?;
        if root_node.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        let mut by_param = BTreeMap::new();
        if !root_node.requires_grad {
            return Ok(Gradients { by_param, by_var: grads });
        }
        grads[root.0] = Some(Tensor::full(root_node.value.shape(), 1.0));
        for id in (0..=root.0).rev() {
            let node = &nodes[id];
            let Some(g) = grads[id].take() else { continue };
            if let Some(prim) = &node.prim {
                let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
                let vals: Vec<&Tensor> = node.inputs.iter().map(|&i| &nodes[i].value).collect();
                let input_grads = vjp(prim, &vals, &node.value, &node.saved, &g, &needs)?;
                for (&i, ig) in node.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    match &mut grads[i] {
                        Some(acc) => acc.add_assign(&ig)?,
                        slot @ None => *slot = Some(ig),
                    }
                }
            } else if let Some(name) = &node.param {
                match by_param.get_mut(name) {
                    Some(acc) => Tensor::add_assign(acc, &g)?,
                    None => {
                        by_param.insert(name.clone(), g.clone());
                    }
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { by_param, by_var: grads })
    }

    /// Recompute every recorded node from the leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let nodes = self.nodes.borrow();
        let mut vals: Vec<Tensor> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let v = match &node.prim {
                None => node.value.clone(),
                Some(prim) => {
                    let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| &vals[i]).collect();
                    forward(prim, &ins)?.0
                }
            };
            vals.push(v);
        }
        Ok(vals)
    }

    /// Every recorded value, in recording order.
    pub fn recorded(&self) -> Vec<Tensor> {
        self.nodes.borrow().iter().map(|n| n.value.clone()).collect()
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    by_param: BTreeMap<String, Tensor>,
    by_var: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a parameter, if it was reachable from the root.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.by_param.get(name)
    }

    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.by_var.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for every trainable parameter of `store`; unreachable
    /// parameters get zeros.
    pub fn for_store(&self, store: &ParamStore) -> BTreeMap<String, Tensor> {
        store
            .iter()
            .filter(|p| p.trainable)
            .map(|p| {
                let g = self
                    .by_param
                    .get(&p.name)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
                (p.name.clone(), g)
            })
            .collect()
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.by_param
    }
}
