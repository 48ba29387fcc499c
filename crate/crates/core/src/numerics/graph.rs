//! Tape-style reverse-mode differentiation.
//!
//! A [`Graph`] is built node by node; every node refers only to nodes created
//! before it, so creation order is already a topological order. Values are
//! computed by [`Graph::forward_eval`] and gradients by [`Graph::backward`],
//! which walks the tape in reverse and sums contributions at fan-out.

use std::collections::BTreeMap;
use std::fmt;

use super::ops;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A differentiable operation that can be recorded on a [`Graph`].
pub trait Operation: fmt::Debug {
    fn name(&self) -> &'static str;

    /// Output shape for the given input shapes, or a message explaining the mismatch.
    fn infer_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String>;

    fn forward(&self, inputs: &[&Tensor]) -> Tensor;

    /// Vector-Jacobian product: one entry per input, `None` where `wanted[i]` is false.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, wanted: &[bool]) -> Vec<Option<Tensor>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum NodeKind {
    Input,
    Param,
    Const,
    Apply {
        op: Box<dyn Operation>,
        inputs: Vec<NodeId>,
    },
}

#[derive(Debug)]
struct Node {
    kind: NodeKind,
    shape: Vec<usize>,
    value: Option<Tensor>,
    requires_grad: bool,
}

/// Gradient per trainable parameter, keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    params: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
    evaluated: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, kind: NodeKind, shape: Vec<usize>, value: Option<Tensor>, rg: bool) -> NodeId {
        self.nodes.push(Node {
            kind,
            shape,
            value,
            requires_grad: rg,
        });
        self.evaluated = false;
        NodeId(self.nodes.len() - 1)
    }

    /// Declares a named input fed at [`Graph::forward_eval`] time.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if self.inputs.contains_key(name) {
            return Err(Error::invalid(format!("duplicate input `{name}`")));
        }
        let id = self.push(NodeKind::Input, shape.to_vec(), None, false);
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    /// Registers a trainable parameter.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        if self.params.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let shape = value.shape().to_vec();
        let id = self.push(NodeKind::Param, shape, Some(value), true);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(NodeKind::Const, shape, Some(value), false)
    }

    /// Records `op` applied to `inputs`, checking shapes immediately.
    pub fn apply(&mut self, op: impl Operation + 'static, inputs: &[NodeId]) -> Result<NodeId> {
        let node = self.nodes.len();
        if let Some(bad) = inputs.iter().find(|id| id.0 >= node) {
            return Err(Error::Shape {
                node,
                op: op.name(),
                msg: format!("input {} does not precede this node", bad.0),
            });
        }
        let shapes: Vec<&[usize]> = inputs.iter().map(|id| self.nodes[id.0].shape.as_slice()).collect();
        let shape = op.infer_shape(&shapes).map_err(|msg| Error::Shape {
            node,
            op: op.name(),
            msg,
        })?;
        let rg = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(
            NodeKind::Apply {
                op: Box::new(op),
                inputs: inputs.to_vec(),
            },
            shape,
            None,
            rg,
        ))
    }

    /// Marks a node as a named output of [`Graph::forward_eval`].
    pub fn output(&mut self, name: &str, node: NodeId) {
        self.outputs.insert(name.to_string(), node);
    }

    pub fn outputs(&self) -> &BTreeMap<String, NodeId> {
        &self.outputs
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        &self.nodes[node.0].shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, node: NodeId) -> Option<&Tensor> {
        self.nodes[node.0].value.as_ref()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn param_value(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|id| self.nodes[id.0].value.as_ref())
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = *self
            .params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        let node = &mut self.nodes[id.0];
        if node.shape != value.shape() {
            return Err(Error::Shape {
                node: id.0,
                op: "param",
                msg: format!("expected {:?}, got {:?}", node.shape, value.shape()),
            });
        }
        node.value = Some(value);
        self.evaluated = false;
        Ok(())
    }

    /// Evaluates every node given the declared inputs and returns the named outputs.
    pub fn forward_eval(&mut self, inputs: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>> {
        for name in inputs.keys() {
            if !self.inputs.contains_key(name) {
                return Err(Error::invalid(format!("graph has no input named `{name}`")));
            }
        }
        for (name, id) in &self.inputs {
            let node = &mut self.nodes[id.0];
            let value = inputs
                .get(name)
                .ok_or_else(|| Error::invalid(format!("missing input `{name}` (node {})", id.0)))?;
            if value.shape() != node.shape {
                return Err(Error::Shape {
                    node: id.0,
                    op: "input",
                    msg: format!("`{name}` declared {:?}, fed {:?}", node.shape, value.shape()),
                });
            }
            node.value = Some(value.clone());
        }
        for i in 0..self.nodes.len() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if let NodeKind::Apply { op, inputs } = &node.kind {
                let args: Vec<&Tensor> = inputs
                    .iter()
                    .map(|id| before[id.0].value.as_ref().expect("inputs evaluated before use"))
                    .collect();
                let out = op.forward(&args);
                debug_assert_eq!(out.shape(), node.shape.as_slice(), "{} shape", op.name());
                node.value = Some(out);
            }
        }
        self.evaluated = true;
        Ok(self
            .outputs
            .iter()
            .map(|(name, id)| (name.clone(), self.nodes[id.0].value.clone().expect("evaluated")))
            .collect())
    }

    /// Runs a forward pass for graphs without declared inputs.
    pub fn eval(&mut self) -> Result<BTreeMap<String, Tensor>> {
        self.forward_eval(&BTreeMap::new())
    }

    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        self.backward_with(output, 1.0)
    }

    /// Reverse pass seeded with `cotangent` at the scalar `output`.
    pub fn backward_with(&self, output: NodeId, cotangent: f64) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.shape.iter().product::<usize>() != 1 {
            return Err(Error::Shape {
                node: output.0,
                op: "backward",
                msg: format!("output must be scalar, has shape {:?}", out.shape),
            });
        }
        if !self.evaluated {
            return Err(Error::invalid("backward called before forward_eval"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.shape.clone(), cotangent));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            let NodeKind::Apply { op, inputs } = &node.kind else {
                continue;
            };
            let Some(g) = grads[i].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            let wanted: Vec<bool> = inputs.iter().map(|id| self.nodes[id.0].requires_grad).collect();
            let args: Vec<&Tensor> = inputs
                .iter()
                .map(|id| self.nodes[id.0].value.as_ref().expect("evaluated"))
                .collect();
            let value = node.value.as_ref().expect("evaluated");
            let input_grads = op.backward(&args, value, &g, &wanted);
            for ((id, ig), want) in inputs.iter().zip(input_grads).zip(wanted) {
                let Some(ig) = ig else { continue };
                if !want {
                    continue;
                }
                match &mut grads[id.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }

        let mut out = Gradients::new();
        for (name, id) in &self.params {
            let g = grads
                .get_mut(id.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(self.nodes[id.0].shape.clone()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    // Convenience builders for the elementary operations.

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(ops::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(ops::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(ops::Scale(c), &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(ops::Sum, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(ops::Relu, &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(ops::Reshape(shape.to_vec()), &[a])
    }

    pub fn identity(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        self.reshape(a, &shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_node() {
        let mut g = Graph::new();
        let x = g.input("x", &[2]).unwrap();
        let y = g.input("y", &[2]).unwrap();
        let s = g.add(x, y).unwrap();
        g.output("s", s);
        let feed = BTreeMap::from([("x".into(), t(&[2], &[1., 2.])), ("y".into(), t(&[2], &[3., 4.]))]);
        let out = g.forward_eval(&feed).unwrap();
        assert_eq!(out["s"].data(), &[4., 6.]);
    }

    #[test]
    fn identity_graph() {
        let mut g = Graph::new();
        let x = g.input("x", &[3]).unwrap();
        let y = g.identity(x).unwrap();
        g.output("y", y);
        let feed = BTreeMap::from([("x".into(), t(&[3], &[-1., 0.5, 7.]))]);
        assert_eq!(g.forward_eval(&feed).unwrap()["y"].data(), &[-1., 0.5, 7.]);
    }

    #[test]
    fn mul_add_sum_chain_matches_hand_value() {
        // sum(x*y + x) with x = [[1,2],[3,4]], y = [[5,6],[7,8]]
        // = (5+1) + (12+2) + (21+3) + (32+4) = 80
        let mut g = Graph::new();
        let x = g.input("x", &[2, 2]).unwrap();
        let y = g.input("y", &[2, 2]).unwrap();
        let m = g.mul(x, y).unwrap();
        let a = g.add(m, x).unwrap();
        let s = g.sum(a).unwrap();
        g.output("s", s);
        let feed = BTreeMap::from([
            ("x".into(), t(&[2, 2], &[1., 2., 3., 4.])),
            ("y".into(), t(&[2, 2], &[5., 6., 7., 8.])),
        ]);
        let first = g.forward_eval(&feed).unwrap();
        assert_eq!(first["s"].item(), Some(80.0));
        let second = g.forward_eval(&feed).unwrap();
        assert_eq!(first["s"].data()[0].to_bits(), second["s"].data()[0].to_bits());
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut g = Graph::new();
        let x = g.input("x", &[2]).unwrap();
        let y = g.input("y", &[3]).unwrap();
        let err = g.add(x, y).unwrap_err();
        assert!(matches!(err, Error::Shape { node: 2, op: "add", .. }), "{err}");

        let mut g = Graph::new();
        g.input("x", &[2]).unwrap();
        let feed = BTreeMap::from([("x".into(), Tensor::zeros([3]))]);
        let err = g.forward_eval(&feed).unwrap_err();
        assert!(err.to_string().contains("node 0"), "{err}");
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param("x", t(&[2, 3], &[1., -2., 3., 0., 5., 6.])).unwrap();
        let s = g.sum(x).unwrap();
        g.eval().unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads["x"].data(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.param("x", t(&[3], &[1., 2., 3.])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.eval().unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads["x"].data(), &[2., 4., 6.]);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::ones([2])).unwrap();
        g.eval().unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::ones([2])).unwrap();
        g.param("unused", Tensor::ones([4])).unwrap();
        let s = g.sum(x).unwrap();
        g.eval().unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads["unused"], Tensor::zeros([4]));
    }

    #[test]
    fn backward_is_linear_in_cotangent() {
        let mut g = Graph::new();
        let x = g.param("x", t(&[3], &[0.5, -1.5, 2.0])).unwrap();
        let r = g.relu(x).unwrap();
        let m = g.mul(r, x).unwrap();
        let s = g.sum(m).unwrap();
        g.eval().unwrap();
        let base = g.backward_with(s, 1.0).unwrap();
        let scaled = g.backward_with(s, -3.25).unwrap();
        for (a, b) in base["x"].data().iter().zip(scaled["x"].data()) {
            assert_eq!(a * -3.25, *b);
        }
    }
}
