//! Elementwise and reduction operations.

use super::graph::Operation;
use super::tensor::Tensor;

fn same_shape(name: &str, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
    match inputs {
        [a, b] if a == b => Ok(a.to_vec()),
        [a, b] => Err(format!("{name} operands differ: {a:?} vs {b:?}")),
        _ => Err(format!("{name} takes two inputs, got {}", inputs.len())),
    }
}

fn unary(inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
    match inputs {
        [a] => Ok(a.to_vec()),
        _ => Err(format!("expected one input, got {}", inputs.len())),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Add;

impl Operation for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn infer_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        same_shape("add", inputs)
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        inputs[0].add(inputs[1]).expect("shapes checked")
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, wanted: &[bool]) -> Vec<Option<Tensor>> {
        wanted.iter().map(|&w| w.then(|| grad.clone())).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Mul;

impl Operation for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn infer_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        same_shape("mul", inputs)
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        inputs[0].mul(inputs[1]).expect("shapes checked")
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, wanted: &[bool]) -> Vec<Option<Tensor>> {
        vec![
            wanted[0].then(|| grad.mul(inputs[1]).expect("shapes checked")),
            wanted[1].then(|| grad.mul(inputs[0]).expect("shapes checked")),
        ]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Scale(pub f64);

impl Operation for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn infer_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        unary(inputs)
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        inputs[0].scale(self.0)
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, wanted: &[bool]) -> Vec<Option<Tensor>> {
        vec![wanted[0].then(|| grad.scale(self.0))]
    }
}

/// Sum of all elements, producing a rank-0 tensor.
#[derive(Debug, Clone, Copy)]
pub struct Sum;

impl Operation for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn infer_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        unary(inputs).map(|_| Vec::new())
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        Tensor::scalar(inputs[0].sum())
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, wanted: &[bool]) -> Vec<Option<Tensor>> {
        let g = grad.data()[0];
        vec![wanted[0].then(|| Tensor::full(inputs[0].shape().to_vec(), g))]
    }
}

/// `max(0, x)`; the subgradient at 0 is taken as 0.
#[derive(Debug, Clone, Copy)]
pub struct Relu;

pub(crate) fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

impl Operation for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn infer_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        unary(inputs)
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        inputs[0].map(relu)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, wanted: &[bool]) -> Vec<Option<Tensor>> {
        vec![wanted[0].then(|| {
            grad.zip_map(inputs[0], |g, x| if x > 0.0 { g } else { 0.0 })
                .expect("shapes checked")
        })]
    }
}

#[derive(Debug, Clone)]
pub struct Reshape(pub Vec<usize>);

impl Operation for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn infer_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        let [a] = inputs else {
            return Err(format!("expected one input, got {}", inputs.len()));
        };
        let from: usize = a.iter().product();
        let to: usize = self.0.iter().product();
        if from != to || self.0.contains(&0) {
            return Err(format!("cannot reshape {a:?} into {:?}", self.0));
        }
        Ok(self.0.clone())
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        inputs[0].clone().reshape(self.0.clone()).expect("shape checked")
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, wanted: &[bool]) -> Vec<Option<Tensor>> {
        vec![wanted[0].then(|| grad.clone().reshape(inputs[0].shape().to_vec()).expect("shape checked"))]
    }
}
