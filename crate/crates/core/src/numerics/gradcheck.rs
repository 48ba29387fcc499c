use std::collections::BTreeMap;

use super::graph::Graph;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares the analytic gradient of the graph's single scalar output with
/// central differences, one parameter entry at a time.
///
/// Returns `max_i |analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, 1e-12)`.
/// The parameter is restored to its original value afterwards.
pub fn grad_check(graph: &mut Graph, inputs: &BTreeMap<String, Tensor>, parameter: &str, step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::invalid(format!("step must be positive, got {step}")));
    }
    let (out_name, out_node) = match graph.outputs().iter().collect::<Vec<_>>().as_slice() {
        [(name, id)] => ((*name).clone(), **id),
        other => {
            return Err(Error::invalid(format!(
                "grad_check needs exactly one graph output, found {}",
                other.len()
            )))
        }
    };
    let original = graph
        .param_value(parameter)
        .cloned()
        .ok_or_else(|| Error::invalid(format!("unknown parameter `{parameter}`")))?;

    graph.forward_eval(inputs)?;
    let analytic = graph
        .backward(out_node)?
        .remove(parameter)
        .expect("parameter registered");

    let eval_at = |graph: &mut Graph, i: usize, value: f64| -> Result<f64> {
        let mut p = original.clone();
        p.data_mut()[i] = value;
        graph.set_param(parameter, p)?;
        let out = graph.forward_eval(inputs)?;
        Ok(out[&out_name].data()[0])
    };

    let mut worst: f64 = 0.0;
    for i in 0..original.numel() {
        let x = original.data()[i];
        let plus = eval_at(graph, i, x + step)?;
        let minus = eval_at(graph, i, x - step)?;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((a - numeric).abs() / denom);
    }
    graph.set_param(parameter, original)?;
    graph.forward_eval(inputs)?;
    Ok(worst)
}
