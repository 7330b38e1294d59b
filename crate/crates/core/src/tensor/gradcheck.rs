use std::collections::BTreeMap;

use super::{Feed, Graph, Tensor, TensorError};

const STEP: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Input name and flat index where `max_rel_err` occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub pass: bool,
}

/// Compares autodiff gradients of a scalar-output graph against central
/// finite differences for every element of every `requires_grad` input.
pub fn grad_check(
    graph: &mut Graph,
    inputs: &BTreeMap<String, Tensor>,
    tol: f64,
) -> Result<GradCheckReport, TensorError> {
    let outputs: Vec<String> = graph.output_names().map(str::to_string).collect();
    if outputs.len() != 1 {
        return Err(TensorError::NonScalarOutput(format!("{} outputs", outputs.len())));
    }
    let out_name = outputs[0].clone();

    let eval = |graph: &mut Graph, inputs: &BTreeMap<String, Tensor>| {
        let feed: Feed = inputs.iter().map(|(k, v)| (k.as_str(), v)).collect();
        graph.forward_eval(&feed)
    };

    let out = eval(graph, inputs)?;
    if out[&out_name].len() != 1 {
        return Err(TensorError::NonScalarOutput(format!(
            "`{}` has shape {:?}",
            out_name,
            out[&out_name].shape()
        )));
    }
    let seeds = BTreeMap::from([(out_name.clone(), Tensor::scalar(1.0))]);
    let analytic = graph.backward(&seeds)?;

    let mut probe = inputs.clone();
    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    for (name, grad) in &analytic {
        for j in 0..grad.len() {
            let orig = probe[name].data()[j];
            probe.get_mut(name).unwrap().data_mut()[j] = orig + STEP;
            let plus = eval(graph, &probe)?[&out_name].data()[0];
            probe.get_mut(name).unwrap().data_mut()[j] = orig - STEP;
            let minus = eval(graph, &probe)?[&out_name].data()[0];
            probe.get_mut(name).unwrap().data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * STEP);
            let a = grad.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((name.clone(), j));
            }
            checked += 1;
        }
    }
    // Leave the graph holding the unperturbed activations.
    eval(graph, inputs)?;
    Ok(GradCheckReport {
        max_rel_err,
        worst,
        checked,
        pass: max_rel_err < tol,
    })
}
