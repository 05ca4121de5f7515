use super::{Graph, NodeId, Tensor};

/// Gradient norms below this are treated as zero when forming relative
/// errors, so a vanishing gradient is held to an absolute bound instead;
/// central differences at `h = 1e-6` carry roundoff near 1e-9 per element.
pub const GRAD_NORM_FLOOR: f64 = 1e-4;

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest per-input relative error `‖g_a − g_fd‖ / max(‖g_a‖, ‖g_fd‖, floor)`.
    pub max_rel_error: f64,
    pub per_input: Vec<f64>,
}

/// Checks the gradient of a scalar function of several tensors.
///
/// `build` receives a fresh graph and the input node ids and must return the
/// scalar loss node. Central differences with step `h` are taken on every
/// element of every input.
pub fn grad_check<F>(inputs: &[Tensor], h: f64, build: F) -> GradCheck
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &ids);
        g.value(loss).item()
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, &ids);
    let grads = g.backward(loss);

    let mut per_input = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&g, ids[k]);
        let mut numeric = Tensor::zeros(input.rows, input.cols);
        let mut vals = inputs.to_vec();
        for e in 0..input.len() {
            let x0 = input.data[e];
            vals[k].data[e] = x0 + h;
            let fp = eval(&vals);
            vals[k].data[e] = x0 - h;
            let fm = eval(&vals);
            vals[k].data[e] = x0;
            numeric.data[e] = (fp - fm) / (2.0 * h);
        }
        let diff: f64 = analytic
            .data
            .iter()
            .zip(&numeric.data)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = analytic.norm().max(numeric.norm()).max(GRAD_NORM_FLOOR);
        per_input.push(diff / scale);
    }
    let max_rel_error = per_input.iter().cloned().fold(0.0, f64::max);
    GradCheck {
        max_rel_error,
        per_input,
    }
}
