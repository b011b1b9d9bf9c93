use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of a central-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(input, element)` where the maximum was attained.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub evaluations: usize,
}

fn evaluate<G>(
    f: &G,
    inputs: &[Tensor<f64>],
    as_params: bool,
) -> Result<(f64, Graph<f64>, Vec<Var>, Var)>
where
    G: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            if as_params {
                graph.param(t.clone())
            } else {
                graph.constant(t.clone())
            }
        })
        .collect();
    let out = f(&mut graph, &vars)?;
    let value = graph.value(out);
    match value.item() {
        Some(v) => Ok((v, graph, vars, out)),
        None => Err(AutodiffError::NonScalarOutput(value.shape().to_vec())),
    }
}

/// Evaluates the scalar program `f` and its gradient with respect to every input.
pub fn forward_backward<G>(f: G, inputs: &[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)>
where
    G: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (value, mut graph, vars, out) = evaluate(&f, inputs, true)?;
    let grads = graph.backward(out)?;
    let per_input = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    Ok((value, per_input))
}

/// Largest `|analytic - central| / max(|analytic|, |central|, 1e-8)` over every
/// element of every input.
pub fn grad_check_many<G>(f: G, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    G: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(AutodiffError::InvalidArgument {
            op: "grad_check",
            msg: format!("eps must lie in (0, 1e-2], got {eps}"),
        });
    }
    let (_, analytic) = forward_backward(&f, inputs)?;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        evaluations: 1,
    };
    for input in 0..inputs.len() {
        for index in 0..inputs[input].numel() {
            let original = inputs[input].data()[index];
            let mut side = |delta: f64| -> Result<f64> {
                probe[input].data_mut()[index] = original + delta;
                let (v, ..) = evaluate(&f, &probe, false)?;
                if !v.is_finite() {
                    return Err(AutodiffError::NonFinite {
                        input,
                        index,
                        value: v,
                    });
                }
                Ok(v)
            };
            let plus = side(eps)?;
            let minus = side(-eps)?;
            probe[input].data_mut()[index] = original;
            report.evaluations += 2;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[input].data()[index];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = rel;
                report.worst = Some((input, index));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Single-input form of [`grad_check_many`], returning the maximum relative error.
pub fn grad_check<G>(f: G, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    G: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), eps).map(|r| r.max_relative_error)
}
