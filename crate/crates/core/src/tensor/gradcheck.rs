use super::{Bindings, Graph, NodeId, Result, Tensor};

/// Central finite-difference estimate of d(root)/d(leaf) for every element
/// of each leaf in `wrt`.
pub fn central_difference(
    graph: &Graph,
    root: NodeId,
    bindings: &Bindings<'_>,
    wrt: &[NodeId],
    h: f64,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(wrt.len());
    for &leaf in wrt {
        let base = bindings
            .get(leaf)
            .ok_or(super::TensorError::Unbound(leaf.index()))?
            .clone();
        let mut est = Tensor::zeros(base.shape());
        for k in 0..base.len() {
            let probe = |delta: f64| -> Result<f64> {
                let mut shifted = base.clone();
                shifted.data_mut()[k] += delta;
                let mut b = bindings.clone();
                b.bind_owned(leaf, shifted);
                Ok(graph.evaluate(&b)?.value(root).item())
            };
            est.data_mut()[k] = (probe(h)? - probe(-h)?) / (2.0 * h);
        }
        out.push(est);
    }
    Ok(out)
}

/// Largest `|analytic - numeric| / max(1, |analytic|)` over every element of
/// every leaf in `wrt`.
pub fn grad_check(
    graph: &Graph,
    root: NodeId,
    bindings: &Bindings<'_>,
    wrt: &[NodeId],
    h: f64,
) -> Result<f64> {
    let eval = graph.evaluate(bindings)?;
    let analytic = graph.gradient(&eval, root, wrt)?;
    let numeric = central_difference(graph, root, bindings, wrt, h)?;
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (x, y) in a.data().iter().zip(n.data()) {
            worst = worst.max((x - y).abs() / x.abs().max(1.0));
        }
    }
    Ok(worst)
}
