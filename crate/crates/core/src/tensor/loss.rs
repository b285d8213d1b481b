use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Mean squared error against `target` plus `l1_weight` times the sum of
/// absolute values over `param_ids`.
pub fn mse_l1_loss(
    g: &mut Graph,
    pred: NodeId,
    target: &Tensor,
    param_ids: &[NodeId],
    l1_weight: f64,
) -> Result<NodeId> {
    if l1_weight < 0.0 {
        return Err(Error::Config(format!("negative l1_weight {l1_weight}")));
    }
    let mse = g.mse_loss(pred, target)?;
    if l1_weight == 0.0 || param_ids.is_empty() {
        return Ok(mse);
    }
    let mut terms = vec![mse];
    for &p in param_ids {
        let a = g.abs_sum(p);
        terms.push(g.scale(a, l1_weight));
    }
    g.add_scalars(terms)
}
