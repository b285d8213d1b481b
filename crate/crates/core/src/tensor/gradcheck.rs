//! Finite-difference gradient oracle.
//!
//! Checks analytic gradients against central differences computed from
//! forward evaluations only, so the oracle stays independent of the
//! backward implementation it verifies.

use super::{Graph, Mode, Stack, Tensor};
use crate::error::Result;
use rand::Rng;

/// Weighted-sum loss over the stack output; weights fixed per check so the
/// scalar is sensitive to every output element.
fn forward_loss(stack: &mut Stack, input: &Tensor, weights: &[f64], mode: Mode) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.leaf_from(input);
    let (out, _) = stack.forward(&mut g, x, mode)?;
    let w = g.leaf(Tensor::new(g.shape(out).to_vec(), weights.to_vec())?);
    let prod = g.mul(out, w)?;
    let loss = g.mean_all(prod);
    Ok(g.value(loss).data[0])
}

/// Max relative error between analytic and finite-difference gradients over
/// the input and all parameters. `h` is the central-difference step.
pub fn check_stack(
    stack: &mut Stack,
    input: Tensor,
    mode: Mode,
    h: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    // analytic pass
    let mut g = Graph::new();
    let x = g.leaf_from(&input);
    let (out, bound) = stack.forward(&mut g, x, mode)?;
    let out_len = g.value(out).numel();
    let weights: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wid = g.leaf(Tensor::new(g.shape(out).to_vec(), weights.clone())?);
    let prod = g.mul(out, wid)?;
    let loss = g.mean_all(prod);
    g.backward(loss)?;

    let analytic_input = g.grad(x).to_vec();
    stack.zero_grads();
    stack.accumulate_grads(&g, &bound);

    let mut max_rel: f64 = 0.0;
    let mut compare = |analytic: f64, fd: f64| {
        let denom = analytic.abs().max(fd.abs()).max(1e-6);
        let rel = (analytic - fd).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    };

    // input gradient
    let mut probe = input.clone();
    for i in 0..probe.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let up = forward_loss(stack, &probe, &weights, mode)?;
        probe.data[i] = orig - h;
        let down = forward_loss(stack, &probe, &weights, mode)?;
        probe.data[i] = orig;
        compare(analytic_input[i], (up - down) / (2.0 * h));
    }

    // parameter gradients, one tensor at a time
    let n_params = {
        let mut n = 0;
        for l in &stack.layers {
            l.for_each_param(&mut |_| n += 1);
        }
        n
    };
    for p_idx in 0..n_params {
        let (numel, analytic) = {
            let mut i = 0;
            let mut res = None;
            for l in &stack.layers {
                l.for_each_param(&mut |t| {
                    if i == p_idx {
                        res = Some((t.numel(), t.grad.clone().unwrap()));
                    }
                    i += 1;
                });
            }
            res.unwrap()
        };
        for e in 0..numel {
            let orig = perturb_param(stack, p_idx, e, h);
            let up = forward_loss(stack, &input, &weights, mode)?;
            set_param(stack, p_idx, e, orig - h);
            let down = forward_loss(stack, &input, &weights, mode)?;
            set_param(stack, p_idx, e, orig);
            compare(analytic[e], (up - down) / (2.0 * h));
        }
    }
    Ok(max_rel)
}

fn perturb_param(stack: &mut Stack, p_idx: usize, elem: usize, h: f64) -> f64 {
    let mut i = 0;
    let mut orig = 0.0;
    for l in &mut stack.layers {
        l.for_each_param_mut(&mut |t| {
            if i == p_idx {
                orig = t.data[elem];
                t.data[elem] = orig + h;
            }
            i += 1;
        });
    }
    orig
}

fn set_param(stack: &mut Stack, p_idx: usize, elem: usize, value: f64) {
    let mut i = 0;
    for l in &mut stack.layers {
        l.for_each_param_mut(&mut |t| {
            if i == p_idx {
                t.data[elem] = value;
            }
            i += 1;
        });
    }
}
