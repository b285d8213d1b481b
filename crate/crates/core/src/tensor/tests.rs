use super::gradcheck::check_stack;
use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: &[usize], r: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn gradcheck_spec(specs: &[LayerSpec], in_shape: &[usize], mode: Mode, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut stack = Stack::from_specs(specs, &mut r);
    let input = random_tensor(in_shape, &mut r);
    check_stack(&mut stack, input, mode, 1e-5, &mut r).unwrap()
}

#[test]
fn dense_identity_passthrough() {
    let mut stack = Stack {
        layers: vec![Layer::Dense(Dense::identity(3))],
    };
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let (out, _) = stack.forward(&mut g, x, Mode::Eval).unwrap();
    assert_eq!(g.value(out).data, vec![1.0, 2.0, 3.0]);
}

#[test]
fn relu_definition() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = g.relu(x);
    assert_eq!(g.value(y).data, vec![0.0, 0.0, 2.0]);
}

#[test]
fn batch_norm_train_standardizes() {
    let mut r = rng(3);
    let mut stack = Stack::from_specs(&[LayerSpec::BatchNorm { features: 4 }], &mut r);
    let input = random_tensor(&[16, 4], &mut r);
    let mut g = Graph::new();
    let x = g.leaf_from(&input);
    let (out, _) = stack.forward(&mut g, x, Mode::Train).unwrap();
    let od = &g.value(out).data;
    for c in 0..4 {
        let vals: Vec<f64> = (0..16).map(|n| od[n * 4 + c]).collect();
        let mean = vals.iter().sum::<f64>() / 16.0;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-4, "std {}", var.sqrt());
    }
}

#[test]
fn batch_norm_eval_is_pure() {
    let mut r = rng(4);
    let mut stack = Stack::from_specs(&[LayerSpec::BatchNorm { features: 3 }], &mut r);
    let input = random_tensor(&[8, 3], &mut r);
    let snapshot = match &stack.layers[0] {
        Layer::BatchNorm(bn) => (bn.run_mean.data.clone(), bn.run_var.data.clone()),
        _ => unreachable!(),
    };
    let mut g = Graph::new();
    let x = g.leaf_from(&input);
    let (o1, _) = stack.forward(&mut g, x, Mode::Eval).unwrap();
    let first = g.value(o1).data.clone();
    let mut g2 = Graph::new();
    let x2 = g2.leaf_from(&input);
    let (o2, _) = stack.forward(&mut g2, x2, Mode::Eval).unwrap();
    assert_eq!(first, g2.value(o2).data);
    match &stack.layers[0] {
        Layer::BatchNorm(bn) => {
            assert_eq!(snapshot.0, bn.run_mean.data);
            assert_eq!(snapshot.1, bn.run_var.data);
        }
        _ => unreachable!(),
    }
}

#[test]
fn gradcheck_dense() {
    for seed in 0..3 {
        let err = gradcheck_spec(
            &[LayerSpec::Dense {
                in_features: 5,
                out_features: 4,
            }],
            &[3, 5],
            Mode::Train,
            seed,
        );
        assert!(err < 1e-4, "dense gradcheck err {err}");
    }
}

#[test]
fn gradcheck_conv2d() {
    for seed in 0..3 {
        let err = gradcheck_spec(
            &[LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: 3,
                kernel: 3,
                stride: 2,
                pad: 1,
            }],
            &[2, 2, 5, 5],
            Mode::Train,
            seed,
        );
        assert!(err < 1e-4, "conv gradcheck err {err}");
    }
}

#[test]
fn gradcheck_batch_norm_both_modes() {
    for mode in [Mode::Train, Mode::Eval] {
        let err = gradcheck_spec(&[LayerSpec::BatchNorm { features: 3 }], &[6, 3], mode, 7);
        assert!(err < 1e-4, "bn {mode:?} gradcheck err {err}");
    }
}

#[test]
fn gradcheck_residual_block() {
    let err = gradcheck_spec(
        &[LayerSpec::ResidualBlock {
            in_channels: 2,
            out_channels: 3,
            stride: 2,
        }],
        &[2, 2, 6, 6],
        Mode::Train,
        11,
    );
    assert!(err < 1e-4, "resblock gradcheck err {err}");
}

#[test]
fn gradcheck_lstm_cell() {
    let err = gradcheck_spec(
        &[LayerSpec::LstmCell {
            input: 4,
            hidden: 3,
        }],
        &[2, 4],
        Mode::Train,
        13,
    );
    assert!(err < 1e-4, "lstm gradcheck err {err}");
}

#[test]
fn gradcheck_activations_and_flatten() {
    let err = gradcheck_spec(
        &[
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 2,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            LayerSpec::Flatten,
            LayerSpec::Dense {
                in_features: 2 * 16,
                out_features: 3,
            },
            LayerSpec::Tanh,
            LayerSpec::Relu,
        ],
        &[2, 1, 4, 4],
        Mode::Train,
        17,
    );
    assert!(err < 1e-4, "stack gradcheck err {err}");
}

#[test]
fn backward_linear_case() {
    // loss = mean(w ⊙ x) with x fixed → grad(w) = x / n
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![1, 3], vec![2.0, -1.0, 0.5]).unwrap());
    let w = g.leaf(Tensor::new(vec![1, 3], vec![1.0, 1.0, 1.0]).unwrap());
    let p = g.mul(w, x).unwrap();
    let s = g.mean_all(p);
    let loss = g.scale(s, 3.0); // sum = 3 * mean
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w), &[2.0, -1.0, 0.5]);
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    assert!(g.backward(x).is_err());
}

#[test]
fn disjoint_graphs_isolated() {
    let mut r = rng(5);
    let mut s1 = Stack::from_specs(
        &[LayerSpec::Dense {
            in_features: 3,
            out_features: 2,
        }],
        &mut r,
    );
    let mut s2 = s1.clone();
    let input = random_tensor(&[2, 3], &mut r);

    let mut g1 = Graph::new();
    let x1 = g1.leaf_from(&input);
    let (_o1, b1) = s1.forward(&mut g1, x1, Mode::Train).unwrap();

    let mut g2 = Graph::new();
    let x2 = g2.leaf_from(&input);
    let (o2, b2) = s2.forward(&mut g2, x2, Mode::Train).unwrap();
    let loss = g2.mean_all(o2);
    g2.backward(loss).unwrap();
    s2.zero_grads();
    s2.accumulate_grads(&g2, &b2);
    s1.zero_grads();
    s1.accumulate_grads(&g1, &b1); // no backward ran on g1

    let mut first = Vec::new();
    for l in &s1.layers {
        l.for_each_param(&mut |t| first.push(t.grad.clone().unwrap()));
    }
    for g in first {
        assert!(g.iter().all(|v| *v == 0.0));
    }
}

#[test]
fn adam_zero_grad_fixed_point() {
    let mut p = Tensor::param(vec![2], vec![1.0, -2.0]).unwrap();
    let mut adam = AdamState::new(0.01, &[2]);
    adam.step(std::iter::once(&mut p)).unwrap();
    assert_eq!(p.data, vec![1.0, -2.0]);
    assert_eq!(adam.step_count, 1);
}

#[test]
fn adam_single_step_hand_value() {
    let mut p = Tensor::param(vec![1], vec![1.0]).unwrap();
    p.grad = Some(vec![0.5]);
    let mut adam = AdamState::new(0.001, &[1]);
    adam.step(std::iter::once(&mut p)).unwrap();
    // bias-corrected m̂ = 0.5, v̂ = 0.25 → Δ = 0.001·0.5/(0.5+1e-8)
    let expected = 1.0 - 0.001 * 0.5 / (0.25f64.sqrt() + 1e-8);
    assert!((p.data[0] - expected).abs() < 1e-15, "{}", p.data[0]);
    assert!((p.data[0] - 0.999).abs() < 1e-6);
}

#[test]
fn adam_descends_quadratic() {
    // f(p) = p², grad = 2p, from p=1 with lr=0.1
    let mut p = Tensor::param(vec![1], vec![1.0]).unwrap();
    let mut adam = AdamState::new(0.1, &[1]);
    let mut prev = 1.0f64;
    for _ in 0..10 {
        p.grad = Some(vec![2.0 * p.data[0]]);
        adam.step(std::iter::once(&mut p)).unwrap();
        assert!(p.data[0].abs() < prev.abs(), "|p| not decreasing");
        prev = p.data[0];
    }
}

#[test]
fn mse_l1_examples() {
    // perfect fit
    let mut g = Graph::new();
    let pred = g.leaf(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let target = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let loss = mse_l1_loss(&mut g, pred, &target, &[], 0.0).unwrap();
    assert_eq!(g.value(loss).data[0], 0.0);

    // unit residuals
    let mut g = Graph::new();
    let pred = g.leaf(Tensor::new(vec![1, 4], vec![2.0, 3.0, 4.0, 5.0]).unwrap());
    let loss = mse_l1_loss(&mut g, pred, &target, &[], 0.0).unwrap();
    assert_eq!(g.value(loss).data[0], 1.0);

    // pure l1 term: params [2, -3], weight 0.001 → 0.005
    let mut g = Graph::new();
    let pred = g.leaf(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let params = g.leaf(Tensor::new(vec![2], vec![2.0, -3.0]).unwrap());
    let loss = mse_l1_loss(&mut g, pred, &target, &[params], 0.001).unwrap();
    assert!((g.value(loss).data[0] - 0.005).abs() < 1e-15);
}

#[test]
fn lstm_unroll_matches_sequential_steps() {
    let mut r = rng(23);
    let cell = LstmCell::new(4, 3, &mut r);
    let xs: Vec<Tensor> = (0..5).map(|_| random_tensor(&[2, 4], &mut r)).collect();

    // single graph, 5 chained steps
    let mut g = Graph::new();
    let bound = {
        let mut ids = Vec::new();
        ids.push(g.leaf_from(&cell.w));
        ids.push(g.leaf_from(&cell.b));
        ids
    };
    let mut h = g.leaf(Tensor::zeros(&[2, 3]));
    let mut c = g.leaf(Tensor::zeros(&[2, 3]));
    for x in &xs {
        let xid = g.leaf_from(x);
        let (nh, nc) = cell.step(&mut g, &bound, xid, h, c).unwrap();
        h = nh;
        c = nc;
    }
    let chained = g.value(h).data.clone();

    // fresh graph per step, state carried as plain tensors
    let mut hv = Tensor::zeros(&[2, 3]);
    let mut cv = Tensor::zeros(&[2, 3]);
    for x in &xs {
        let mut g = Graph::new();
        let bound = vec![g.leaf_from(&cell.w), g.leaf_from(&cell.b)];
        let xid = g.leaf_from(x);
        let hid = g.leaf_from(&hv);
        let cid = g.leaf_from(&cv);
        let (nh, nc) = cell.step(&mut g, &bound, xid, hid, cid).unwrap();
        hv = g.value(nh).clone();
        cv = g.value(nc).clone();
    }
    assert_eq!(chained, hv.data);
}

#[test]
fn forward_backward_deterministic() {
    let run = || {
        let mut r = rng(99);
        let mut stack = Stack::from_specs(
            &[
                LayerSpec::Dense {
                    in_features: 6,
                    out_features: 8,
                },
                LayerSpec::BatchNorm { features: 8 },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    in_features: 8,
                    out_features: 3,
                },
            ],
            &mut r,
        );
        let input = random_tensor(&[4, 6], &mut r);
        let mut g = Graph::new();
        let x = g.leaf_from(&input);
        let (out, bound) = stack.forward(&mut g, x, Mode::Train).unwrap();
        let loss = g.mean_all(out);
        g.backward(loss).unwrap();
        stack.zero_grads();
        stack.accumulate_grads(&g, &bound);
        let mut grads = Vec::new();
        for l in &stack.layers {
            l.for_each_param(&mut |t| grads.extend_from_slice(t.grad.as_ref().unwrap()));
        }
        (g.value(out).data.clone(), grads)
    };
    assert_eq!(run(), run());
}

#[test]
fn shape_mismatch_reports_dimensions() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2, 5]));
    let w = g.leaf(Tensor::zeros(&[4, 3]));
    let b = g.leaf(Tensor::zeros(&[4]));
    let err = g.linear(x, w, b).unwrap_err();
    assert!(err.to_string().contains("shape"));
}

#[test]
fn checkpoint_roundtrip_and_version_gate() {
    let dir = std::env::temp_dir().join(format!("tsck-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("t.ckpt");
    let data = vec![1.5f64, -2.25, 3.0e-10, 4.0];
    save_checkpoint(&path, &[("layer.w".to_string(), vec![2, 2], &data)]).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.len(), 1);
    assert_eq!(loaded[0].0, "layer.w");
    assert_eq!(loaded[0].1, vec![2, 2]);
    assert_eq!(loaded[0].2, data);

    // corrupt the version field
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[4] = 99;
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint(&path).is_err());
    std::fs::remove_dir_all(&dir).ok();
}
