use super::{Graph, Mode, NodeId, Tensor};
use crate::error::{Error, Result};
use rand::Rng;

fn fan_in_uniform(rng: &mut impl Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let s = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-s..s)).collect()
}

/// Architecture description for one layer; output shape is a deterministic
/// function of input shape and the spec.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum LayerSpec {
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        features: usize,
    },
    Relu,
    Tanh,
    ResidualBlock {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    },
    LstmCell {
        input: usize,
        hidden: usize,
    },
    Flatten,
    Concat {
        left: usize,
        right: usize,
    },
}

impl LayerSpec {
    pub fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        let bad = |what: &str| {
            Err(Error::Shape(format!(
                "{what}: spec {:?} input {:?}",
                self, in_shape
            )))
        };
        match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                if in_shape.len() != 2 || in_shape[1] != in_features {
                    return bad("dense");
                }
                Ok(vec![in_shape[0], out_features])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                if in_shape.len() != 4 || in_shape[1] != in_channels {
                    return bad("conv2d");
                }
                let ho = (in_shape[2] + 2 * pad - kernel) / stride + 1;
                let wo = (in_shape[3] + 2 * pad - kernel) / stride + 1;
                Ok(vec![in_shape[0], out_channels, ho, wo])
            }
            LayerSpec::BatchNorm { features } => {
                if in_shape.len() < 2 || in_shape[1] != features {
                    return bad("batch_norm");
                }
                Ok(in_shape.to_vec())
            }
            LayerSpec::Relu | LayerSpec::Tanh => Ok(in_shape.to_vec()),
            LayerSpec::ResidualBlock {
                in_channels,
                out_channels,
                stride,
            } => {
                if in_shape.len() != 4 || in_shape[1] != in_channels {
                    return bad("residual_block");
                }
                let ho = (in_shape[2] + 2 - 3) / stride + 1;
                let wo = (in_shape[3] + 2 - 3) / stride + 1;
                Ok(vec![in_shape[0], out_channels, ho, wo])
            }
            LayerSpec::LstmCell { input, hidden } => {
                if in_shape.len() != 2 || in_shape[1] != input {
                    return bad("lstm_cell");
                }
                Ok(vec![in_shape[0], hidden])
            }
            LayerSpec::Flatten => Ok(vec![in_shape[0], in_shape[1..].iter().product()]),
            LayerSpec::Concat { left, right } => {
                if in_shape.len() != 2 || in_shape[1] != left {
                    return bad("concat");
                }
                Ok(vec![in_shape[0], left + right])
            }
        }
    }

    pub fn build(&self, rng: &mut impl Rng) -> Layer {
        match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => Layer::Dense(Dense::new(in_features, out_features, rng)),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => Layer::Conv(Conv2d::new(
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
                rng,
            )),
            LayerSpec::BatchNorm { features } => Layer::BatchNorm(BatchNorm::new(features)),
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Tanh => Layer::Tanh,
            LayerSpec::ResidualBlock {
                in_channels,
                out_channels,
                stride,
            } => Layer::ResidualBlock(ResidualBlock::new(in_channels, out_channels, stride, rng)),
            LayerSpec::LstmCell { input, hidden } => Layer::Lstm(LstmCell::new(input, hidden, rng)),
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::Concat { .. } => Layer::Flatten, // concat wiring lives in the model graph
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Tensor, // [out, in]
    pub b: Tensor, // [out]
}

impl Dense {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        Dense {
            w: Tensor::param(
                vec![out_features, in_features],
                fan_in_uniform(rng, in_features, out_features * in_features),
            )
            .unwrap(),
            b: Tensor::param(vec![out_features], vec![0.0; out_features]).unwrap(),
        }
    }

    pub fn identity(features: usize) -> Self {
        let mut w = vec![0.0; features * features];
        for i in 0..features {
            w[i * features + i] = 1.0;
        }
        Dense {
            w: Tensor::param(vec![features, features], w).unwrap(),
            b: Tensor::param(vec![features], vec![0.0; features]).unwrap(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Tensor, // [co, ci, k, k]
    pub b: Tensor, // [co]
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = ci * k * k;
        Conv2d {
            w: Tensor::param(vec![co, ci, k, k], fan_in_uniform(rng, fan_in, co * fan_in)).unwrap(),
            b: Tensor::param(vec![co], vec![0.0; co]).unwrap(),
            stride,
            pad,
        }
    }
}

/// Batch normalization with running statistics for eval mode.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub run_mean: Tensor,
    pub run_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        BatchNorm {
            gamma: Tensor::param(vec![features], vec![1.0; features]).unwrap(),
            beta: Tensor::param(vec![features], vec![0.0; features]).unwrap(),
            run_mean: Tensor::zeros(&[features]),
            run_var: Tensor::new(vec![features], vec![1.0; features]).unwrap(),
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Two 3x3 convs with batch norm and an identity or 1x1-projected skip.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
    pub proj: Option<(Conv2d, BatchNorm)>,
}

impl ResidualBlock {
    pub fn new(ci: usize, co: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let proj = if ci != co || stride != 1 {
            Some((Conv2d::new(ci, co, 1, stride, 0, rng), BatchNorm::new(co)))
        } else {
            None
        };
        ResidualBlock {
            conv1: Conv2d::new(ci, co, 3, stride, 1, rng),
            bn1: BatchNorm::new(co),
            conv2: Conv2d::new(co, co, 3, 1, 1, rng),
            bn2: BatchNorm::new(co),
            proj,
        }
    }
}

/// Single LSTM cell; gates packed as [i, f, g, o] rows of one weight matrix
/// over the concatenated [x, h] input.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w: Tensor, // [4*hidden, input + hidden]
    pub b: Tensor, // [4*hidden]
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let fan_in = input + hidden;
        LstmCell {
            w: Tensor::param(
                vec![4 * hidden, fan_in],
                fan_in_uniform(rng, fan_in, 4 * hidden * fan_in),
            )
            .unwrap(),
            b: Tensor::param(vec![4 * hidden], vec![0.0; 4 * hidden]).unwrap(),
            input,
            hidden,
        }
    }

    /// One recurrent step given bound weight ids; returns (h, c).
    pub fn step(
        &self,
        g: &mut Graph,
        bound: &[NodeId],
        x: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let (wid, bid) = (bound[0], bound[1]);
        let xin = g.concat_cols(x, h)?;
        let z = g.linear(xin, wid, bid)?;
        let hd = self.hidden;
        let i_gate = g.slice_cols(z, 0, hd)?;
        let f_gate = g.slice_cols(z, hd, hd)?;
        let g_gate = g.slice_cols(z, 2 * hd, hd)?;
        let o_gate = g.slice_cols(z, 3 * hd, hd)?;
        let i_act = g.sigmoid(i_gate);
        let f_act = g.sigmoid(f_gate);
        let g_act = g.tanh(g_gate);
        let o_act = g.sigmoid(o_gate);
        let fc = g.mul(f_act, c)?;
        let ig = g.mul(i_act, g_act)?;
        let c_new = g.add(fc, ig)?;
        let c_tanh = g.tanh(c_new);
        let h_new = g.mul(o_act, c_tanh)?;
        Ok((h_new, c_new))
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Dense(Dense),
    Conv(Conv2d),
    BatchNorm(BatchNorm),
    Relu,
    Tanh,
    ResidualBlock(ResidualBlock),
    Lstm(LstmCell),
    Flatten,
}

impl Layer {
    pub fn for_each_param(&self, f: &mut impl FnMut(&Tensor)) {
        match self {
            Layer::Dense(d) => {
                f(&d.w);
                f(&d.b);
            }
            Layer::Conv(c) => {
                f(&c.w);
                f(&c.b);
            }
            Layer::BatchNorm(bn) => {
                f(&bn.gamma);
                f(&bn.beta);
            }
            Layer::ResidualBlock(rb) => {
                f(&rb.conv1.w);
                f(&rb.conv1.b);
                f(&rb.bn1.gamma);
                f(&rb.bn1.beta);
                f(&rb.conv2.w);
                f(&rb.conv2.b);
                f(&rb.bn2.gamma);
                f(&rb.bn2.beta);
                if let Some((pc, pb)) = &rb.proj {
                    f(&pc.w);
                    f(&pc.b);
                    f(&pb.gamma);
                    f(&pb.beta);
                }
            }
            Layer::Lstm(l) => {
                f(&l.w);
                f(&l.b);
            }
            Layer::Relu | Layer::Tanh | Layer::Flatten => {}
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut impl FnMut(&mut Tensor)) {
        match self {
            Layer::Dense(d) => {
                f(&mut d.w);
                f(&mut d.b);
            }
            Layer::Conv(c) => {
                f(&mut c.w);
                f(&mut c.b);
            }
            Layer::BatchNorm(bn) => {
                f(&mut bn.gamma);
                f(&mut bn.beta);
            }
            Layer::ResidualBlock(rb) => {
                f(&mut rb.conv1.w);
                f(&mut rb.conv1.b);
                f(&mut rb.bn1.gamma);
                f(&mut rb.bn1.beta);
                f(&mut rb.conv2.w);
                f(&mut rb.conv2.b);
                f(&mut rb.bn2.gamma);
                f(&mut rb.bn2.beta);
                if let Some((pc, pb)) = &mut rb.proj {
                    f(&mut pc.w);
                    f(&mut pc.b);
                    f(&mut pb.gamma);
                    f(&mut pb.beta);
                }
            }
            Layer::Lstm(l) => {
                f(&mut l.w);
                f(&mut l.b);
            }
            Layer::Relu | Layer::Tanh | Layer::Flatten => {}
        }
    }

    /// Mutable parameter references in `for_each_param` order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(d) => vec![&mut d.w, &mut d.b],
            Layer::Conv(c) => vec![&mut c.w, &mut c.b],
            Layer::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            Layer::ResidualBlock(rb) => {
                let mut v = vec![
                    &mut rb.conv1.w,
                    &mut rb.conv1.b,
                    &mut rb.bn1.gamma,
                    &mut rb.bn1.beta,
                    &mut rb.conv2.w,
                    &mut rb.conv2.b,
                    &mut rb.bn2.gamma,
                    &mut rb.bn2.beta,
                ];
                if let Some((pc, pb)) = &mut rb.proj {
                    v.push(&mut pc.w);
                    v.push(&mut pc.b);
                    v.push(&mut pb.gamma);
                    v.push(&mut pb.beta);
                }
                v
            }
            Layer::Lstm(l) => vec![&mut l.w, &mut l.b],
            Layer::Relu | Layer::Tanh | Layer::Flatten => vec![],
        }
    }

    /// All persistent tensors: parameters plus running statistics.
    pub fn state_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::BatchNorm(bn) => vec![
                &mut bn.gamma,
                &mut bn.beta,
                &mut bn.run_mean,
                &mut bn.run_var,
            ],
            Layer::ResidualBlock(rb) => {
                let mut v = vec![
                    &mut rb.conv1.w,
                    &mut rb.conv1.b,
                    &mut rb.bn1.gamma,
                    &mut rb.bn1.beta,
                    &mut rb.bn1.run_mean,
                    &mut rb.bn1.run_var,
                    &mut rb.conv2.w,
                    &mut rb.conv2.b,
                    &mut rb.bn2.gamma,
                    &mut rb.bn2.beta,
                    &mut rb.bn2.run_mean,
                    &mut rb.bn2.run_var,
                ];
                if let Some((pc, pb)) = &mut rb.proj {
                    v.push(&mut pc.w);
                    v.push(&mut pc.b);
                    v.push(&mut pb.gamma);
                    v.push(&mut pb.beta);
                    v.push(&mut pb.run_mean);
                    v.push(&mut pb.run_var);
                }
                v
            }
            other => other.params_mut(),
        }
    }

    /// Push this layer's parameters onto the graph; ids in `for_each_param` order.
    pub fn bind(&self, g: &mut Graph) -> Vec<NodeId> {
        let mut ids = Vec::new();
        self.for_each_param(&mut |t| {
            ids.push(g.leaf_from(t));
        });
        ids
    }

    pub fn forward(
        &mut self,
        g: &mut Graph,
        bound: &[NodeId],
        x: NodeId,
        mode: Mode,
    ) -> Result<NodeId> {
        match self {
            Layer::Dense(_) => g.linear(x, bound[0], bound[1]),
            Layer::Conv(c) => g.conv2d(x, bound[0], bound[1], c.stride, c.pad),
            Layer::BatchNorm(bn) => {
                let (out, stats) = g.batch_norm(
                    x,
                    bound[0],
                    bound[1],
                    &bn.run_mean.data,
                    &bn.run_var.data,
                    bn.eps,
                    mode,
                )?;
                if let Some((mean, var)) = stats {
                    for i in 0..mean.len() {
                        bn.run_mean.data[i] =
                            (1.0 - bn.momentum) * bn.run_mean.data[i] + bn.momentum * mean[i];
                        bn.run_var.data[i] =
                            (1.0 - bn.momentum) * bn.run_var.data[i] + bn.momentum * var[i];
                    }
                }
                Ok(out)
            }
            Layer::Relu => Ok(g.relu(x)),
            Layer::Tanh => Ok(g.tanh(x)),
            Layer::ResidualBlock(rb) => {
                let mut i = 0;
                let mut take = |n: usize| {
                    let s = &bound[i..i + n];
                    i += n;
                    s.to_vec()
                };
                let c1 = take(2);
                let b1 = take(2);
                let c2 = take(2);
                let b2 = take(2);
                let y = g.conv2d(x, c1[0], c1[1], rb.conv1.stride, rb.conv1.pad)?;
                let (y, s1) = g.batch_norm(
                    y,
                    b1[0],
                    b1[1],
                    &rb.bn1.run_mean.data,
                    &rb.bn1.run_var.data,
                    rb.bn1.eps,
                    mode,
                )?;
                if let Some((m, v)) = s1 {
                    update_running(&mut rb.bn1, &m, &v);
                }
                let y = g.relu(y);
                let y = g.conv2d(y, c2[0], c2[1], rb.conv2.stride, rb.conv2.pad)?;
                let (y, s2) = g.batch_norm(
                    y,
                    b2[0],
                    b2[1],
                    &rb.bn2.run_mean.data,
                    &rb.bn2.run_var.data,
                    rb.bn2.eps,
                    mode,
                )?;
                if let Some((m, v)) = s2 {
                    update_running(&mut rb.bn2, &m, &v);
                }
                let skip = if let Some((pc, pb)) = &mut rb.proj {
                    let p = take(2);
                    let pbn = take(2);
                    let s = g.conv2d(x, p[0], p[1], pc.stride, pc.pad)?;
                    let (s, st) = g.batch_norm(
                        s,
                        pbn[0],
                        pbn[1],
                        &pb.run_mean.data,
                        &pb.run_var.data,
                        pb.eps,
                        mode,
                    )?;
                    if let Some((m, v)) = st {
                        for i in 0..m.len() {
                            pb.run_mean.data[i] =
                                (1.0 - pb.momentum) * pb.run_mean.data[i] + pb.momentum * m[i];
                            pb.run_var.data[i] =
                                (1.0 - pb.momentum) * pb.run_var.data[i] + pb.momentum * v[i];
                        }
                    }
                    s
                } else {
                    x
                };
                let sum = g.add(y, skip)?;
                Ok(g.relu(sum))
            }
            Layer::Lstm(l) => {
                // single-step semantics with zero initial state
                let n = g.shape(x)[0];
                let h0 = g.leaf(Tensor::zeros(&[n, l.hidden]));
                let c0 = g.leaf(Tensor::zeros(&[n, l.hidden]));
                let l = l.clone();
                let (h, _) = l.step(g, bound, x, h0, c0)?;
                Ok(h)
            }
            Layer::Flatten => {
                let shape = g.shape(x).to_vec();
                let n = shape[0];
                let rest: usize = shape[1..].iter().product();
                g.reshape(x, vec![n, rest])
            }
        }
    }
}

fn update_running(bn: &mut BatchNorm, mean: &[f64], var: &[f64]) {
    for i in 0..mean.len() {
        bn.run_mean.data[i] = (1.0 - bn.momentum) * bn.run_mean.data[i] + bn.momentum * mean[i];
        bn.run_var.data[i] = (1.0 - bn.momentum) * bn.run_var.data[i] + bn.momentum * var[i];
    }
}

/// Sequential layer stack with per-layer finiteness checks.
#[derive(Debug, Clone, Default)]
pub struct Stack {
    pub layers: Vec<Layer>,
}

impl Stack {
    pub fn from_specs(specs: &[LayerSpec], rng: &mut impl Rng) -> Self {
        Stack {
            layers: specs.iter().map(|s| s.build(rng)).collect(),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> Vec<Vec<NodeId>> {
        self.layers.iter().map(|l| l.bind(g)).collect()
    }

    pub fn forward_bound(
        &mut self,
        g: &mut Graph,
        bound: &[Vec<NodeId>],
        x: NodeId,
        mode: Mode,
    ) -> Result<NodeId> {
        let mut cur = x;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            cur = layer.forward(g, &bound[i], cur, mode)?;
            if !g.value(cur).is_finite() {
                return Err(Error::NumericFault {
                    layer: i,
                    what: "non-finite activation".to_string(),
                });
            }
        }
        Ok(cur)
    }

    /// Bind + forward in one call; returns (output, bound ids) so gradients
    /// can be harvested after backward.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        x: NodeId,
        mode: Mode,
    ) -> Result<(NodeId, Vec<Vec<NodeId>>)> {
        let bound = self.bind(g);
        let out = self.forward_bound(g, &bound, x, mode)?;
        Ok((out, bound))
    }

    /// Copy gradients from bound graph leaves back into parameter tensors.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &[Vec<NodeId>]) {
        for (layer, ids) in self.layers.iter_mut().zip(bound) {
            let mut i = 0;
            layer.for_each_param_mut(&mut |t| {
                let src = g.grad(ids[i]);
                if let Some(dst) = &mut t.grad {
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
                i += 1;
            });
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for l in &self.layers {
            l.for_each_param(&mut |t| n += t.numel());
        }
        n
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }

    pub fn state_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.state_mut()).collect()
    }

    pub fn zero_grads(&mut self) {
        for l in &mut self.layers {
            l.for_each_param_mut(&mut |t| t.zero_grad());
        }
    }

    /// Flat list of bound ids, matching `flat_params` order.
    pub fn flat_bound(bound: &[Vec<NodeId>]) -> Vec<NodeId> {
        bound.iter().flatten().copied().collect()
    }
}
