//! The four estimator variants: state-only MLP, vision-only CNN, fused
//! vision+state, and the recurrent vision+state model.

use crate::data::STATE_DIM;
use crate::error::{Error, Result};
use crate::tensor::layers::{Dense, LayerSpec, LstmCell, Stack};
use crate::tensor::{Graph, Mode, NodeId, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Variant {
    S,
    V,
    Vs,
    Rnn,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::S, Variant::V, Variant::Vs, Variant::Rnn];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::S => "s",
            Variant::V => "v",
            Variant::Vs => "vs",
            Variant::Rnn => "rnn",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "s" => Ok(Variant::S),
            "v" => Ok(Variant::V),
            "vs" => Ok(Variant::Vs),
            "rnn" => Ok(Variant::Rnn),
            other => Err(Error::Usage(format!("unknown network variant '{other}'"))),
        }
    }

    pub fn uses_images(&self) -> bool {
        !matches!(self, Variant::S)
    }

    pub fn uses_state(&self) -> bool {
        !matches!(self, Variant::V)
    }
}

/// Spacetime stack depth the vision trunks consume.
pub const IMAGE_CHANNELS: usize = 3;
/// Feature width after global average pooling.
pub const ENC_DIM: usize = 128;
/// Recurrent window length.
pub const SEQ_LEN: usize = 60;
/// LSTM hidden width.
pub const HIDDEN_DIM: usize = 128;
/// Vision embedding carried into the fused head.
pub const VS_EMBED: usize = 30;

pub fn backbone_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d {
            in_channels: IMAGE_CHANNELS,
            out_channels: 16,
            kernel: 3,
            stride: 2,
            pad: 1,
        },
        LayerSpec::BatchNorm { features: 16 },
        LayerSpec::Relu,
        LayerSpec::ResidualBlock {
            in_channels: 16,
            out_channels: 16,
            stride: 1,
        },
        LayerSpec::ResidualBlock {
            in_channels: 16,
            out_channels: 32,
            stride: 2,
        },
        LayerSpec::ResidualBlock {
            in_channels: 32,
            out_channels: 64,
            stride: 2,
        },
        LayerSpec::ResidualBlock {
            in_channels: 64,
            out_channels: 128,
            stride: 2,
        },
    ]
}

pub fn s_specs() -> Vec<LayerSpec> {
    let widths = [STATE_DIM, 500, 1000, 1000, 1000, 500, 50, 3];
    let mut specs = Vec::new();
    for w in widths.windows(2) {
        specs.push(LayerSpec::Dense {
            in_features: w[0],
            out_features: w[1],
        });
        if w[1] != 3 {
            specs.push(LayerSpec::Relu);
        }
    }
    specs
}

fn v_head_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Dense {
            in_features: ENC_DIM,
            out_features: 50,
        },
        LayerSpec::Relu,
        LayerSpec::Dense {
            in_features: 50,
            out_features: 3,
        },
    ]
}

fn vs_embed_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Dense {
            in_features: ENC_DIM,
            out_features: VS_EMBED,
        },
        LayerSpec::Relu,
    ]
}

fn vs_fusion_specs() -> Vec<LayerSpec> {
    let fused = VS_EMBED + STATE_DIM; // 84
    vec![
        LayerSpec::Dense {
            in_features: fused,
            out_features: 84,
        },
        LayerSpec::Relu,
        LayerSpec::Dense {
            in_features: 84,
            out_features: 180,
        },
        LayerSpec::Relu,
        LayerSpec::Dense {
            in_features: 180,
            out_features: 50,
        },
        LayerSpec::Relu,
        LayerSpec::Dense {
            in_features: 50,
            out_features: 3,
        },
    ]
}

fn rnn_embed_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Dense {
            in_features: ENC_DIM,
            out_features: ENC_DIM,
        },
        LayerSpec::Tanh,
    ]
}

fn seeded(seed: u64, salt: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in salt.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

#[derive(Debug, Clone)]
pub enum Network {
    S {
        mlp: Stack,
    },
    V {
        backbone: Stack,
        head: Stack,
    },
    Vs {
        backbone: Stack,
        embed: Stack,
        fusion: Stack,
    },
    Rnn {
        backbone: Stack,
        embed: Stack,
        lstm: LstmCell,
        out: Dense,
    },
}

impl Network {
    /// Build a fresh network. The conv trunk draws from a stream keyed
    /// only by `seed`, so V and VS start from identical vision weights.
    pub fn build(variant: Variant, seed: u64) -> Network {
        match variant {
            Variant::S => Network::S {
                mlp: Stack::from_specs(&s_specs(), &mut seeded(seed, "state-mlp")),
            },
            Variant::V => Network::V {
                backbone: Stack::from_specs(&backbone_specs(), &mut seeded(seed, "backbone")),
                head: Stack::from_specs(&v_head_specs(), &mut seeded(seed, "v-head")),
            },
            Variant::Vs => Network::Vs {
                backbone: Stack::from_specs(&backbone_specs(), &mut seeded(seed, "backbone")),
                embed: Stack::from_specs(&vs_embed_specs(), &mut seeded(seed, "vs-embed")),
                fusion: Stack::from_specs(&vs_fusion_specs(), &mut seeded(seed, "vs-fusion")),
            },
            Variant::Rnn => Network::Rnn {
                backbone: Stack::from_specs(&backbone_specs(), &mut seeded(seed, "backbone")),
                embed: Stack::from_specs(&rnn_embed_specs(), &mut seeded(seed, "rnn-embed")),
                lstm: LstmCell::new(
                    ENC_DIM + STATE_DIM,
                    HIDDEN_DIM,
                    &mut seeded(seed, "rnn-lstm"),
                ),
                out: Dense::new(HIDDEN_DIM, 3, &mut seeded(seed, "rnn-out")),
            },
        }
    }

    pub fn variant(&self) -> Variant {
        match self {
            Network::S { .. } => Variant::S,
            Network::V { .. } => Variant::V,
            Network::Vs { .. } => Variant::Vs,
            Network::Rnn { .. } => Variant::Rnn,
        }
    }

    fn stacks_mut(&mut self) -> Vec<&mut Stack> {
        match self {
            Network::S { mlp } => vec![mlp],
            Network::V { backbone, head } => vec![backbone, head],
            Network::Vs {
                backbone,
                embed,
                fusion,
            } => vec![backbone, embed, fusion],
            Network::Rnn {
                backbone, embed, ..
            } => vec![backbone, embed],
        }
    }

    /// Mutable references to every parameter, in a frozen traversal order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Network::S { mlp } => mlp.params_mut(),
            Network::V { backbone, head } => {
                let mut v = backbone.params_mut();
                v.extend(head.params_mut());
                v
            }
            Network::Vs {
                backbone,
                embed,
                fusion,
            } => {
                let mut v = backbone.params_mut();
                v.extend(embed.params_mut());
                v.extend(fusion.params_mut());
                v
            }
            Network::Rnn {
                backbone,
                embed,
                lstm,
                out,
            } => {
                let mut v = backbone.params_mut();
                v.extend(embed.params_mut());
                v.push(&mut lstm.w);
                v.push(&mut lstm.b);
                v.push(&mut out.w);
                v.push(&mut out.b);
                v
            }
        }
    }

    pub fn param_count(&mut self) -> usize {
        self.params_mut().iter().map(|t| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.params_mut() {
            t.zero_grad();
        }
    }

    /// Zero the accumulated gradients of the stem convolution and its
    /// normalization (the four leading backbone tensors) so the optimizer
    /// leaves them untouched; only the residual and fully connected layers
    /// keep training.
    pub fn freeze_stem_grads(&mut self) -> Result<()> {
        if !self.variant().uses_images() {
            return Err(Error::Usage(
                "the state-only variant has no convolutional stem to freeze".into(),
            ));
        }
        for t in self.params_mut().into_iter().take(4) {
            t.zero_grad();
        }
        Ok(())
    }

    /// One-shot prediction for the feedforward variants. `image` is a
    /// bound [n, 3, h, w] leaf, `state` a bound [n, 54] leaf.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        image: Option<NodeId>,
        state: Option<NodeId>,
        mode: Mode,
    ) -> Result<(NodeId, Vec<Vec<NodeId>>)> {
        match self {
            Network::S { mlp } => {
                let x = state.ok_or_else(|| Error::Usage("state input required".into()))?;
                mlp.forward(g, x, mode)
            }
            Network::V { backbone, head } => {
                let x = image.ok_or_else(|| Error::Usage("image input required".into()))?;
                let (feat, mut bound) = backbone.forward(g, x, mode)?;
                let pooled = g.global_avg_pool(feat)?;
                let (out, hb) = head.forward(g, pooled, mode)?;
                bound.extend(hb);
                Ok((out, bound))
            }
            Network::Vs {
                backbone,
                embed,
                fusion,
            } => {
                let x = image.ok_or_else(|| Error::Usage("image input required".into()))?;
                let s = state.ok_or_else(|| Error::Usage("state input required".into()))?;
                let (feat, mut bound) = backbone.forward(g, x, mode)?;
                let pooled = g.global_avg_pool(feat)?;
                let (emb, eb) = embed.forward(g, pooled, mode)?;
                bound.extend(eb);
                let fused = g.concat_cols(emb, s)?;
                let (out, fb) = fusion.forward(g, fused, mode)?;
                bound.extend(fb);
                Ok((out, bound))
            }
            Network::Rnn { .. } => Err(Error::Usage(
                "recurrent variant needs a sequence; use forward_sequence".into(),
            )),
        }
    }

    /// Forward pass that also exposes the final pre-pool feature map of the
    /// backbone, for saliency visualization. Only the convolutional
    /// feedforward variants have one.
    pub fn forward_with_feature(
        &mut self,
        g: &mut Graph,
        image: NodeId,
        state: Option<NodeId>,
        mode: Mode,
    ) -> Result<(NodeId, NodeId)> {
        match self {
            Network::V { backbone, head } => {
                let (feat, _) = backbone.forward(g, image, mode)?;
                let pooled = g.global_avg_pool(feat)?;
                let (out, _) = head.forward(g, pooled, mode)?;
                Ok((out, feat))
            }
            Network::Vs {
                backbone,
                embed,
                fusion,
            } => {
                let s = state.ok_or_else(|| Error::Usage("state input required".into()))?;
                let (feat, _) = backbone.forward(g, image, mode)?;
                let pooled = g.global_avg_pool(feat)?;
                let (emb, _) = embed.forward(g, pooled, mode)?;
                let fused = g.concat_cols(emb, s)?;
                let (out, _) = fusion.forward(g, fused, mode)?;
                Ok((out, feat))
            }
            _ => Err(Error::Usage(
                "saliency maps need a convolutional feature map; use a vision variant".into(),
            )),
        }
    }

    /// Per-frame vision encoding for the recurrent variant; the returned
    /// bound ids are reused across a window so weight gradients sum over
    /// frames.
    fn encode_bound(
        &mut self,
        g: &mut Graph,
        bound_backbone: &[Vec<NodeId>],
        bound_embed: &[Vec<NodeId>],
        image: NodeId,
        mode: Mode,
    ) -> Result<NodeId> {
        match self {
            Network::Rnn {
                backbone, embed, ..
            } => {
                let feat = backbone.forward_bound(g, bound_backbone, image, mode)?;
                let pooled = g.global_avg_pool(feat)?;
                embed.forward_bound(g, bound_embed, pooled, mode)
            }
            _ => Err(Error::Usage(
                "encode is only defined for the recurrent variant".into(),
            )),
        }
    }

    /// Standalone encoding used for cached evaluation and benchmarking.
    pub fn encode_frame(&mut self, g: &mut Graph, image: NodeId, mode: Mode) -> Result<NodeId> {
        let (bb, eb) = match self {
            Network::Rnn {
                backbone, embed, ..
            } => (backbone.bind(g), embed.bind(g)),
            _ => {
                return Err(Error::Usage(
                    "encode is only defined for the recurrent variant".into(),
                ))
            }
        };
        self.encode_bound(g, &bb, &eb, image, mode)
    }

    /// Unrolled recurrent prediction over a window of frames and states.
    /// Output is the estimate at the final step.
    pub fn forward_sequence(
        &mut self,
        g: &mut Graph,
        images: &[NodeId],
        states: &[NodeId],
        mode: Mode,
    ) -> Result<(NodeId, Vec<Vec<NodeId>>)> {
        let (bb, eb) = match self {
            Network::Rnn {
                backbone, embed, ..
            } => (backbone.bind(g), embed.bind(g)),
            _ => {
                return Err(Error::Usage(
                    "sequence input is only defined for the recurrent variant".into(),
                ))
            }
        };
        let mut encs = Vec::with_capacity(images.len());
        for img in images {
            encs.push(self.encode_bound(g, &bb, &eb, *img, mode)?);
        }
        self.sequence_from_encodings(g, bb, eb, &encs, states)
    }

    /// Same recurrence, but over precomputed frame encodings.
    pub fn forward_sequence_encoded(
        &mut self,
        g: &mut Graph,
        encodings: &[NodeId],
        states: &[NodeId],
    ) -> Result<(NodeId, Vec<Vec<NodeId>>)> {
        let (bb, eb) = match self {
            Network::Rnn {
                backbone, embed, ..
            } => (backbone.bind(g), embed.bind(g)),
            _ => {
                return Err(Error::Usage(
                    "sequence input is only defined for the recurrent variant".into(),
                ))
            }
        };
        self.sequence_from_encodings(g, bb, eb, encodings, states)
    }

    fn sequence_from_encodings(
        &mut self,
        g: &mut Graph,
        bound_backbone: Vec<Vec<NodeId>>,
        bound_embed: Vec<Vec<NodeId>>,
        encs: &[NodeId],
        states: &[NodeId],
    ) -> Result<(NodeId, Vec<Vec<NodeId>>)> {
        let Network::Rnn { lstm, out, .. } = self else {
            return Err(Error::Usage(
                "sequence input is only defined for the recurrent variant".into(),
            ));
        };
        if encs.is_empty() || encs.len() != states.len() {
            return Err(Error::Shape(format!(
                "sequence: {} encodings vs {} states",
                encs.len(),
                states.len()
            )));
        }
        let lstm_bound = vec![g.leaf_from(&lstm.w), g.leaf_from(&lstm.b)];
        let out_bound = vec![g.leaf_from(&out.w), g.leaf_from(&out.b)];
        let n = g.shape(encs[0])[0];
        let mut h = g.leaf(Tensor::zeros(&[n, lstm.hidden]));
        let mut c = g.leaf(Tensor::zeros(&[n, lstm.hidden]));
        for (enc, st) in encs.iter().zip(states) {
            let x = g.concat_cols(*enc, *st)?;
            let (h2, c2) = lstm.step(g, &lstm_bound, x, h, c)?;
            h = h2;
            c = c2;
        }
        let pred = g.linear(h, out_bound[0], out_bound[1])?;
        let mut bound = bound_backbone;
        bound.extend(bound_embed);
        bound.push(lstm_bound);
        bound.push(out_bound);
        Ok((pred, bound))
    }

    /// One streaming step of the recurrent variant with externally carried
    /// hidden and cell nodes. Returns (prediction, next hidden, next cell).
    pub fn rnn_step(
        &mut self,
        g: &mut Graph,
        image: NodeId,
        state: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let enc = self.encode_frame(g, image, Mode::Eval)?;
        self.rnn_step_encoded(g, enc, state, h, c)
    }

    /// Same streaming step over a precomputed frame encoding.
    pub fn rnn_step_encoded(
        &mut self,
        g: &mut Graph,
        enc: NodeId,
        state: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let Network::Rnn { lstm, out, .. } = self else {
            return Err(Error::Usage(
                "streaming steps are only defined for the recurrent variant".into(),
            ));
        };
        let lstm_bound = vec![g.leaf_from(&lstm.w), g.leaf_from(&lstm.b)];
        let w = g.leaf_from(&out.w);
        let b = g.leaf_from(&out.b);
        let x = g.concat_cols(enc, state)?;
        let (h2, c2) = lstm.step(g, &lstm_bound, x, h, c)?;
        let pred = g.linear(h2, w, b)?;
        Ok((pred, h2, c2))
    }

    /// Every persistent tensor, including normalization running stats.
    pub fn state_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Network::S { mlp } => mlp.state_mut(),
            Network::V { backbone, head } => {
                let mut v = backbone.state_mut();
                v.extend(head.state_mut());
                v
            }
            Network::Vs {
                backbone,
                embed,
                fusion,
            } => {
                let mut v = backbone.state_mut();
                v.extend(embed.state_mut());
                v.extend(fusion.state_mut());
                v
            }
            Network::Rnn {
                backbone,
                embed,
                lstm,
                out,
            } => {
                let mut v = backbone.state_mut();
                v.extend(embed.state_mut());
                v.push(&mut lstm.w);
                v.push(&mut lstm.b);
                v.push(&mut out.w);
                v.push(&mut out.b);
                v
            }
        }
    }

    /// Write weights plus any `extra` named tensors to a checkpoint file.
    pub fn save(
        &mut self,
        path: &std::path::Path,
        extra: &[(String, Vec<usize>, Vec<f64>)],
    ) -> Result<()> {
        let variant_code = vec![self.variant() as usize as f64];
        let state = self.state_mut();
        let mut entries: Vec<(String, Vec<usize>, &[f64])> =
            Vec::with_capacity(state.len() + 1 + extra.len());
        let shapes: Vec<Vec<usize>> = state.iter().map(|t| t.shape.clone()).collect();
        entries.push(("variant".into(), vec![1], &variant_code));
        for (i, t) in state.iter().enumerate() {
            entries.push((format!("t{i:04}"), shapes[i].clone(), &t.data));
        }
        for (name, shape, data) in extra {
            entries.push((name.clone(), shape.clone(), data));
        }
        crate::tensor::save_checkpoint(path, &entries)
    }

    /// Rebuild a network from a checkpoint; returns the network and any
    /// extra tensors stored alongside the weights.
    pub fn load(path: &std::path::Path) -> Result<(Network, Vec<(String, Vec<usize>, Vec<f64>)>)> {
        let entries = crate::tensor::load_checkpoint(path)?;
        let variant = entries
            .iter()
            .find(|(n, _, _)| n == "variant")
            .and_then(|(_, _, d)| d.first().copied())
            .ok_or_else(|| Error::Checkpoint("missing variant record".into()))?;
        let variant = match variant as usize {
            0 => Variant::S,
            1 => Variant::V,
            2 => Variant::Vs,
            3 => Variant::Rnn,
            other => return Err(Error::Checkpoint(format!("unknown variant code {other}"))),
        };
        let mut net = Network::build(variant, 0);
        let mut extra = Vec::new();
        {
            let mut state = net.state_mut();
            let mut loaded = 0usize;
            for (name, shape, data) in entries {
                if name == "variant" {
                    continue;
                }
                if let Some(idx) = name
                    .strip_prefix('t')
                    .and_then(|s| s.parse::<usize>().ok())
                    .filter(|_| name.len() == 5)
                {
                    let t = state
                        .get_mut(idx)
                        .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
                    if t.shape != shape {
                        return Err(Error::Checkpoint(format!(
                            "{name}: shape {:?} does not match architecture {:?}",
                            shape, t.shape
                        )));
                    }
                    t.data = data;
                    loaded += 1;
                } else {
                    extra.push((name, shape, data));
                }
            }
            if loaded != state.len() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint holds {loaded} weight tensors, architecture needs {}",
                    state.len()
                )));
            }
        }
        Ok((net, extra))
    }

    /// Copy gradients off the graph into the parameter tensors, matching
    /// the bound group order returned by the forward calls.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &[Vec<NodeId>]) {
        let layer_counts: Vec<usize> = self.stacks_mut().iter().map(|s| s.layers.len()).collect();
        let mut off = 0;
        let is_rnn = matches!(self, Network::Rnn { .. });
        {
            let mut stacks = self.stacks_mut();
            for (stack, count) in stacks.iter_mut().zip(&layer_counts) {
                stack.accumulate_grads(g, &bound[off..off + count]);
                off += count;
            }
        }
        if is_rnn {
            let Network::Rnn { lstm, out, .. } = self else {
                unreachable!()
            };
            for (t, id) in [&mut lstm.w, &mut lstm.b].into_iter().zip(&bound[off]) {
                if let Some(dst) = &mut t.grad {
                    dst.iter_mut().zip(g.grad(*id)).for_each(|(a, b)| *a += b);
                }
            }
            for (t, id) in [&mut out.w, &mut out.b].into_iter().zip(&bound[off + 1]) {
                if let Some(dst) = &mut t.grad {
                    dst.iter_mut().zip(g.grad(*id)).for_each(|(a, b)| *a += b);
                }
            }
        }
    }

    /// Ids of the weight matrices that the L1 penalty should touch
    /// (weights only, no biases or normalization parameters), given the
    /// bound groups from a forward call.
    pub fn l1_weight_ids(&mut self, bound: &[Vec<NodeId>]) -> Vec<NodeId> {
        // weight tensors are the rank-2+ parameters; pair the flat bound
        // order with the parameter traversal
        let flat: Vec<NodeId> = bound.iter().flatten().copied().collect();
        self.params_mut()
            .iter()
            .zip(&flat)
            .filter(|(t, _)| t.shape.len() >= 2)
            .map(|(_, id)| *id)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn leaf_rand(g: &mut Graph, shape: &[usize], rng: &mut ChaCha8Rng) -> NodeId {
        let data: Vec<f64> = (0..shape.iter().product::<usize>())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        g.leaf(Tensor::new(shape.to_vec(), data).unwrap())
    }

    #[test]
    fn s_param_count_closed_form() {
        // independent sum over the dense sizes
        let widths = [STATE_DIM, 500, 1000, 1000, 1000, 500, 50, 3];
        let expected: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        assert_eq!(expected, 3_056_203);
        let mut net = Network::build(Variant::S, 1);
        assert_eq!(net.param_count(), expected);
    }

    #[test]
    fn v_and_vs_share_backbone_init() {
        let mut v = Network::build(Variant::V, 9);
        let mut vs = Network::build(Variant::Vs, 9);
        let (Network::V { backbone: a, .. }, Network::Vs { backbone: b, .. }) = (&mut v, &mut vs)
        else {
            unreachable!()
        };
        let (pa, pb) = (a.params_mut(), b.params_mut());
        assert_eq!(pa.len(), pb.len());
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(x.data, y.data);
        }
        // a different seed must give different weights
        let mut v2 = Network::build(Variant::V, 10);
        let Network::V { backbone: c, .. } = &mut v2 else {
            unreachable!()
        };
        assert_ne!(c.params_mut()[0].data, v_first_weight(&mut v));
    }

    fn v_first_weight(v: &mut Network) -> Vec<f64> {
        v.params_mut()[0].data.clone()
    }

    #[test]
    fn feedforward_output_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for variant in [Variant::S, Variant::V, Variant::Vs] {
            let mut net = Network::build(variant, 4);
            let mut g = Graph::new();
            let img = leaf_rand(&mut g, &[2, IMAGE_CHANNELS, 32, 32], &mut rng);
            let st = leaf_rand(&mut g, &[2, STATE_DIM], &mut rng);
            let (out, _) = net
                .forward(&mut g, Some(img), Some(st), Mode::Train)
                .unwrap();
            assert_eq!(g.shape(out), &[2, 3], "{variant:?}");
        }
    }

    #[test]
    fn missing_inputs_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let img = leaf_rand(&mut g, &[1, IMAGE_CHANNELS, 32, 32], &mut rng);
        let st = leaf_rand(&mut g, &[1, STATE_DIM], &mut rng);
        let mut v = Network::build(Variant::V, 0);
        assert!(v.forward(&mut g, None, Some(st), Mode::Eval).is_err());
        let mut vs = Network::build(Variant::Vs, 0);
        assert!(vs.forward(&mut g, Some(img), None, Mode::Eval).is_err());
        let mut rnn = Network::build(Variant::Rnn, 0);
        assert!(rnn
            .forward(&mut g, Some(img), Some(st), Mode::Eval)
            .is_err());
        let mut s = Network::build(Variant::S, 0);
        assert!(s
            .forward_sequence(&mut g, &[img], &[st], Mode::Eval)
            .is_err());
    }

    #[test]
    fn gradient_reaches_every_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for variant in [Variant::S, Variant::V, Variant::Vs] {
            let mut net = Network::build(variant, 6);
            let mut g = Graph::new();
            let img = leaf_rand(&mut g, &[4, IMAGE_CHANNELS, 16, 16], &mut rng);
            let st = leaf_rand(&mut g, &[4, STATE_DIM], &mut rng);
            let tgt_data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let tgt = Tensor::new(vec![4, 3], tgt_data).unwrap();
            let (out, bound) = net
                .forward(&mut g, Some(img), Some(st), Mode::Train)
                .unwrap();
            let loss = g.mse_loss(out, &tgt).unwrap();
            g.backward(loss).unwrap();
            net.zero_grads();
            net.accumulate_grads(&g, &bound);
            for (i, t) in net.params_mut().iter().enumerate() {
                let grad = t.grad.as_ref().unwrap();
                assert!(
                    grad.iter().any(|v| *v != 0.0),
                    "{variant:?}: parameter {i} got no gradient"
                );
            }
        }
    }

    #[test]
    fn gradient_reaches_every_rnn_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net = Network::build(Variant::Rnn, 7);
        let mut g = Graph::new();
        let imgs: Vec<NodeId> = (0..4)
            .map(|_| leaf_rand(&mut g, &[2, IMAGE_CHANNELS, 16, 16], &mut rng))
            .collect();
        let sts: Vec<NodeId> = (0..4)
            .map(|_| leaf_rand(&mut g, &[2, STATE_DIM], &mut rng))
            .collect();
        let tgt_data: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tgt = Tensor::new(vec![2, 3], tgt_data).unwrap();
        let (out, bound) = net
            .forward_sequence(&mut g, &imgs, &sts, Mode::Train)
            .unwrap();
        assert_eq!(g.shape(out), &[2, 3]);
        let loss = g.mse_loss(out, &tgt).unwrap();
        g.backward(loss).unwrap();
        net.zero_grads();
        net.accumulate_grads(&g, &bound);
        for (i, t) in net.params_mut().iter().enumerate() {
            let grad = t.grad.as_ref().unwrap();
            assert!(
                grad.iter().any(|v| *v != 0.0),
                "rnn: parameter {i} got no gradient"
            );
        }
    }

    #[test]
    fn cached_encodings_match_direct_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut net = Network::build(Variant::Rnn, 8);
        let mut g = Graph::new();
        let imgs: Vec<NodeId> = (0..3)
            .map(|_| leaf_rand(&mut g, &[1, IMAGE_CHANNELS, 16, 16], &mut rng))
            .collect();
        let sts: Vec<NodeId> = (0..3)
            .map(|_| leaf_rand(&mut g, &[1, STATE_DIM], &mut rng))
            .collect();
        let (direct, _) = net
            .forward_sequence(&mut g, &imgs, &sts, Mode::Eval)
            .unwrap();
        let encs: Vec<NodeId> = imgs
            .iter()
            .map(|i| net.encode_frame(&mut g, *i, Mode::Eval).unwrap())
            .collect();
        let (cached, _) = net.forward_sequence_encoded(&mut g, &encs, &sts).unwrap();
        assert_eq!(g.value(direct).data, g.value(cached).data);
    }

    #[test]
    fn l1_ids_cover_weights_not_biases() {
        let mut net = Network::build(Variant::Vs, 2);
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = leaf_rand(&mut g, &[1, IMAGE_CHANNELS, 16, 16], &mut rng);
        let st = leaf_rand(&mut g, &[1, STATE_DIM], &mut rng);
        let (_, bound) = net
            .forward(&mut g, Some(img), Some(st), Mode::Eval)
            .unwrap();
        let ids = net.l1_weight_ids(&bound);
        let matrices = net
            .params_mut()
            .iter()
            .filter(|t| t.shape.len() >= 2)
            .count();
        assert_eq!(ids.len(), matrices);
        for id in ids {
            assert!(g.shape(id).len() >= 2);
        }
    }

    #[test]
    fn sequence_rejects_mismatched_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = Network::build(Variant::Rnn, 3);
        let mut g = Graph::new();
        let img = leaf_rand(&mut g, &[1, IMAGE_CHANNELS, 16, 16], &mut rng);
        let st = leaf_rand(&mut g, &[1, STATE_DIM], &mut rng);
        assert!(net
            .forward_sequence(&mut g, &[img], &[st, st], Mode::Eval)
            .is_err());
        assert!(net.forward_sequence(&mut g, &[], &[], Mode::Eval).is_err());
    }
}
