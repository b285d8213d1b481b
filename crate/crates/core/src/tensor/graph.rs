use super::{Mode, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// y = x · wᵀ + b, x:[n,in] w:[out,in] b:[out]
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    /// x:[n,ci,h,w] w:[co,ci,k,k] b:[co]
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    /// Feature axis 1; saved statistics are the ones used in the forward pass.
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        mode: Mode,
    },
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    GlobalAvgPool(NodeId),
    Reshape(NodeId),
    ConcatCols(NodeId, NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    MeanAll(NodeId),
    /// 0.5-free mean squared error against a constant target.
    MseLoss {
        pred: NodeId,
        target: Tensor,
    },
    AbsSum(NodeId),
    AddScalars(Vec<NodeId>),
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
}

/// Records a forward computation for reverse-mode differentiation.
pub struct Graph {
    nodes: Vec<Node>,
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() == m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv_out_extent(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Scatter input patches into a [ci·k·k, n·ho·wo] column matrix.
fn im2col(
    x: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut [f64],
) {
    let ho = conv_out_extent(h, k, stride, pad);
    let wo = conv_out_extent(w, k, stride, pad);
    let ncols = n * ho * wo;
    cols.iter_mut().for_each(|v| *v = 0.0);
    for ni in 0..n {
        for c in 0..ci {
            let base = (ni * ci + c) * h * w;
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    for oh in 0..ho {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let ih = ih as usize;
                        for ow in 0..wo {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let col = (ni * ho + oh) * wo + ow;
                            cols[row * ncols + col] = x[base + ih * w + iw as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate column gradients back into the input.
#[allow(clippy::too_many_arguments)]
fn col2im_acc(
    dcols: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dx: &mut [f64],
) {
    let ho = conv_out_extent(h, k, stride, pad);
    let wo = conv_out_extent(w, k, stride, pad);
    let ncols = n * ho * wo;
    for ni in 0..n {
        for c in 0..ci {
            let base = (ni * ci + c) * h * w;
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    for oh in 0..ho {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let ih = ih as usize;
                        for ow in 0..wo {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let col = (ni * ho + oh) * wo + ow;
                            dx[base + ih * w + iw as usize] += dcols[row * ncols + col];
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let grad = vec![0.0; value.numel()];
        self.nodes.push(Node { value, grad, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    pub fn leaf_from(&mut self, t: &Tensor) -> NodeId {
        self.push(
            Tensor {
                shape: t.shape.clone(),
                data: t.data.clone(),
                grad: None,
                requires_grad: false,
            },
            Op::Leaf,
        )
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(Error::Shape(format!(
                "linear: x {:?} w {:?} b {:?}",
                xs, ws, bs
            )));
        }
        let (n, inf, outf) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * outf];
        gemm(
            n,
            inf,
            outf,
            1.0,
            &self.nodes[x.0].value.data,
            inf as isize,
            1,
            &self.nodes[w.0].value.data,
            1,
            inf as isize,
            0.0,
            &mut out,
        );
        let bias = &self.nodes[b.0].value.data;
        for r in 0..n {
            for c in 0..outf {
                out[r * outf + c] += bias[c];
            }
        }
        Ok(self.push(Tensor::new(vec![n, outf], out)?, Op::Linear { x, w, b }))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(Error::Shape(format!("conv2d: x {:?} w {:?}", xs, ws)));
        }
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Shape(format!(
                "conv2d: kernel {} exceeds padded input {:?}",
                k, xs
            )));
        }
        let ho = conv_out_extent(h, k, stride, pad);
        let wo = conv_out_extent(wd, k, stride, pad);
        let ncols = n * ho * wo;
        let ckk = ci * k * k;
        let mut cols = vec![0.0; ckk * ncols];
        im2col(
            &self.nodes[x.0].value.data,
            n,
            ci,
            h,
            wd,
            k,
            stride,
            pad,
            &mut cols,
        );
        let mut out_mat = vec![0.0; co * ncols];
        gemm(
            co,
            ckk,
            ncols,
            1.0,
            &self.nodes[w.0].value.data,
            ckk as isize,
            1,
            &cols,
            ncols as isize,
            1,
            0.0,
            &mut out_mat,
        );
        let bias = &self.nodes[b.0].value.data;
        let mut out = vec![0.0; n * co * ho * wo];
        for ni in 0..n {
            for o in 0..co {
                let dst = (ni * co + o) * ho * wo;
                let bsrc = o * ncols + ni * ho * wo;
                for p in 0..ho * wo {
                    out[dst + p] = out_mat[bsrc + p] + bias[o];
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![n, co, ho, wo], out)?,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        ))
    }

    /// Batch norm over feature axis 1. In `Train` mode returns the batch
    /// (mean, var) so the caller can update running statistics; in `Eval`
    /// mode the provided running stats are used and nothing is returned.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
        mode: Mode,
    ) -> Result<(NodeId, Option<(Vec<f64>, Vec<f64>)>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 && xs.len() != 4 {
            return Err(Error::Shape(format!("batch_norm: rank {:?}", xs)));
        }
        let f = xs[1];
        if self.shape(gamma) != [f] || self.shape(beta) != [f] {
            return Err(Error::Shape(format!(
                "batch_norm: {} features vs gamma {:?}",
                f,
                self.shape(gamma)
            )));
        }
        let spatial: usize = xs[2..].iter().product();
        let n = xs[0];
        let m = (n * spatial) as f64;
        let xd = &self.nodes[x.0].value.data;
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; f];
                let mut var = vec![0.0; f];
                for ni in 0..n {
                    for c in 0..f {
                        let base = (ni * f + c) * spatial;
                        for p in 0..spatial {
                            mean[c] += xd[base + p];
                        }
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for ni in 0..n {
                    for c in 0..f {
                        let base = (ni * f + c) * spatial;
                        for p in 0..spatial {
                            let d = xd[base + p] - mean[c];
                            var[c] += d * d;
                        }
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);
                (mean, var)
            }
            Mode::Eval => (running_mean.to_vec(), running_var.to_vec()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = &self.nodes[gamma.0].value.data;
        let be = &self.nodes[beta.0].value.data;
        let mut out = vec![0.0; xd.len()];
        for ni in 0..n {
            for c in 0..f {
                let base = (ni * f + c) * spatial;
                for p in 0..spatial {
                    out[base + p] = (xd[base + p] - mean[c]) * inv_std[c] * g[c] + be[c];
                }
            }
        }
        let stats = match mode {
            Mode::Train => Some((mean.clone(), var)),
            Mode::Eval => None,
        };
        let id = self.push(
            Tensor::new(xs, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                mode,
            },
        );
        Ok((id, stats))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.clone();
        let out: Vec<f64> = v.data.iter().map(|a| a.max(0.0)).collect();
        self.push(
            Tensor {
                shape: v.shape,
                data: out,
                grad: None,
                requires_grad: false,
            },
            Op::Relu(x),
        )
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.clone();
        let out: Vec<f64> = v.data.iter().map(|a| a.tanh()).collect();
        self.push(
            Tensor {
                shape: v.shape,
                data: out,
                grad: None,
                requires_grad: false,
            },
            Op::Tanh(x),
        )
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.clone();
        let out: Vec<f64> = v.data.iter().map(|a| 1.0 / (1.0 + (-a).exp())).collect();
        self.push(
            Tensor {
                shape: v.shape,
                data: out,
                grad: None,
                requires_grad: false,
            },
            Op::Sigmoid(x),
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.nodes[x.0].value.clone();
        let out: Vec<f64> = v.data.iter().map(|a| a * c).collect();
        self.push(
            Tensor {
                shape: v.shape,
                data: out,
                grad: None,
                requires_grad: false,
            },
            Op::Scale(x, c),
        )
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("global_avg_pool: {:?}", xs)));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let sp = (h * w) as f64;
        let xd = &self.nodes[x.0].value.data;
        let mut out = vec![0.0; n * c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                out[ni * c + ci] = xd[base..base + h * w].iter().sum::<f64>() / sp;
            }
        }
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::GlobalAvgPool(x)))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].value.numel() {
            return Err(Error::Shape(format!(
                "reshape: {:?} to {:?}",
                self.shape(x),
                shape
            )));
        }
        let data = self.nodes[x.0].value.data.clone();
        Ok(self.push(Tensor::new(shape, data)?, Op::Reshape(x)))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::Shape(format!("concat_cols: {:?} vs {:?}", sa, sb)));
        }
        let (n, p, q) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
        let mut out = vec![0.0; n * (p + q)];
        for r in 0..n {
            out[r * (p + q)..r * (p + q) + p].copy_from_slice(&ad[r * p..(r + 1) * p]);
            out[r * (p + q) + p..(r + 1) * (p + q)].copy_from_slice(&bd[r * q..(r + 1) * q]);
        }
        Ok(self.push(Tensor::new(vec![n, p + q], out)?, Op::ConcatCols(a, b)))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || start + len > xs[1] {
            return Err(Error::Shape(format!(
                "slice_cols: {:?} [{}, {})",
                xs,
                start,
                start + len
            )));
        }
        let (n, p) = (xs[0], xs[1]);
        let xd = &self.nodes[x.0].value.data;
        let mut out = vec![0.0; n * len];
        for r in 0..n {
            out[r * len..(r + 1) * len].copy_from_slice(&xd[r * p + start..r * p + start + len]);
        }
        Ok(self.push(
            Tensor::new(vec![n, len], out)?,
            Op::SliceCols { x, start, len },
        ))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xd = &self.nodes[x.0].value.data;
        let m = xd.iter().sum::<f64>() / xd.len() as f64;
        self.push(Tensor::scalar(m), Op::MeanAll(x))
    }

    pub fn mse_loss(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        if self.shape(pred) != target.shape.as_slice() {
            return Err(Error::Shape(format!(
                "mse_loss: pred {:?} target {:?}",
                self.shape(pred),
                target.shape
            )));
        }
        let pd = &self.nodes[pred.0].value.data;
        let m = pd
            .iter()
            .zip(&target.data)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / pd.len() as f64;
        Ok(self.push(
            Tensor::scalar(m),
            Op::MseLoss {
                pred,
                target: target.clone(),
            },
        ))
    }

    pub fn abs_sum(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0].value.data.iter().map(|v| v.abs()).sum();
        self.push(Tensor::scalar(s), Op::AbsSum(x))
    }

    pub fn add_scalars(&mut self, xs: Vec<NodeId>) -> Result<NodeId> {
        let mut s = 0.0;
        for id in &xs {
            if self.nodes[id.0].value.numel() != 1 {
                return Err(Error::Shape("add_scalars: non-scalar term".into()));
            }
            s += self.nodes[id.0].value.data[0];
        }
        Ok(self.push(Tensor::scalar(s), Op::AddScalars(xs)))
    }

    /// Reverse sweep from a scalar loss; populates `grad` on every node
    /// at or below `loss` in creation order.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(
                "backward requires a scalar loss node".to_string(),
            ));
        }
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|v| *v = 0.0);
        }
        self.nodes[loss.0].grad[0] = 1.0;
        for i in (0..=loss.0).rev() {
            // split borrow: take grad out, restore after
            let dy = std::mem::take(&mut self.nodes[i].grad);
            self.step_backward(i, &dy)?;
            self.nodes[i].grad = dy;
        }
        Ok(())
    }

    fn step_backward(&mut self, i: usize, dy: &[f64]) -> Result<()> {
        // references into self.nodes are re-borrowed per parent to satisfy
        // the borrow checker; indices are always < i so no aliasing with dy.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xs = self.shape(x).to_vec();
                let ws = self.shape(w).to_vec();
                let (n, inf, outf) = (xs[0], xs[1], ws[0]);
                // dx += dy · w
                let wdata = self.nodes[w.0].value.data.clone();
                {
                    let mut dx = vec![0.0; n * inf];
                    gemm(
                        n,
                        outf,
                        inf,
                        1.0,
                        dy,
                        outf as isize,
                        1,
                        &wdata,
                        inf as isize,
                        1,
                        0.0,
                        &mut dx,
                    );
                    self.nodes[x.0]
                        .grad
                        .iter_mut()
                        .zip(&dx)
                        .for_each(|(g, d)| *g += d);
                }
                // dw += dyᵀ · x
                let xdata = self.nodes[x.0].value.data.clone();
                {
                    let mut dw = vec![0.0; outf * inf];
                    gemm(
                        outf,
                        n,
                        inf,
                        1.0,
                        dy,
                        1,
                        outf as isize,
                        &xdata,
                        inf as isize,
                        1,
                        0.0,
                        &mut dw,
                    );
                    self.nodes[w.0]
                        .grad
                        .iter_mut()
                        .zip(&dw)
                        .for_each(|(g, d)| *g += d);
                }
                // db += column sums of dy
                let db = &mut self.nodes[b.0].grad;
                for r in 0..n {
                    for c in 0..outf {
                        db[c] += dy[r * outf + c];
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                let xs = self.shape(x).to_vec();
                let ws = self.shape(w).to_vec();
                let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (co, k) = (ws[0], ws[2]);
                let ho = conv_out_extent(h, k, stride, pad);
                let wo = conv_out_extent(wd, k, stride, pad);
                let ncols = n * ho * wo;
                let ckk = ci * k * k;
                // gather dy into [co, ncols]
                let mut dy_mat = vec![0.0; co * ncols];
                for ni in 0..n {
                    for o in 0..co {
                        let src = (ni * co + o) * ho * wo;
                        let dst = o * ncols + ni * ho * wo;
                        dy_mat[dst..dst + ho * wo].copy_from_slice(&dy[src..src + ho * wo]);
                    }
                }
                // recompute cols
                let mut cols = vec![0.0; ckk * ncols];
                im2col(
                    &self.nodes[x.0].value.data,
                    n,
                    ci,
                    h,
                    wd,
                    k,
                    stride,
                    pad,
                    &mut cols,
                );
                // dw += dy_mat · colsᵀ
                {
                    let mut dw = vec![0.0; co * ckk];
                    gemm(
                        co,
                        ncols,
                        ckk,
                        1.0,
                        &dy_mat,
                        ncols as isize,
                        1,
                        &cols,
                        1,
                        ncols as isize,
                        0.0,
                        &mut dw,
                    );
                    self.nodes[w.0]
                        .grad
                        .iter_mut()
                        .zip(&dw)
                        .for_each(|(g, d)| *g += d);
                }
                // db += sums over columns per output channel
                {
                    let db = &mut self.nodes[b.0].grad;
                    for o in 0..co {
                        db[o] += dy_mat[o * ncols..(o + 1) * ncols].iter().sum::<f64>();
                    }
                }
                // dcols = wᵀ · dy_mat, then col2im into dx
                {
                    let wdata = self.nodes[w.0].value.data.clone();
                    let mut dcols = vec![0.0; ckk * ncols];
                    gemm(
                        ckk,
                        co,
                        ncols,
                        1.0,
                        &wdata,
                        1,
                        ckk as isize,
                        &dy_mat,
                        ncols as isize,
                        1,
                        0.0,
                        &mut dcols,
                    );
                    let mut dx = vec![0.0; n * ci * h * wd];
                    col2im_acc(&dcols, n, ci, h, wd, k, stride, pad, &mut dx);
                    self.nodes[x.0]
                        .grad
                        .iter_mut()
                        .zip(&dx)
                        .for_each(|(g, d)| *g += d);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                mode,
            } => {
                let (x, gamma, beta, mode) = (*x, *gamma, *beta, *mode);
                let mean = mean.clone();
                let inv_std = inv_std.clone();
                let xs = self.shape(x).to_vec();
                let f = xs[1];
                let spatial: usize = xs[2..].iter().product();
                let n = xs[0];
                let m = (n * spatial) as f64;
                let xd = self.nodes[x.0].value.data.clone();
                let g = self.nodes[gamma.0].value.data.clone();
                // per-feature reductions
                let mut sum_dy = vec![0.0; f];
                let mut sum_dy_xhat = vec![0.0; f];
                for ni in 0..n {
                    for c in 0..f {
                        let base = (ni * f + c) * spatial;
                        for p in 0..spatial {
                            let xhat = (xd[base + p] - mean[c]) * inv_std[c];
                            sum_dy[c] += dy[base + p];
                            sum_dy_xhat[c] += dy[base + p] * xhat;
                        }
                    }
                }
                {
                    let dg = &mut self.nodes[gamma.0].grad;
                    for c in 0..f {
                        dg[c] += sum_dy_xhat[c];
                    }
                }
                {
                    let db = &mut self.nodes[beta.0].grad;
                    for c in 0..f {
                        db[c] += sum_dy[c];
                    }
                }
                {
                    let dx = &mut self.nodes[x.0].grad;
                    match mode {
                        Mode::Train => {
                            for ni in 0..n {
                                for c in 0..f {
                                    let base = (ni * f + c) * spatial;
                                    for p in 0..spatial {
                                        let xhat = (xd[base + p] - mean[c]) * inv_std[c];
                                        dx[base + p] += g[c]
                                            * inv_std[c]
                                            * (dy[base + p]
                                                - sum_dy[c] / m
                                                - xhat * sum_dy_xhat[c] / m);
                                    }
                                }
                            }
                        }
                        Mode::Eval => {
                            for ni in 0..n {
                                for c in 0..f {
                                    let base = (ni * f + c) * spatial;
                                    for p in 0..spatial {
                                        dx[base + p] += g[c] * inv_std[c] * dy[base + p];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let x = *x;
                let xd = self.nodes[x.0].value.data.clone();
                let dx = &mut self.nodes[x.0].grad;
                for (j, d) in dy.iter().enumerate() {
                    if xd[j] > 0.0 {
                        dx[j] += d;
                    }
                }
            }
            Op::Tanh(x) => {
                let x = *x;
                let yd = self.nodes[i].value.data.clone();
                let dx = &mut self.nodes[x.0].grad;
                for (j, d) in dy.iter().enumerate() {
                    dx[j] += d * (1.0 - yd[j] * yd[j]);
                }
            }
            Op::Sigmoid(x) => {
                let x = *x;
                let yd = self.nodes[i].value.data.clone();
                let dx = &mut self.nodes[x.0].grad;
                for (j, d) in dy.iter().enumerate() {
                    dx[j] += d * yd[j] * (1.0 - yd[j]);
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.nodes[a.0]
                    .grad
                    .iter_mut()
                    .zip(dy)
                    .for_each(|(g, d)| *g += d);
                self.nodes[b.0]
                    .grad
                    .iter_mut()
                    .zip(dy)
                    .for_each(|(g, d)| *g += d);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let ad = self.nodes[a.0].value.data.clone();
                let bd = self.nodes[b.0].value.data.clone();
                self.nodes[a.0]
                    .grad
                    .iter_mut()
                    .zip(dy.iter().zip(&bd))
                    .for_each(|(g, (d, bv))| *g += d * bv);
                self.nodes[b.0]
                    .grad
                    .iter_mut()
                    .zip(dy.iter().zip(&ad))
                    .for_each(|(g, (d, av))| *g += d * av);
            }
            Op::Scale(x, c) => {
                let (x, c) = (*x, *c);
                self.nodes[x.0]
                    .grad
                    .iter_mut()
                    .zip(dy)
                    .for_each(|(g, d)| *g += d * c);
            }
            Op::GlobalAvgPool(x) => {
                let x = *x;
                let xs = self.shape(x).to_vec();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let sp = (h * w) as f64;
                let dx = &mut self.nodes[x.0].grad;
                for ni in 0..n {
                    for ci in 0..c {
                        let d = dy[ni * c + ci] / sp;
                        let base = (ni * c + ci) * h * w;
                        for p in 0..h * w {
                            dx[base + p] += d;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                let x = *x;
                self.nodes[x.0]
                    .grad
                    .iter_mut()
                    .zip(dy)
                    .for_each(|(g, d)| *g += d);
            }
            Op::ConcatCols(a, b) => {
                let (a, b) = (*a, *b);
                let p = self.shape(a)[1];
                let q = self.shape(b)[1];
                let n = self.shape(a)[0];
                {
                    let da = &mut self.nodes[a.0].grad;
                    for r in 0..n {
                        for c in 0..p {
                            da[r * p + c] += dy[r * (p + q) + c];
                        }
                    }
                }
                {
                    let db = &mut self.nodes[b.0].grad;
                    for r in 0..n {
                        for c in 0..q {
                            db[r * q + c] += dy[r * (p + q) + p + c];
                        }
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let p = self.shape(x)[1];
                let n = self.shape(x)[0];
                let dx = &mut self.nodes[x.0].grad;
                for r in 0..n {
                    for c in 0..len {
                        dx[r * p + start + c] += dy[r * len + c];
                    }
                }
            }
            Op::MeanAll(x) => {
                let x = *x;
                let m = self.nodes[x.0].value.numel() as f64;
                let d = dy[0] / m;
                self.nodes[x.0].grad.iter_mut().for_each(|g| *g += d);
            }
            Op::MseLoss { pred, target } => {
                let pred = *pred;
                let td = target.data.clone();
                let pd = self.nodes[pred.0].value.data.clone();
                let m = pd.len() as f64;
                let d = dy[0];
                let dp = &mut self.nodes[pred.0].grad;
                for j in 0..pd.len() {
                    dp[j] += d * 2.0 * (pd[j] - td[j]) / m;
                }
            }
            Op::AbsSum(x) => {
                let x = *x;
                let xd = self.nodes[x.0].value.data.clone();
                let d = dy[0];
                let dx = &mut self.nodes[x.0].grad;
                for (j, v) in xd.iter().enumerate() {
                    dx[j] += d * v.signum();
                }
            }
            Op::AddScalars(xs) => {
                let xs = xs.clone();
                let d = dy[0];
                for id in xs {
                    self.nodes[id.0].grad[0] += d;
                }
            }
        }
        Ok(())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}
