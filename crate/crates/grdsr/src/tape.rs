//! Reverse-mode differentiation on a flat op tape.
//!
//! Every forward op appends a node holding the computed value plus enough
//! saved context to run its backward rule. `backward` walks the tape in
//! reverse, accumulating gradients into each node's buffer. A tape covers a
//! single forward/backward invocation and is discarded afterwards; parameter
//! tensors are copied in as leaves, so the tape never aliases model state.
//!
//! The op set is exactly what the guided residual dense network needs:
//! same-padded convolution, batch normalization, ReLU, channel
//! concatenation, elementwise add, and a p-norm loss. `weighted_sum` and
//! `scale_grad` exist for gradient checking (scalarization and fault
//! injection respectively).

use rayon::prelude::*;

use crate::error::{GrdError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel batch statistics computed by a train-mode batch_norm node.
/// The caller folds these into its running statistics.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Debug)]
struct BnContext {
    mode: BnMode,
    inv_std: Vec<f32>,
    xhat: Vec<f32>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    BatchNorm {
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
        ctx: BnContext,
    },
    Relu {
        input: NodeId,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    LpLoss {
        pred: NodeId,
        target: Tensor,
        p: u32,
    },
    WeightedSum {
        input: NodeId,
        weights: Vec<f64>,
    },
    ScaleGrad {
        input: NodeId,
        factor: f32,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient buffer of a node, present after `backward` if the node
    /// participates in differentiation.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        self.push(tensor, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].value.requires_grad
    }

    /// Same-padded 2-d cross-correlation in NCHW layout.
    ///
    /// `weight` is (out_channels, in_channels, kh, kw) with odd kernel
    /// extents; the output keeps the input's spatial extents.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (n, c_in, h, w) = self.value(input).dims4()?;
        let wshape = self.value(weight).shape.clone();
        let (c_out, wc_in, kh, kw) = match wshape.as_slice() {
            &[a, b, c, d] => (a, b, c, d),
            other => {
                return Err(GrdError::config(format!(
                    "conv weight must be 4-d (out,in,kh,kw), got {other:?}"
                )))
            }
        };
        if wc_in != c_in {
            return Err(GrdError::config(format!(
                "conv input has {c_in} channels but weight expects {wc_in}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(GrdError::config(format!(
                "same-padded conv needs odd kernel extents, got {kh}x{kw}"
            )));
        }
        if self.value(bias).shape != vec![c_out] {
            return Err(GrdError::config(format!(
                "conv bias must have shape [{c_out}], got {:?}",
                self.value(bias).shape
            )));
        }

        let x = &self.nodes[input.0].value.data;
        let wt = &self.nodes[weight.0].value.data;
        let b = &self.nodes[bias.0].value.data;

        let hw = h * w;
        let k = c_in * kh * kw;
        let mut out = vec![0.0f32; n * c_out * hw];
        let sample_chunks: Vec<&mut [f32]> = out.chunks_mut(c_out * hw).collect();
        sample_chunks
            .into_par_iter()
            .enumerate()
            .for_each(|(s, out_s)| {
                let x_s = &x[s * c_in * hw..(s + 1) * c_in * hw];
                let cols = im2col(x_s, c_in, h, w, kh, kw);
                unsafe {
                    matrixmultiply::sgemm(
                        c_out,
                        k,
                        hw,
                        1.0,
                        wt.as_ptr(),
                        k as isize,
                        1,
                        cols.as_ptr(),
                        hw as isize,
                        1,
                        0.0,
                        out_s.as_mut_ptr(),
                        hw as isize,
                        1,
                    );
                }
                for o in 0..c_out {
                    let bias_v = b[o];
                    for v in &mut out_s[o * hw..(o + 1) * hw] {
                        *v += bias_v;
                    }
                }
            });

        let mut value = Tensor::new(vec![n, c_out, h, w], out)?;
        value.requires_grad =
            self.requires(input) || self.requires(weight) || self.requires(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
            },
        ))
    }

    /// Per-channel batch normalization over the (N, H, W) axes.
    ///
    /// Train mode normalizes with batch statistics and reports them so the
    /// caller can update its running buffers; eval mode normalizes with the
    /// provided running statistics. `eps` keeps the division away from zero
    /// even for constant channels.
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
        running_mean: &[f32],
        running_var: &[f32],
        mode: BnMode,
        eps: f32,
    ) -> Result<(NodeId, Option<BnBatchStats>)> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if self.value(scale).shape != vec![c] || self.value(shift).shape != vec![c] {
            return Err(GrdError::config(format!(
                "batch norm scale/shift must have shape [{c}]"
            )));
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(GrdError::config(format!(
                "running statistics must have length {c}"
            )));
        }

        let hw = h * w;
        let count = (n * hw) as f64;
        let x = &self.nodes[input.0].value.data;

        let (mean, var) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                for ch in 0..c {
                    let mut sum = 0.0f64;
                    for s in 0..n {
                        let base = (s * c + ch) * hw;
                        for i in 0..hw {
                            sum += x[base + i] as f64;
                        }
                    }
                    let m = sum / count;
                    let mut sq = 0.0f64;
                    for s in 0..n {
                        let base = (s * c + ch) * hw;
                        for i in 0..hw {
                            let d = x[base + i] as f64 - m;
                            sq += d * d;
                        }
                    }
                    mean[ch] = m as f32;
                    var[ch] = (sq / count) as f32;
                }
                (mean, var)
            }
            BnMode::Eval => (running_mean.to_vec(), running_var.to_vec()),
        };

        let inv_std: Vec<f32> = var
            .iter()
            .map(|&v| 1.0 / (v + eps).sqrt())
            .collect();

        let g = &self.nodes[scale.0].value.data;
        let bta = &self.nodes[shift.0].value.data;
        let mut xhat = vec![0.0f32; x.len()];
        let mut out = vec![0.0f32; x.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                let (m, istd, gv, bv) = (mean[ch], inv_std[ch], g[ch], bta[ch]);
                for i in 0..hw {
                    let xh = (x[base + i] - m) * istd;
                    xhat[base + i] = xh;
                    out[base + i] = gv * xh + bv;
                }
            }
        }

        let stats = match mode {
            BnMode::Train => Some(BnBatchStats {
                mean: mean.clone(),
                var: var.clone(),
            }),
            BnMode::Eval => None,
        };

        let mut value = Tensor::new(vec![n, c, h, w], out)?;
        value.requires_grad =
            self.requires(input) || self.requires(scale) || self.requires(shift);
        let id = self.push(
            value,
            Op::BatchNorm {
                input,
                scale,
                shift,
                ctx: BnContext {
                    mode,
                    inv_std,
                    xhat,
                },
            },
        );
        Ok((id, stats))
    }

    /// Elementwise max(0, x). The subgradient at exactly zero is zero.
    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let src = &self.nodes[input.0].value;
        let data: Vec<f32> = src.data.iter().map(|&v| v.max(0.0)).collect();
        let mut value = Tensor {
            shape: src.shape.clone(),
            data,
            grad: None,
            requires_grad: src.requires_grad,
        };
        value.grad = None;
        self.push(value, Op::Relu { input })
    }

    /// Concatenates two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if na != nb || ha != hb || wa != wb {
            return Err(GrdError::config(format!(
                "concat operands disagree on batch/spatial extents: \
                 {:?} vs {:?}",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        let hw = ha * wa;
        let mut data = vec![0.0f32; na * (ca + cb) * hw];
        let da = &self.nodes[a.0].value.data;
        let db = &self.nodes[b.0].value.data;
        for s in 0..na {
            let dst = s * (ca + cb) * hw;
            data[dst..dst + ca * hw].copy_from_slice(&da[s * ca * hw..(s + 1) * ca * hw]);
            data[dst + ca * hw..dst + (ca + cb) * hw]
                .copy_from_slice(&db[s * cb * hw..(s + 1) * cb * hw]);
        }
        let mut value = Tensor::new(vec![na, ca + cb, ha, wa], data)?;
        value.requires_grad = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::ConcatChannels { a, b }))
    }

    /// Elementwise sum of two identically shaped tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape != self.value(b).shape {
            return Err(GrdError::config(format!(
                "add operands must share a shape: {:?} vs {:?}",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        let data: Vec<f32> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(&x, &y)| x + y)
            .collect();
        let mut value = Tensor::new(self.value(a).shape.clone(), data)?;
        value.requires_grad = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Add { a, b }))
    }

    /// Mean of |pred - target|^p over all elements, p in {1, 2}.
    pub fn lp_loss(&mut self, pred: NodeId, target: &Tensor, p: u32) -> Result<NodeId> {
        if !(p == 1 || p == 2) {
            return Err(GrdError::config(format!("lp_loss supports p in {{1,2}}, got {p}")));
        }
        if self.value(pred).shape != target.shape {
            return Err(GrdError::config(format!(
                "loss shapes disagree: pred {:?} vs target {:?}",
                self.value(pred).shape,
                target.shape
            )));
        }
        let mut acc = 0.0f64;
        for (&a, &b) in self.nodes[pred.0].value.data.iter().zip(&target.data) {
            let d = (a - b) as f64;
            acc += if p == 1 { d.abs() } else { d * d };
        }
        let mean = (acc / target.numel() as f64) as f32;
        let mut value = Tensor::scalar(mean);
        value.requires_grad = self.requires(pred);
        Ok(self.push(
            value,
            Op::LpLoss {
                pred,
                target: target.clone(),
                p,
            },
        ))
    }

    /// Scalar projection sum(weights[i] * x[i]), accumulated in f64.
    /// Used to scalarize arbitrary outputs for gradient checking.
    pub fn weighted_sum(&mut self, input: NodeId, weights: &[f64]) -> Result<NodeId> {
        if weights.len() != self.value(input).numel() {
            return Err(GrdError::config(
                "weighted_sum weight count must match input element count".to_string(),
            ));
        }
        let acc: f64 = self.nodes[input.0]
            .value
            .data
            .iter()
            .zip(weights)
            .map(|(&x, &w)| x as f64 * w)
            .sum();
        let mut value = Tensor::scalar(acc as f32);
        value.requires_grad = self.requires(input);
        Ok(self.push(
            value,
            Op::WeightedSum {
                input,
                weights: weights.to_vec(),
            },
        ))
    }

    /// Identity forward whose backward multiplies the upstream gradient by
    /// `factor`. With factor != 1 this is a deliberately wrong gradient,
    /// used to verify that the checker catches broken backward rules.
    pub fn scale_grad(&mut self, input: NodeId, factor: f32) -> NodeId {
        let src = &self.nodes[input.0].value;
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.clone(),
            grad: None,
            requires_grad: src.requires_grad,
        };
        self.push(value, Op::ScaleGrad { input, factor })
    }

    fn add_grad(&mut self, id: NodeId, delta: &[f32]) {
        let t = &mut self.nodes[id.0].value;
        if !t.requires_grad {
            return;
        }
        let g = t.grad.get_or_insert_with(|| vec![0.0; t.data.len()]);
        for (gi, &d) in g.iter_mut().zip(delta) {
            *gi += d;
        }
    }

    /// Accumulates d(scalar node `from`)/d(node) into every participating
    /// node's gradient buffer.
    pub fn backward(&mut self, from: NodeId) -> Result<()> {
        if self.value(from).numel() != 1 {
            return Err(GrdError::config(
                "backward must start from a scalar node".to_string(),
            ));
        }
        if !self.requires(from) {
            return Err(GrdError::config(
                "backward target does not depend on any differentiable input".to_string(),
            ));
        }
        {
            let t = &mut self.nodes[from.0].value;
            t.grad = Some(vec![1.0]);
        }
        for idx in (0..=from.0).rev() {
            if self.nodes[idx].value.grad.is_none() {
                continue;
            }
            self.backward_node(idx)?;
        }
        Ok(())
    }

    fn backward_node(&mut self, idx: usize) -> Result<()> {
        let upstream = self.nodes[idx].value.grad.clone().unwrap();
        // Ops are dispatched on a detached copy of the saved context where
        // needed so the borrow of self stays simple.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Relu { input } => {
                let input = *input;
                let mask: Vec<f32> = self.nodes[input.0]
                    .value
                    .data
                    .iter()
                    .zip(&upstream)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                self.add_grad(input, &mask);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.add_grad(a, &upstream);
                self.add_grad(b, &upstream);
            }
            Op::ScaleGrad { input, factor } => {
                let (input, factor) = (*input, *factor);
                let scaled: Vec<f32> = upstream.iter().map(|&g| g * factor).collect();
                self.add_grad(input, &scaled);
            }
            Op::ConcatChannels { a, b } => {
                let (a, b) = (*a, *b);
                let (n, ca, h, w) = self.value(a).dims4()?;
                let (_, cb, _, _) = self.value(b).dims4()?;
                let hw = h * w;
                let mut ga = vec![0.0f32; n * ca * hw];
                let mut gb = vec![0.0f32; n * cb * hw];
                for s in 0..n {
                    let src = s * (ca + cb) * hw;
                    ga[s * ca * hw..(s + 1) * ca * hw]
                        .copy_from_slice(&upstream[src..src + ca * hw]);
                    gb[s * cb * hw..(s + 1) * cb * hw]
                        .copy_from_slice(&upstream[src + ca * hw..src + (ca + cb) * hw]);
                }
                self.add_grad(a, &ga);
                self.add_grad(b, &gb);
            }
            Op::WeightedSum { input, weights } => {
                let input = *input;
                let g0 = upstream[0];
                let grad: Vec<f32> = weights.iter().map(|&w| (w * g0 as f64) as f32).collect();
                self.add_grad(input, &grad);
            }
            Op::LpLoss { pred, target, p } => {
                let (pred, p) = (*pred, *p);
                let target = target.clone();
                let g0 = upstream[0];
                let inv_n = 1.0 / target.numel() as f32;
                let grad: Vec<f32> = self.nodes[pred.0]
                    .value
                    .data
                    .iter()
                    .zip(&target.data)
                    .map(|(&a, &b)| {
                        let d = a - b;
                        let base = if p == 1 {
                            // subgradient of |d| at 0 is taken as 0
                            if d > 0.0 {
                                1.0
                            } else if d < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        } else {
                            2.0 * d
                        };
                        base * inv_n * g0
                    })
                    .collect();
                self.add_grad(pred, &grad);
            }
            Op::BatchNorm {
                input,
                scale,
                shift,
                ctx,
            } => {
                let (input, scale, shift) = (*input, *scale, *shift);
                let mode = ctx.mode;
                let inv_std = ctx.inv_std.clone();
                let xhat = ctx.xhat.clone();
                let (n, c, h, w) = self.value(input).dims4()?;
                let hw = h * w;
                let count = (n * hw) as f32;
                let g = self.nodes[scale.0].value.data.clone();

                let mut d_scale = vec![0.0f32; c];
                let mut d_shift = vec![0.0f32; c];
                let mut d_input = vec![0.0f32; n * c * hw];

                for ch in 0..c {
                    let mut sum_dy = 0.0f64;
                    let mut sum_dy_xhat = 0.0f64;
                    for s in 0..n {
                        let base = (s * c + ch) * hw;
                        for i in 0..hw {
                            let dy = upstream[base + i] as f64;
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat[base + i] as f64;
                        }
                    }
                    d_shift[ch] = sum_dy as f32;
                    d_scale[ch] = sum_dy_xhat as f32;

                    let gv = g[ch];
                    let istd = inv_std[ch];
                    match mode {
                        BnMode::Eval => {
                            for s in 0..n {
                                let base = (s * c + ch) * hw;
                                for i in 0..hw {
                                    d_input[base + i] = upstream[base + i] * gv * istd;
                                }
                            }
                        }
                        BnMode::Train => {
                            // dx = istd/N * (N*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
                            let mean_dy = (sum_dy / count as f64) as f32;
                            let mean_dy_xhat = (sum_dy_xhat / count as f64) as f32;
                            for s in 0..n {
                                let base = (s * c + ch) * hw;
                                for i in 0..hw {
                                    let dy = upstream[base + i];
                                    d_input[base + i] = gv
                                        * istd
                                        * (dy - mean_dy - xhat[base + i] * mean_dy_xhat);
                                }
                            }
                        }
                    }
                }
                self.add_grad(input, &d_input);
                self.add_grad(scale, &d_scale);
                self.add_grad(shift, &d_shift);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
            } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let (n, c_in, h, w) = self.value(input).dims4()?;
                let wshape = &self.value(weight).shape;
                let (c_out, kh, kw) = (wshape[0], wshape[2], wshape[3]);
                let hw = h * w;
                let k = c_in * kh * kw;

                let x = &self.nodes[input.0].value.data;
                let wt = &self.nodes[weight.0].value.data;

                // Per-sample partials computed in parallel, then reduced in
                // a fixed order so results do not depend on scheduling.
                let partials: Vec<(Vec<f32>, Vec<f32>, Vec<f32>)> = (0..n)
                    .into_par_iter()
                    .map(|s| {
                        let x_s = &x[s * c_in * hw..(s + 1) * c_in * hw];
                        let dy_s = &upstream[s * c_out * hw..(s + 1) * c_out * hw];
                        let cols = im2col(x_s, c_in, h, w, kh, kw);

                        // dW = dY * cols^T
                        let mut dw = vec![0.0f32; c_out * k];
                        unsafe {
                            matrixmultiply::sgemm(
                                c_out,
                                hw,
                                k,
                                1.0,
                                dy_s.as_ptr(),
                                hw as isize,
                                1,
                                cols.as_ptr(),
                                1,
                                hw as isize,
                                0.0,
                                dw.as_mut_ptr(),
                                k as isize,
                                1,
                            );
                        }

                        let mut db = vec![0.0f32; c_out];
                        for o in 0..c_out {
                            let mut acc = 0.0f64;
                            for i in 0..hw {
                                acc += dy_s[o * hw + i] as f64;
                            }
                            db[o] = acc as f32;
                        }

                        // dcols = W^T * dY, then scattered back to the input
                        let mut dcols = vec![0.0f32; k * hw];
                        unsafe {
                            matrixmultiply::sgemm(
                                k,
                                c_out,
                                hw,
                                1.0,
                                wt.as_ptr(),
                                1,
                                k as isize,
                                dy_s.as_ptr(),
                                hw as isize,
                                1,
                                0.0,
                                dcols.as_mut_ptr(),
                                hw as isize,
                                1,
                            );
                        }
                        let dx = col2im(&dcols, c_in, h, w, kh, kw);
                        (dx, dw, db)
                    })
                    .collect();

                let mut d_input = vec![0.0f32; n * c_in * hw];
                let mut d_weight = vec![0.0f32; c_out * k];
                let mut d_bias = vec![0.0f32; c_out];
                for (s, (dx, dw, db)) in partials.iter().enumerate() {
                    d_input[s * c_in * hw..(s + 1) * c_in * hw].copy_from_slice(dx);
                    for (acc, &v) in d_weight.iter_mut().zip(dw) {
                        *acc += v;
                    }
                    for (acc, &v) in d_bias.iter_mut().zip(db) {
                        *acc += v;
                    }
                }
                self.add_grad(input, &d_input);
                self.add_grad(weight, &d_weight);
                self.add_grad(bias, &d_bias);
            }
        }
        Ok(())
    }
}

/// Unrolls one CHW sample into a (c*kh*kw) x (h*w) patch matrix with
/// implicit zero padding of (kh/2, kw/2).
fn im2col(x: &[f32], c: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<f32> {
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    let mut cols = vec![0.0f32; c * kh * kw * hw];
    for ch in 0..c {
        for u in 0..kh {
            for v in 0..kw {
                let row = ((ch * kh + u) * kw + v) * hw;
                let di = u as isize - ph as isize;
                let dj = v as isize - pw as isize;
                for i in 0..h {
                    let si = i as isize + di;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src = ch * hw + si as usize * w;
                    let dst = row + i * w;
                    // sliding the column window keeps this loop branch-light
                    let (j_lo, j_hi) = if dj < 0 {
                        ((-dj) as usize, w)
                    } else {
                        (0, w - dj as usize)
                    };
                    for j in j_lo..j_hi {
                        cols[dst + j] = x[src + (j as isize + dj) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`: scatter-adds a patch-matrix gradient back into CHW.
fn col2im(dcols: &[f32], c: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<f32> {
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    let mut dx = vec![0.0f32; c * hw];
    for ch in 0..c {
        for u in 0..kh {
            for v in 0..kw {
                let row = ((ch * kh + u) * kw + v) * hw;
                let di = u as isize - ph as isize;
                let dj = v as isize - pw as isize;
                for i in 0..h {
                    let si = i as isize + di;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let dst = ch * hw + si as usize * w;
                    let src = row + i * w;
                    let (j_lo, j_hi) = if dj < 0 {
                        ((-dj) as usize, w)
                    } else {
                        (0, w - dj as usize)
                    };
                    for j in j_lo..j_hi {
                        dx[dst + (j as isize + dj) as usize] += dcols[src + j];
                    }
                }
            }
        }
    }
    dx
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Deterministic projection weights with varied signs and magnitudes
/// bounded away from zero, so every output element contributes a usable
/// finite-difference signal.
fn projection_weights(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let c = (0.7 + 1.3 * i as f64).cos();
            0.5f64.copysign(c) + 0.5 * c
        })
        .collect()
}

/// Checks d(sum(w*f(x)))/dx against central finite differences (h = 1e-3).
///
/// `build` must construct the same graph every call; it receives a fresh
/// tape and the node holding the (possibly perturbed) input.
pub fn grad_check<F>(build: F, input: &Tensor, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    const H: f64 = 1e-3;

    let weights = {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let out = build(&mut tape, x)?;
        projection_weights(tape.value(out).numel())
    };

    // Analytic gradient.
    let analytic: Vec<f32> = {
        let mut tape = Tape::new();
        let mut probe = input.clone();
        probe.requires_grad = true;
        let x = tape.leaf(probe);
        let out = build(&mut tape, x)?;
        let loss = tape.weighted_sum(out, &weights)?;
        tape.backward(loss)?;
        tape.grad(x)
            .ok_or_else(|| GrdError::numerical("no gradient reached the input".to_string()))?
            .to_vec()
    };

    // Central differences, with the scalar projection accumulated in f64.
    let eval = |data: &[f32]| -> Result<f64> {
        let mut tape = Tape::new();
        let probe = Tensor::new(input.shape.clone(), data.to_vec())?;
        let x = tape.leaf(probe);
        let out = build(&mut tape, x)?;
        Ok(tape
            .value(out)
            .data
            .iter()
            .zip(&weights)
            .map(|(&v, &w)| v as f64 * w)
            .sum())
    };

    let mut numeric = vec![0.0f64; input.numel()];
    let mut work = input.data.clone();
    for i in 0..input.numel() {
        let orig = work[i];
        let x_plus = (orig as f64 + H) as f32;
        let x_minus = (orig as f64 - H) as f32;
        work[i] = x_plus;
        let plus = eval(&work)?;
        work[i] = x_minus;
        let minus = eval(&work)?;
        work[i] = orig;
        // divide by the realized step: the nominal 2h is not representable
        // exactly once the perturbed values round to f32
        numeric[i] = (plus - minus) / (x_plus as f64 - x_minus as f64);
    }

    let gmax = analytic
        .iter()
        .map(|&a| a.abs() as f64)
        .chain(numeric.iter().map(|&v| v.abs()))
        .fold(0.0f64, f64::max);
    let floor = (1e-3 * gmax).max(f64::MIN_POSITIVE);

    let mut max_rel = 0.0f64;
    let mut worst = 0usize;
    for i in 0..numeric.len() {
        let a = analytic[i] as f64;
        let nmr = numeric[i];
        let denom = a.abs().max(nmr.abs()).max(floor);
        let rel = (a - nmr).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }

    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst_index: worst,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        random_tensor_amp(shape, seed, 1.0)
    }

    // Finite differences at h=1e-3 on an f32 forward pass need the output
    // magnitudes kept small relative to the checked gradient, so several
    // tests draw the non-checked factor from a reduced amplitude.
    fn random_tensor_amp(shape: Vec<usize>, seed: u64, amp: f32) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let numel = shape.iter().product();
        let data: Vec<f32> = (0..numel).map(|_| rng.gen_range(-amp..amp)).collect();
        Tensor::new(shape, data).unwrap()
    }

    fn conv_leaves(
        tape: &mut Tape,
        weight: &Tensor,
        bias: &Tensor,
        trainable: bool,
    ) -> (NodeId, NodeId) {
        let mut w = weight.clone();
        let mut b = bias.clone();
        w.requires_grad = trainable;
        b.requires_grad = trainable;
        (tape.leaf(w), tape.leaf(b))
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        let input = random_tensor(vec![1, 1, 5, 5], 1);
        let mut kernel = vec![0.0f32; 9];
        kernel[4] = 1.0; // discrete delta
        let weight = Tensor::new(vec![1, 1, 3, 3], kernel).unwrap();
        let bias = Tensor::zeros(vec![1]);

        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let (w, b) = conv_leaves(&mut tape, &weight, &bias, false);
        let y = tape.conv2d(x, w, b).unwrap();
        assert_eq!(tape.value(y).data, input.data);
    }

    #[test]
    fn conv_ones_kernel_full_overlap_sums_to_nine() {
        let input = Tensor::full(vec![1, 1, 3, 3], 1.0);
        let weight = Tensor::full(vec![1, 1, 3, 3], 1.0);
        let bias = Tensor::zeros(vec![1]);
        let mut tape = Tape::new();
        let x = tape.leaf(input);
        let (w, b) = conv_leaves(&mut tape, &weight, &bias, false);
        let y = tape.conv2d(x, w, b).unwrap();
        // center has full overlap; corners see only a 2x2 window
        assert_eq!(tape.value(y).data[4], 9.0);
        assert_eq!(tape.value(y).data[0], 4.0);
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let input = random_tensor_amp(vec![1, 2, 6, 6], 2, 0.1);
        let weight = random_tensor(vec![3, 2, 3, 3], 3);
        let bias = random_tensor(vec![3], 4);
        let report = grad_check(
            |tape, x| {
                let (w, b) = conv_leaves(tape, &weight, &bias, false);
                tape.conv2d(x, w, b)
            },
            &input,
            1e-3,
        )
        .unwrap();
        assert!(report.passed(), "rel error {}", report.max_rel_error);
    }

    #[test]
    fn conv_weight_gradient_matches_finite_differences() {
        let input = random_tensor(vec![1, 2, 6, 6], 5);
        let weight = random_tensor_amp(vec![2, 2, 3, 3], 6, 0.1);
        let bias = random_tensor(vec![2], 7);
        let report = grad_check(
            |tape, w_node| {
                let x = tape.leaf(input.clone());
                let mut b = bias.clone();
                b.requires_grad = false;
                let b = tape.leaf(b);
                tape.conv2d(x, w_node, b)
            },
            &weight,
            1e-3,
        )
        .unwrap();
        assert!(report.passed(), "rel error {}", report.max_rel_error);
    }

    #[test]
    fn conv_shape_mismatch_is_config_error() {
        let input = random_tensor(vec![1, 2, 4, 4], 8);
        let weight = random_tensor(vec![1, 3, 3, 3], 9);
        let bias = Tensor::zeros(vec![1]);
        let mut tape = Tape::new();
        let x = tape.leaf(input);
        let (w, b) = conv_leaves(&mut tape, &weight, &bias, false);
        assert!(matches!(
            tape.conv2d(x, w, b),
            Err(GrdError::Config(_))
        ));
    }

    #[test]
    fn conv_is_linear_in_input_with_zero_bias() {
        let x1 = random_tensor(vec![1, 2, 5, 5], 10);
        let x2 = random_tensor(vec![1, 2, 5, 5], 11);
        let weight = random_tensor(vec![2, 2, 3, 3], 12);
        let bias = Tensor::zeros(vec![2]);
        let (alpha, beta) = (0.7f32, -1.3f32);

        let run = |input: &Tensor| {
            let mut tape = Tape::new();
            let x = tape.leaf(input.clone());
            let (w, b) = conv_leaves(&mut tape, &weight, &bias, false);
            let y = tape.conv2d(x, w, b).unwrap();
            tape.value(y).data.clone()
        };

        let mixed = Tensor::new(
            x1.shape.clone(),
            x1.data
                .iter()
                .zip(&x2.data)
                .map(|(&a, &b)| alpha * a + beta * b)
                .collect(),
        )
        .unwrap();
        let lhs = run(&mixed);
        let y1 = run(&x1);
        let y2 = run(&x2);
        for i in 0..lhs.len() {
            let rhs = alpha * y1[i] + beta * y2[i];
            assert!((lhs[i] - rhs).abs() < 1e-5, "at {i}: {} vs {rhs}", lhs[i]);
        }
    }

    #[test]
    fn batch_norm_passes_through_already_normalized_input() {
        // build an input that is exactly zero-mean unit-variance per channel
        let raw = random_tensor(vec![2, 3, 4, 4], 13);
        let (n, c, h, w) = raw.dims4().unwrap();
        let hw = h * w;
        let mut data = raw.data.clone();
        for ch in 0..c {
            let mut vals = Vec::new();
            for s in 0..n {
                vals.extend_from_slice(&raw.data[(s * c + ch) * hw..(s * c + ch + 1) * hw]);
            }
            let mean = vals.iter().sum::<f32>() / vals.len() as f32;
            let var =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / vals.len() as f32;
            let istd = 1.0 / var.sqrt();
            for s in 0..n {
                for i in 0..hw {
                    let idx = (s * c + ch) * hw + i;
                    data[idx] = (raw.data[idx] - mean) * istd;
                }
            }
        }
        let input = Tensor::new(vec![n, c, h, w], data).unwrap();

        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let scale = tape.leaf(Tensor::full(vec![c], 1.0));
        let shift = tape.leaf(Tensor::zeros(vec![c]));
        let (y, stats) = tape
            .batch_norm(x, scale, shift, &vec![0.0; c], &vec![1.0; c], BnMode::Train, 1e-5)
            .unwrap();
        assert!(stats.is_some());
        for (a, b) in tape.value(y).data.iter().zip(&input.data) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn batch_norm_zero_centers_constant_channel() {
        let input = Tensor::full(vec![2, 1, 3, 3], 7.5);
        let mut tape = Tape::new();
        let x = tape.leaf(input);
        let scale = tape.leaf(Tensor::full(vec![1], 1.0));
        let shift = tape.leaf(Tensor::zeros(vec![1]));
        let (y, _) = tape
            .batch_norm(x, scale, shift, &[0.0], &[1.0], BnMode::Train, 1e-5)
            .unwrap();
        for &v in &tape.value(y).data {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn batch_norm_train_output_is_standardized() {
        let input = random_tensor(vec![2, 3, 8, 8], 14);
        let (n, c, h, w) = input.dims4().unwrap();
        let hw = h * w;
        let mut tape = Tape::new();
        let x = tape.leaf(input);
        let scale = tape.leaf(Tensor::full(vec![c], 1.0));
        let shift = tape.leaf(Tensor::zeros(vec![c]));
        let (y, _) = tape
            .batch_norm(x, scale, shift, &vec![0.0; c], &vec![1.0; c], BnMode::Train, 1e-5)
            .unwrap();
        let out = &tape.value(y).data;
        for ch in 0..c {
            let mut vals = Vec::new();
            for s in 0..n {
                vals.extend_from_slice(&out[(s * c + ch) * hw..(s * c + ch + 1) * hw]);
            }
            let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len() as f64;
            let var = vals
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / vals.len() as f64;
            assert!(mean.abs() < 1e-5, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {ch} var {var}");
        }
    }

    #[test]
    fn batch_norm_gradient_matches_finite_differences() {
        let input = random_tensor_amp(vec![2, 3, 4, 4], 15, 0.1);
        let c = 3;
        let scale_t = random_tensor(vec![c], 16);
        let shift_t = random_tensor(vec![c], 17);
        let report = grad_check(
            |tape, x| {
                let scale = tape.leaf(scale_t.clone());
                let shift = tape.leaf(shift_t.clone());
                let (y, _) = tape.batch_norm(
                    x,
                    scale,
                    shift,
                    &vec![0.0; c],
                    &vec![1.0; c],
                    BnMode::Train,
                    1e-5,
                )?;
                Ok(y)
            },
            &input,
            1e-3,
        )
        .unwrap();
        assert!(report.passed(), "rel error {}", report.max_rel_error);
    }

    #[test]
    fn relu_forward_and_dead_gradient() {
        let input = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let mut probe = input.clone();
        probe.requires_grad = true;
        let x = tape.leaf(probe);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data, vec![0.0, 0.0, 2.0]);

        // all-negative input: output and gradient both vanish
        let mut tape = Tape::new();
        let mut neg = Tensor::new(vec![4], vec![-3.0, -0.5, -1.0, -2.0]).unwrap();
        neg.requires_grad = true;
        let x = tape.leaf(neg);
        let y = tape.relu(x);
        let loss = tape.weighted_sum(y, &[1.0, 1.0, 1.0, 1.0]).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.value(y).data.iter().all(|&v| v == 0.0));
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let data: Vec<f32> = (0..32)
            .map(|_| {
                let v: f32 = rng.gen_range(0.05..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let input = Tensor::new(vec![32], data).unwrap();
        let report = grad_check(|tape, x| Ok(tape.relu(x)), &input, 1e-4).unwrap();
        assert!(report.passed(), "rel error {}", report.max_rel_error);
    }

    #[test]
    fn concat_shapes_and_zero_block() {
        let a = random_tensor(vec![1, 2, 4, 4], 19);
        let b = Tensor::zeros(vec![1, 3, 4, 4]);
        let mut tape = Tape::new();
        let na = tape.leaf(a.clone());
        let nb = tape.leaf(b);
        let y = tape.concat_channels(na, nb).unwrap();
        assert_eq!(tape.value(y).shape, vec![1, 5, 4, 4]);
        assert_eq!(&tape.value(y).data[..a.data.len()], a.data.as_slice());
        assert!(tape.value(y).data[a.data.len()..].iter().all(|&v| v == 0.0));

        let c = Tensor::zeros(vec![1, 1, 5, 4]);
        let nc = tape.leaf(c);
        assert!(matches!(
            tape.concat_channels(na, nc),
            Err(GrdError::Config(_))
        ));
    }

    #[test]
    fn concat_gradient_matches_finite_differences() {
        let a = random_tensor(vec![2, 2, 3, 3], 20);
        let b = random_tensor(vec![2, 1, 3, 3], 21);
        let report = grad_check(
            |tape, x| {
                let other = tape.leaf(b.clone());
                let cat = tape.concat_channels(x, other)?;
                tape.relu(cat);
                Ok(cat)
            },
            &a,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "rel error {}", report.max_rel_error);
    }

    #[test]
    fn add_identities_and_gradient_passthrough() {
        let a = random_tensor(vec![2, 1, 3, 3], 22);
        let zero = Tensor::zeros(vec![2, 1, 3, 3]);
        let mut tape = Tape::new();
        let mut probe = a.clone();
        probe.requires_grad = true;
        let na = tape.leaf(probe);
        let nz = tape.leaf(zero);
        let y = tape.add(na, nz).unwrap();
        assert_eq!(tape.value(y).data, a.data);

        let neg = Tensor::new(
            a.shape.clone(),
            a.data.iter().map(|&v| -v).collect(),
        )
        .unwrap();
        let nn = tape.leaf(neg);
        let z = tape.add(na, nn).unwrap();
        assert!(tape.value(z).data.iter().all(|&v| v == 0.0));

        // gradient of a sum w.r.t. each operand is the upstream gradient
        let weights = projection_weights(a.numel());
        let loss = tape.weighted_sum(y, &weights).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(na).unwrap();
        for (gi, wi) in g.iter().zip(&weights) {
            assert_eq!(*gi, *wi as f32);
        }
    }

    #[test]
    fn lp_loss_values_and_gradient() {
        let pred = random_tensor(vec![2, 1, 3, 3], 23);
        let mut tape = Tape::new();
        let mut probe = pred.clone();
        probe.requires_grad = true;
        let p = tape.leaf(probe);
        let loss = tape.lp_loss(p, &pred, 1).unwrap();
        assert_eq!(tape.value(loss).data[0], 0.0);

        // constant offset c under p=1 gives |c|
        let target = Tensor::new(
            pred.shape.clone(),
            pred.data.iter().map(|&v| v - 0.25).collect(),
        )
        .unwrap();
        let loss = tape.lp_loss(p, &target, 1).unwrap();
        assert!((tape.value(loss).data[0] - 0.25).abs() < 1e-6);

        // p=2 smooth case: analytic gradient vs central differences on an
        // independent f64 evaluation of mean((pred - target)^2)
        let target2 = random_tensor(vec![2, 1, 3, 3], 24);
        let reference = |data: &[f32]| -> f64 {
            data.iter()
                .zip(&target2.data)
                .map(|(&a, &b)| {
                    let d = a as f64 - b as f64;
                    d * d
                })
                .sum::<f64>()
                / data.len() as f64
        };
        let mut tape = Tape::new();
        let mut probe = pred.clone();
        probe.requires_grad = true;
        let x = tape.leaf(probe);
        let loss = tape.lp_loss(x, &target2, 2).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(x).unwrap().to_vec();
        let h = 1e-3f64;
        let mut work = pred.data.clone();
        for i in 0..work.len() {
            let orig = work[i];
            let xp = (orig as f64 + h) as f32;
            let xm = (orig as f64 - h) as f32;
            work[i] = xp;
            let plus = reference(&work);
            work[i] = xm;
            let minus = reference(&work);
            work[i] = orig;
            let numeric = (plus - minus) / (xp as f64 - xm as f64);
            let a = analytic[i] as f64;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-4, "element {i}: {a} vs {numeric} (rel {rel})");
        }
    }

    #[test]
    fn grad_check_identity_reports_zero_error() {
        let input = random_tensor(vec![8], 25);
        let report = grad_check(|_tape, x| Ok(x), &input, 1e-6).unwrap();
        // analytic side carries the f32 rounding of the projection weights
        assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
    }

    #[test]
    fn grad_check_conv_bn_relu_stack() {
        // finite differences are only meaningful away from the ReLU kink,
        // so the shift pushes the normalized activations to ~N(2.5, 0.8)
        let input = random_tensor_amp(vec![1, 2, 6, 6], 26, 0.04);
        let weight = random_tensor(vec![3, 2, 3, 3], 27);
        let bias = random_tensor(vec![3], 28);
        let scale_t = Tensor::full(vec![3], 0.8);
        let shift_t = Tensor::full(vec![3], 2.5);
        let report = grad_check(
            |tape, x| {
                let w = tape.leaf(weight.clone());
                let b = tape.leaf(bias.clone());
                let y = tape.conv2d(x, w, b)?;
                let scale = tape.leaf(scale_t.clone());
                let shift = tape.leaf(shift_t.clone());
                let (y, _) = tape.batch_norm(
                    y,
                    scale,
                    shift,
                    &[0.0; 3],
                    &[1.0; 3],
                    BnMode::Train,
                    1e-5,
                )?;
                Ok(tape.relu(y))
            },
            &input,
            1e-3,
        )
        .unwrap();
        assert!(report.passed(), "rel error {}", report.max_rel_error);
    }

    #[test]
    fn grad_check_flags_broken_backward() {
        let input = random_tensor(vec![16], 31);
        let report = grad_check(|tape, x| Ok(tape.scale_grad(x, 2.0)), &input, 1e-3).unwrap();
        assert!(!report.passed());
        assert!(
            (report.max_rel_error - 0.5).abs() < 1e-3,
            "expected ~0.5, got {}",
            report.max_rel_error
        );
    }
}
