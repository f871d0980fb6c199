//! Reverse-mode differentiation over a flat arena of tensors. Each forward
//! call appends a value node and an operation record; `backward` replays the
//! records in exact reverse order, accumulating gradients additively, so a
//! value consumed by several operations receives the sum of all branch
//! contributions.
//!
//! One tape corresponds to one training step on one sample and is never
//! shared across threads. Inputs are immutable once pushed; every operation
//! produces a fresh node.

use crate::error::{CoreError, Result};
use crate::kernels;
use crate::tensor::{Scalar, Tensor};

/// Handle to a value node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

enum Op<T: Scalar> {
    Conv1x1 {
        x: ValueId,
        w: ValueId,
        y: ValueId,
    },
    // col holds the unfolded input; backward reuses it for the weight grad.
    Conv3x3S2 {
        x: ValueId,
        w: ValueId,
        y: ValueId,
        col: Vec<T>,
    },
    Relu {
        x: ValueId,
        y: ValueId,
    },
    Sigmoid {
        x: ValueId,
        y: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
        y: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
        y: ValueId,
    },
    Scale {
        x: ValueId,
        y: ValueId,
        factor: T,
    },
    // argmax holds the flat input index that won each output cell.
    DilatedMaxPool {
        x: ValueId,
        y: ValueId,
        argmax: Vec<u32>,
    },
    ResizeBilinear {
        x: ValueId,
        y: ValueId,
    },
    SoftmaxAxis {
        x: ValueId,
        y: ValueId,
        axis: usize,
    },
    PointwiseDot {
        q: ValueId,
        k: ValueId,
        y: ValueId,
    },
    ScaleMap {
        v: ValueId,
        m: ValueId,
        y: ValueId,
    },
    Stack0 {
        xs: Vec<ValueId>,
        y: ValueId,
    },
    Slice0 {
        x: ValueId,
        y: ValueId,
        index: usize,
    },
    Concat0 {
        xs: Vec<ValueId>,
        y: ValueId,
    },
    SumAll {
        x: ValueId,
        y: ValueId,
    },
    WeightedCrossEntropy {
        logits: ValueId,
        y: ValueId,
        targets: Vec<u32>,
        weights: Vec<T>,
        wsum: T,
    },
    // Mutation fixture: identity forward, sign-flipped backward. Proves the
    // finite-difference checker catches a wrong backward rule.
    SignFlippedIdentity {
        x: ValueId,
        y: ValueId,
    },
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Tensor<T>>,
    grads: Vec<Option<Vec<T>>>,
    live: Vec<bool>,
    ops: Vec<Op<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), live: Vec::new(), ops: Vec::new() }
    }

    /// Push an input node. It participates in backward iff `requires_grad`
    /// is set on the tensor.
    pub fn leaf(&mut self, t: Tensor<T>) -> ValueId {
        let live = t.requires_grad;
        self.push(t, live)
    }

    /// Push an input node that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> ValueId {
        self.push(t, false)
    }

    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.nodes[id.0]
    }

    /// Gradient of a node after `backward`. Intermediate node gradients are
    /// consumed during the reverse sweep; only leaves keep theirs.
    pub fn grad(&self, id: ValueId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    fn push(&mut self, t: Tensor<T>, live: bool) -> ValueId {
        self.nodes.push(t);
        self.grads.push(None);
        self.live.push(live);
        ValueId(self.nodes.len() - 1)
    }

    fn push_op(
        &mut self,
        value: Tensor<T>,
        live: bool,
        make: impl FnOnce(ValueId) -> Op<T>,
    ) -> ValueId {
        let y = self.push(value, live);
        self.ops.push(make(y));
        y
    }

    fn live(&self, id: ValueId) -> bool {
        self.live[id.0]
    }

    fn want_rank(&self, op: &'static str, id: ValueId, rank: usize) -> Result<()> {
        let dims = self.nodes[id.0].dims();
        if dims.len() != rank {
            return Err(CoreError::invalid(
                op,
                format!("expected rank {rank}, got shape {dims:?}"),
            ));
        }
        Ok(())
    }

    // -- forward operations -------------------------------------------------

    /// y[co,h,w] = sum_ci w[co,ci] * x[ci,h,w]
    pub fn conv1x1(&mut self, x: ValueId, w: ValueId) -> Result<ValueId> {
        self.want_rank("conv1x1", x, 3)?;
        self.want_rank("conv1x1", w, 2)?;
        let (xd, wd) = (self.nodes[x.0].dims(), self.nodes[w.0].dims());
        if wd[1] != xd[0] {
            return Err(CoreError::ShapeMismatch {
                op: "conv1x1",
                left: xd.to_vec(),
                right: wd.to_vec(),
            });
        }
        let (c_in, h, wi) = (xd[0], xd[1], xd[2]);
        let c_out = wd[0];
        let px = h * wi;
        let mut out = vec![T::zero(); c_out * px];
        kernels::pointwise_fwd(
            self.nodes[x.0].data(),
            self.nodes[w.0].data(),
            &mut out,
            c_in,
            c_out,
            px,
        );
        let t = Tensor::new(vec![c_out, h, wi], out).expect("conv1x1 output shape");
        let live = self.live(x) || self.live(w);
        Ok(self.push_op(t, live, |y| Op::Conv1x1 { x, w, y }))
    }

    /// 3x3 stride-2 pad-1 convolution; backbone stage entries only.
    /// w has shape [c_out, c_in, 3, 3].
    pub fn conv3x3s2(&mut self, x: ValueId, w: ValueId) -> Result<ValueId> {
        self.want_rank("conv3x3s2", x, 3)?;
        self.want_rank("conv3x3s2", w, 4)?;
        let (xd, wd) = (self.nodes[x.0].dims(), self.nodes[w.0].dims());
        if wd[1] != xd[0] || wd[2] != 3 || wd[3] != 3 {
            return Err(CoreError::ShapeMismatch {
                op: "conv3x3s2",
                left: xd.to_vec(),
                right: wd.to_vec(),
            });
        }
        let (c_in, h, wi) = (xd[0], xd[1], xd[2]);
        let c_out = wd[0];
        let (h_out, w_out) = kernels::conv3x3s2_out_dims(h, wi);
        let opx = h_out * w_out;
        let mut col = vec![T::zero(); c_in * 9 * opx];
        kernels::im2col_3x3s2(self.nodes[x.0].data(), c_in, h, wi, &mut col);
        let mut out = vec![T::zero(); c_out * opx];
        kernels::pointwise_fwd(&col, self.nodes[w.0].data(), &mut out, c_in * 9, c_out, opx);
        let t = Tensor::new(vec![c_out, h_out, w_out], out).expect("conv3x3s2 output shape");
        let live = self.live(x) || self.live(w);
        Ok(self.push_op(t, live, |y| Op::Conv3x3S2 { x, w, y, col }))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let data: Vec<T> = self.nodes[x.0].data().iter().map(|&v| v.max(T::zero())).collect();
        let t = Tensor::new(self.nodes[x.0].dims().to_vec(), data).expect("relu shape");
        let live = self.live(x);
        self.push_op(t, live, |y| Op::Relu { x, y })
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let data: Vec<T> =
            self.nodes[x.0].data().iter().map(|&v| T::one() / (T::one() + (-v).exp())).collect();
        let t = Tensor::new(self.nodes[x.0].dims().to_vec(), data).expect("sigmoid shape");
        let live = self.live(x);
        self.push_op(t, live, |y| Op::Sigmoid { x, y })
    }

    /// Identity whose backward rule is deliberately sign-flipped. This is a
    /// mutation fixture for the gradient checker and must never appear in a
    /// real model: every gradient upstream of it comes out negated.
    pub fn sign_flipped_identity(&mut self, x: ValueId) -> ValueId {
        let t = Tensor::new(self.nodes[x.0].dims().to_vec(), self.nodes[x.0].data().to_vec())
            .expect("identity shape");
        let live = self.live(x);
        self.push_op(t, live, |y| Op::SignFlippedIdentity { x, y })
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ad, bd) = (self.nodes[a.0].dims(), self.nodes[b.0].dims());
        if ad != bd {
            return Err(CoreError::ShapeMismatch {
                op: "add",
                left: ad.to_vec(),
                right: bd.to_vec(),
            });
        }
        let data: Vec<T> = self.nodes[a.0]
            .data()
            .iter()
            .zip(self.nodes[b.0].data())
            .map(|(&u, &v)| u + v)
            .collect();
        let t = Tensor::new(ad.to_vec(), data).expect("add shape");
        let live = self.live(a) || self.live(b);
        Ok(self.push_op(t, live, |y| Op::Add { a, b, y }))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ad, bd) = (self.nodes[a.0].dims(), self.nodes[b.0].dims());
        if ad != bd {
            return Err(CoreError::ShapeMismatch {
                op: "mul",
                left: ad.to_vec(),
                right: bd.to_vec(),
            });
        }
        let data: Vec<T> = self.nodes[a.0]
            .data()
            .iter()
            .zip(self.nodes[b.0].data())
            .map(|(&u, &v)| u * v)
            .collect();
        let t = Tensor::new(ad.to_vec(), data).expect("mul shape");
        let live = self.live(a) || self.live(b);
        Ok(self.push_op(t, live, |y| Op::Mul { a, b, y }))
    }

    pub fn scale(&mut self, x: ValueId, factor: T) -> ValueId {
        let data: Vec<T> = self.nodes[x.0].data().iter().map(|&v| v * factor).collect();
        let t = Tensor::new(self.nodes[x.0].dims().to_vec(), data).expect("scale shape");
        let live = self.live(x);
        self.push_op(t, live, |y| Op::Scale { x, y, factor })
    }

    /// Stride-1 max pooling over a dilated, centered tap grid. Output keeps
    /// the input resolution; out-of-bounds taps are skipped, never padded.
    pub fn dilated_max_pool(
        &mut self,
        x: ValueId,
        kernel: usize,
        dilation: usize,
    ) -> Result<ValueId> {
        self.want_rank("dilated_max_pool", x, 3)?;
        if kernel % 2 == 0 {
            return Err(CoreError::invalid(
                "dilated_max_pool",
                format!("kernel must be odd, got {kernel}"),
            ));
        }
        if kernel < 1 || dilation < 1 {
            return Err(CoreError::invalid(
                "dilated_max_pool",
                format!(
                    "kernel and dilation must be >= 1, got kernel {kernel} dilation {dilation}"
                ),
            ));
        }
        let xd = self.nodes[x.0].dims();
        let (c, h, w) = (xd[0], xd[1], xd[2]);
        let data = self.nodes[x.0].data();
        let half = (kernel as isize - 1) / 2;
        // Per-coordinate lists of in-bounds tap offsets; the cartesian
        // product enumerates taps in row-major order, so "first valid tap"
        // tie-breaking falls out of the strict > comparison below.
        let offsets = |len: usize| -> Vec<Vec<isize>> {
            (0..len)
                .map(|i| {
                    (-half..=half)
                        .map(|a| a * dilation as isize)
                        .filter(|&o| {
                            let t = i as isize + o;
                            t >= 0 && t < len as isize
                        })
                        .collect()
                })
                .collect()
        };
        let row_offs = offsets(h);
        let col_offs = offsets(w);
        let mut out = vec![T::zero(); c * h * w];
        let mut argmax = vec![0u32; c * h * w];
        for ci in 0..c {
            let plane = &data[ci * h * w..(ci + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for &oy in &row_offs[y] {
                        let ty = (y as isize + oy) as usize;
                        for &ox in &col_offs[xx] {
                            let tx = (xx as isize + ox) as usize;
                            let idx = ty * w + tx;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[ci * h * w + y * w + xx] = best;
                    argmax[ci * h * w + y * w + xx] = (ci * h * w + best_idx) as u32;
                }
            }
        }
        let t = Tensor::new(xd.to_vec(), out).expect("pool shape");
        let live = self.live(x);
        Ok(self.push_op(t, live, |y| Op::DilatedMaxPool { x, y, argmax }))
    }

    /// Bilinear resize with half-pixel centers; exact identity when the
    /// output resolution matches the input.
    pub fn resize_bilinear(&mut self, x: ValueId, out_h: usize, out_w: usize) -> Result<ValueId> {
        self.want_rank("resize_bilinear", x, 3)?;
        if out_h < 1 || out_w < 1 {
            return Err(CoreError::invalid(
                "resize_bilinear",
                format!("output {out_h}x{out_w} must be >= 1x1"),
            ));
        }
        let xd = self.nodes[x.0].dims();
        let (c, h, w) = (xd[0], xd[1], xd[2]);
        let t = if (h, w) == (out_h, out_w) {
            self.nodes[x.0].clone_data_only()
        } else {
            let ys = axis_taps::<T>(out_h, h);
            let xs = axis_taps::<T>(out_w, w);
            let data = self.nodes[x.0].data();
            let mut out = vec![T::zero(); c * out_h * out_w];
            for ci in 0..c {
                let plane = &data[ci * h * w..(ci + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                    let row0 = &plane[y0 * w..y0 * w + w];
                    let row1 = &plane[y1 * w..y1 * w + w];
                    let dst = &mut out
                        [ci * out_h * out_w + oy * out_w..ci * out_h * out_w + (oy + 1) * out_w];
                    for (d, &(x0, x1, fx)) in dst.iter_mut().zip(&xs) {
                        let top = row0[x0] + fx * (row0[x1] - row0[x0]);
                        let bot = row1[x0] + fx * (row1[x1] - row1[x0]);
                        *d = top + fy * (bot - top);
                    }
                }
            }
            Tensor::new(vec![c, out_h, out_w], out).expect("resize shape")
        };
        let live = self.live(x);
        Ok(self.push_op(t, live, |y| Op::ResizeBilinear { x, y }))
    }

    /// Softmax along one axis with max-subtraction.
    pub fn softmax_axis(&mut self, x: ValueId, axis: usize) -> Result<ValueId> {
        let xd = self.nodes[x.0].dims().to_vec();
        if axis >= xd.len() {
            return Err(CoreError::invalid(
                "softmax_axis",
                format!("axis {axis} out of range for shape {xd:?}"),
            ));
        }
        let n = xd[axis];
        let inner: usize = xd[axis + 1..].iter().product();
        let outer: usize = xd[..axis].iter().product();
        let data = self.nodes[x.0].data();
        let mut out = vec![T::zero(); data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut m = T::neg_infinity();
                for j in 0..n {
                    m = m.max(data[at(j)]);
                }
                let mut sum = T::zero();
                for j in 0..n {
                    let e = (data[at(j)] - m).exp();
                    out[at(j)] = e;
                    sum = sum + e;
                }
                for j in 0..n {
                    out[at(j)] = out[at(j)] / sum;
                }
            }
        }
        let t = Tensor::new(xd, out).expect("softmax shape");
        let live = self.live(x);
        Ok(self.push_op(t, live, |y| Op::SoftmaxAxis { x, y, axis }))
    }

    /// y[h,w] = sum_c q[c,h,w] * k[c,h,w]: the per-point correlation logit.
    pub fn pointwise_dot(&mut self, q: ValueId, k: ValueId) -> Result<ValueId> {
        self.want_rank("pointwise_dot", q, 3)?;
        self.want_rank("pointwise_dot", k, 3)?;
        let (qd, kd) = (self.nodes[q.0].dims(), self.nodes[k.0].dims());
        if qd != kd {
            return Err(CoreError::ShapeMismatch {
                op: "pointwise_dot",
                left: qd.to_vec(),
                right: kd.to_vec(),
            });
        }
        let (c, h, w) = (qd[0], qd[1], qd[2]);
        let px = h * w;
        let (qs, ks) = (self.nodes[q.0].data(), self.nodes[k.0].data());
        let mut out = vec![T::zero(); px];
        for ci in 0..c {
            for p in 0..px {
                out[p] = qs[ci * px + p].mul_add(ks[ci * px + p], out[p]);
            }
        }
        let t = Tensor::new(vec![h, w], out).expect("pointwise_dot shape");
        let live = self.live(q) || self.live(k);
        Ok(self.push_op(t, live, |y| Op::PointwiseDot { q, k, y }))
    }

    /// y[c,h,w] = v[c,h,w] * m[h,w]: scale a feature map by a weight map.
    pub fn scale_map(&mut self, v: ValueId, m: ValueId) -> Result<ValueId> {
        self.want_rank("scale_map", v, 3)?;
        self.want_rank("scale_map", m, 2)?;
        let (vd, md) = (self.nodes[v.0].dims(), self.nodes[m.0].dims());
        if vd[1] != md[0] || vd[2] != md[1] {
            return Err(CoreError::ShapeMismatch {
                op: "scale_map",
                left: vd.to_vec(),
                right: md.to_vec(),
            });
        }
        let (c, h, w) = (vd[0], vd[1], vd[2]);
        let px = h * w;
        let (vs, ms) = (self.nodes[v.0].data(), self.nodes[m.0].data());
        let mut out = vec![T::zero(); c * px];
        for ci in 0..c {
            for p in 0..px {
                out[ci * px + p] = vs[ci * px + p] * ms[p];
            }
        }
        let t = Tensor::new(vd.to_vec(), out).expect("scale_map shape");
        let live = self.live(v) || self.live(m);
        Ok(self.push_op(t, live, |y| Op::ScaleMap { v, m, y }))
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack0(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        if xs.is_empty() {
            return Err(CoreError::invalid("stack0", "empty input list"));
        }
        let first = self.nodes[xs[0].0].dims().to_vec();
        for &x in &xs[1..] {
            if self.nodes[x.0].dims() != first {
                return Err(CoreError::ShapeMismatch {
                    op: "stack0",
                    left: first.clone(),
                    right: self.nodes[x.0].dims().to_vec(),
                });
            }
        }
        let each = self.nodes[xs[0].0].len();
        let mut out = Vec::with_capacity(xs.len() * each);
        for &x in xs {
            out.extend_from_slice(self.nodes[x.0].data());
        }
        let mut dims = vec![xs.len()];
        dims.extend_from_slice(&first);
        let t = Tensor::new(dims, out).expect("stack0 shape");
        let live = xs.iter().any(|&x| self.live(x));
        let xs = xs.to_vec();
        Ok(self.push_op(t, live, |y| Op::Stack0 { xs, y }))
    }

    /// Select one slice along the leading axis, dropping that axis.
    pub fn slice0(&mut self, x: ValueId, index: usize) -> Result<ValueId> {
        let xd = self.nodes[x.0].dims().to_vec();
        if xd.len() < 2 {
            return Err(CoreError::invalid("slice0", format!("need rank >= 2, got shape {xd:?}")));
        }
        if index >= xd[0] {
            return Err(CoreError::invalid(
                "slice0",
                format!("index {index} out of range for shape {xd:?}"),
            ));
        }
        let each: usize = xd[1..].iter().product();
        let data = self.nodes[x.0].data()[index * each..(index + 1) * each].to_vec();
        let t = Tensor::new(xd[1..].to_vec(), data).expect("slice0 shape");
        let live = self.live(x);
        Ok(self.push_op(t, live, |y| Op::Slice0 { x, y, index }))
    }

    /// Concatenate along the leading (channel) axis.
    pub fn concat0(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        if xs.is_empty() {
            return Err(CoreError::invalid("concat0", "empty input list"));
        }
        let rest = self.nodes[xs[0].0].dims()[1..].to_vec();
        let mut lead = 0;
        for &x in xs {
            let d = self.nodes[x.0].dims();
            if d[1..] != rest[..] {
                return Err(CoreError::ShapeMismatch {
                    op: "concat0",
                    left: rest,
                    right: d.to_vec(),
                });
            }
            lead += d[0];
        }
        let mut out = Vec::with_capacity(lead * rest.iter().product::<usize>());
        for &x in xs {
            out.extend_from_slice(self.nodes[x.0].data());
        }
        let mut dims = vec![lead];
        dims.extend_from_slice(&rest);
        let t = Tensor::new(dims, out).expect("concat0 shape");
        let live = xs.iter().any(|&x| self.live(x));
        let xs = xs.to_vec();
        Ok(self.push_op(t, live, |y| Op::Concat0 { xs, y }))
    }

    /// Reduce to a scalar by summation.
    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        let s = self.nodes[x.0].data().iter().fold(T::zero(), |a, &b| a + b);
        let live = self.live(x);
        self.push_op(Tensor::scalar(s), live, |y| Op::SumAll { x, y })
    }

    /// Class-weighted softmax cross-entropy over per-pixel logits [K,H,W],
    /// normalized by the total target weight:
    /// loss = sum_p weight[t_p] * (logsumexp(z_p) - z_p[t_p]) / sum_p weight[t_p]
    pub fn weighted_cross_entropy(
        &mut self,
        logits: ValueId,
        targets: &[u32],
        class_weights: &[T],
    ) -> Result<ValueId> {
        self.want_rank("weighted_cross_entropy", logits, 3)?;
        let ld = self.nodes[logits.0].dims();
        let (k, h, w) = (ld[0], ld[1], ld[2]);
        let px = h * w;
        if targets.len() != px {
            return Err(CoreError::invalid(
                "weighted_cross_entropy",
                format!("targets length {} does not match {h}x{w} pixels", targets.len()),
            ));
        }
        if class_weights.len() != k {
            return Err(CoreError::invalid(
                "weighted_cross_entropy",
                format!("{} class weights for {k} classes", class_weights.len()),
            ));
        }
        if targets.iter().any(|&t| t as usize >= k) {
            return Err(CoreError::invalid(
                "weighted_cross_entropy",
                format!("target class out of range (K={k})"),
            ));
        }
        let data = self.nodes[logits.0].data();
        let mut total = T::zero();
        let mut wsum = T::zero();
        for p in 0..px {
            let mut m = T::neg_infinity();
            for c in 0..k {
                m = m.max(data[c * px + p]);
            }
            let mut sum = T::zero();
            for c in 0..k {
                sum = sum + (data[c * px + p] - m).exp();
            }
            let lse = m + sum.ln();
            let t = targets[p] as usize;
            let wt = class_weights[t];
            total = total + wt * (lse - data[t * px + p]);
            wsum = wsum + wt;
        }
        if !(wsum > T::zero()) {
            return Err(CoreError::invalid(
                "weighted_cross_entropy",
                "total target weight must be positive",
            ));
        }
        let loss = total / wsum;
        let live = self.live(logits);
        let targets = targets.to_vec();
        let weights = class_weights.to_vec();
        Ok(self.push_op(Tensor::scalar(loss), live, |y| Op::WeightedCrossEntropy {
            logits,
            y,
            targets,
            weights,
            wsum,
        }))
    }

    // -- reverse sweep -------------------------------------------------------

    /// Seed d(loss)/d(loss) = 1 and replay all records in reverse. Gradients
    /// land on live leaves; read them with [`Tape::grad`].
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.nodes[loss.0].len() != 1 {
            return Err(CoreError::NonScalarLoss { dims: self.nodes[loss.0].dims().to_vec() });
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        let Tape { nodes, grads, live, ops } = self;
        for op in ops.iter().rev() {
            step_backward(op, nodes, grads, live);
        }
        Ok(())
    }
}

/// (lo, hi, frac) source taps for one output axis, half-pixel convention.
fn axis_taps<T: Scalar>(out: usize, inp: usize) -> Vec<(usize, usize, T)> {
    (0..out)
        .map(|d| {
            let src = (d as f64 + 0.5) * inp as f64 / out as f64 - 0.5;
            let src = src.clamp(0.0, (inp - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(inp - 1);
            (lo, hi, T::from_f64(src - lo as f64))
        })
        .collect()
}

fn grad_buf<'a, T: Scalar>(
    grads: &'a mut [Option<Vec<T>>],
    id: ValueId,
    len: usize,
) -> &'a mut [T] {
    grads[id.0].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice()
}

fn step_backward<T: Scalar>(
    op: &Op<T>,
    nodes: &[Tensor<T>],
    grads: &mut [Option<Vec<T>>],
    live: &[bool],
) {
    // The producing op runs only after every consumer has contributed, so
    // the output gradient is final here and can be taken by value.
    match op {
        Op::Conv1x1 { x, w, y } => {
            let Some(gy) = grads[y.0].take() else { return };
            let xd = nodes[x.0].dims();
            let (c_in, px) = (xd[0], xd[1] * xd[2]);
            let c_out = nodes[w.0].dims()[0];
            if live[x.0] {
                let dx = grad_buf(grads, *x, c_in * px);
                kernels::pointwise_dx(&gy, nodes[w.0].data(), dx, c_in, c_out, px);
            }
            if live[w.0] {
                let dw = grad_buf(grads, *w, c_out * c_in);
                kernels::pointwise_dw(&gy, nodes[x.0].data(), dw, c_in, c_out, px);
            }
        }
        Op::Conv3x3S2 { x, w, y, col } => {
            let Some(gy) = grads[y.0].take() else { return };
            let xd = nodes[x.0].dims();
            let (c_in, h, wi) = (xd[0], xd[1], xd[2]);
            let c_out = nodes[w.0].dims()[0];
            let (h_out, w_out) = kernels::conv3x3s2_out_dims(h, wi);
            let opx = h_out * w_out;
            if live[w.0] {
                let dw = grad_buf(grads, *w, c_out * c_in * 9);
                kernels::pointwise_dw(&gy, col, dw, c_in * 9, c_out, opx);
            }
            if live[x.0] {
                let mut dcol = vec![T::zero(); c_in * 9 * opx];
                kernels::pointwise_dx(&gy, nodes[w.0].data(), &mut dcol, c_in * 9, c_out, opx);
                let dx = grad_buf(grads, *x, c_in * h * wi);
                kernels::col2im_3x3s2(&dcol, c_in, h, wi, dx);
            }
        }
        Op::Relu { x, y } => {
            let Some(gy) = grads[y.0].take() else { return };
            if !live[x.0] {
                return;
            }
            let xs = nodes[x.0].data();
            let dx = grad_buf(grads, *x, xs.len());
            for ((d, &g), &v) in dx.iter_mut().zip(&gy).zip(xs) {
                if v > T::zero() {
                    *d = *d + g;
                }
            }
        }
        Op::SignFlippedIdentity { x, y } => {
            let Some(gy) = grads[y.0].take() else { return };
            if !live[x.0] {
                return;
            }
            let dx = grad_buf(grads, *x, gy.len());
            for (d, &g) in dx.iter_mut().zip(&gy) {
                *d = *d - g;
            }
        }
        Op::Sigmoid { x, y } => {
            let Some(gy) = grads[y.0].take() else { return };
            if !live[x.0] {
                return;
            }
            let ys = nodes[y.0].data();
            let dx = grad_buf(grads, *x, ys.len());
            for ((d, &g), &s) in dx.iter_mut().zip(&gy).zip(ys) {
                *d = *d + g * s * (T::one() - s);
            }
        }
        Op::Add { a, b, y } => {
            let Some(gy) = grads[y.0].take() else { return };
            for id in [a, b] {
                if live[id.0] {
                    let d = grad_buf(grads, *id, gy.len());
                    for (dd, &g) in d.iter_mut().zip(&gy) {
                        *dd = *dd + g;
                    }
                }
            }
        }
        Op::Mul { a, b, y } => {
            let Some(gy) = grads[y.0].take() else { return };
            if live[a.0] {
                let bs = nodes[b.0].data();
                let da = grad_buf(grads, *a, gy.len());
                for ((d, &g), &v) in da.iter_mut().zip(&gy).zip(bs) {
                    *d = *d + g * v;
                }
            }
            if live[b.0] {
                let as_ = nodes[a.0].data();
                let db = grad_buf(grads, *b, gy.len());
                for ((d, &g), &v) in db.iter_mut().zip(&gy).zip(as_) {
                    *d = *d + g * v;
                }
            }
        }
        Op::Scale { x, y, factor } => {
            let Some(gy) = grads[y.0].take() else { return };
            if !live[x.0] {
                return;
            }
            let dx = grad_buf(grads, *x, gy.len());
            for (d, &g) in dx.iter_mut().zip(&gy) {
                *d = *d + g * *factor;
            }
        }
        Op::DilatedMaxPool { x, y, argmax } => {
            let Some(gy) = grads[y.0].take() else { return };
            if !live[x.0] {
                return;
            }
            let dx = grad_buf(grads, *x, nodes[x.0].len());
            for (&idx, &g) in argmax.iter().zip(&gy) {
                dx[idx as usize] = dx[idx as usize] + g;
            }
        }
        Op::ResizeBilinear { x, y } => {
            let Some(gy) = grads[y.0].take() else { return };
            if !live[x.0] {
                return;
            }
            let xd = nodes[x.0].dims();
            let yd = nodes[y.0].dims();
            let (c, h, w) = (xd[0], xd[1], xd[2]);
            let (oh, ow) = (yd[1], yd[2]);
            let dx = grad_buf(grads, *x, c * h * w);
            if (h, w) == (oh, ow) {
                for (d, &g) in dx.iter_mut().zip(&gy) {
                    *d = *d + g;
                }
                return;
            }
            let ys = axis_taps::<T>(oh, h);
            let xs = axis_taps::<T>(ow, w);
            for ci in 0..c {
                let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                        let g = gy[ci * oh * ow + oy * ow + ox];
                        let gtop = g * (T::one() - fy);
                        let gbot = g * fy;
                        plane[y0 * w + x0] = plane[y0 * w + x0] + gtop * (T::one() - fx);
                        plane[y0 * w + x1] = plane[y0 * w + x1] + gtop * fx;
                        plane[y1 * w + x0] = plane[y1 * w + x0] + gbot * (T::one() - fx);
                        plane[y1 * w + x1] = plane[y1 * w + x1] + gbot * fx;
                    }
                }
            }
        }
        Op::SoftmaxAxis { x, y, axis } => {
            let Some(gy) = grads[y.0].take() else { return };
            if !live[x.0] {
                return;
            }
            let yd = nodes[y.0].dims();
            let n = yd[*axis];
            let inner: usize = yd[*axis + 1..].iter().product();
            let outer: usize = yd[..*axis].iter().product();
            let ys = nodes[y.0].data();
            let dx = grad_buf(grads, *x, ys.len());
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let mut dot = T::zero();
                    for j in 0..n {
                        dot = dot + gy[at(j)] * ys[at(j)];
                    }
                    for j in 0..n {
                        dx[at(j)] = dx[at(j)] + ys[at(j)] * (gy[at(j)] - dot);
                    }
                }
            }
        }
        Op::PointwiseDot { q, k, y } => {
            let Some(gy) = grads[y.0].take() else { return };
            let qd = nodes[q.0].dims();
            let (c, px) = (qd[0], qd[1] * qd[2]);
            if live[q.0] {
                let ks = nodes[k.0].data();
                let dq = grad_buf(grads, *q, c * px);
                for ci in 0..c {
                    for p in 0..px {
                        dq[ci * px + p] = gy[p].mul_add(ks[ci * px + p], dq[ci * px + p]);
                    }
                }
            }
            if live[k.0] {
                let qs = nodes[q.0].data();
                let dk = grad_buf(grads, *k, c * px);
                for ci in 0..c {
                    for p in 0..px {
                        dk[ci * px + p] = gy[p].mul_add(qs[ci * px + p], dk[ci * px + p]);
                    }
                }
            }
        }
        Op::ScaleMap { v, m, y } => {
            let Some(gy) = grads[y.0].take() else { return };
            let vd = nodes[v.0].dims();
            let (c, px) = (vd[0], vd[1] * vd[2]);
            if live[v.0] {
                let ms = nodes[m.0].data();
                let dv = grad_buf(grads, *v, c * px);
                for ci in 0..c {
                    for p in 0..px {
                        dv[ci * px + p] = gy[ci * px + p].mul_add(ms[p], dv[ci * px + p]);
                    }
                }
            }
            if live[m.0] {
                let vs = nodes[v.0].data();
                let dm = grad_buf(grads, *m, px);
                for ci in 0..c {
                    for p in 0..px {
                        dm[p] = gy[ci * px + p].mul_add(vs[ci * px + p], dm[p]);
                    }
                }
            }
        }
        Op::Stack0 { xs, y } => {
            let Some(gy) = grads[y.0].take() else { return };
            let each = gy.len() / xs.len();
            for (j, &x) in xs.iter().enumerate() {
                if live[x.0] {
                    let dx = grad_buf(grads, x, each);
                    for (d, &g) in dx.iter_mut().zip(&gy[j * each..(j + 1) * each]) {
                        *d = *d + g;
                    }
                }
            }
        }
        Op::Slice0 { x, y, index } => {
            let Some(gy) = grads[y.0].take() else { return };
            if !live[x.0] {
                return;
            }
            let each = gy.len();
            let dx = grad_buf(grads, *x, nodes[x.0].len());
            for (d, &g) in dx[index * each..(index + 1) * each].iter_mut().zip(&gy) {
                *d = *d + g;
            }
        }
        Op::Concat0 { xs, y } => {
            let Some(gy) = grads[y.0].take() else { return };
            let mut off = 0;
            for &x in xs {
                let len = nodes[x.0].len();
                if live[x.0] {
                    let dx = grad_buf(grads, x, len);
                    for (d, &g) in dx.iter_mut().zip(&gy[off..off + len]) {
                        *d = *d + g;
                    }
                }
                off += len;
            }
        }
        Op::SumAll { x, y } => {
            let Some(gy) = grads[y.0].take() else { return };
            if !live[x.0] {
                return;
            }
            let g = gy[0];
            let dx = grad_buf(grads, *x, nodes[x.0].len());
            for d in dx.iter_mut() {
                *d = *d + g;
            }
        }
        Op::WeightedCrossEntropy { logits, y, targets, weights, wsum } => {
            let Some(gy) = grads[y.0].take() else { return };
            if !live[logits.0] {
                return;
            }
            let g = gy[0];
            let ld = nodes[logits.0].dims();
            let (k, px) = (ld[0], ld[1] * ld[2]);
            let zs = nodes[logits.0].data();
            let dz = grad_buf(grads, *logits, k * px);
            for p in 0..px {
                let mut m = T::neg_infinity();
                for c in 0..k {
                    m = m.max(zs[c * px + p]);
                }
                let mut sum = T::zero();
                for c in 0..k {
                    sum = sum + (zs[c * px + p] - m).exp();
                }
                let t = targets[p] as usize;
                let scale = g * weights[t] / *wsum;
                for c in 0..k {
                    let s = (zs[c * px + p] - m).exp() / sum;
                    let delta = if c == t { T::one() } else { T::zero() };
                    dz[c * px + p] = dz[c * px + p] + scale * (s - delta);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn rand_tensor(dims: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = rng_from_seed(seed);
        let n = dims.iter().product();
        Tensor::new(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn conv1x1_identity_weight_is_identity() {
        let x = rand_tensor(vec![3, 4, 5], 1);
        let mut w = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let wi = tape.leaf(w);
        let y = tape.conv1x1(xi, wi).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn conv1x1_zero_weight_is_zero() {
        let x = rand_tensor(vec![3, 2, 2], 2);
        let w = Tensor::zeros(vec![4, 3]);
        let mut tape = Tape::new();
        let xi = tape.leaf(x);
        let wi = tape.leaf(w);
        let y = tape.conv1x1(xi, wi).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv1x1_matches_triple_loop_oracle() {
        let x = rand_tensor(vec![3, 2, 2], 3);
        let w = rand_tensor(vec![2, 3], 4);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let wi = tape.leaf(w.clone());
        let y = tape.conv1x1(xi, wi).unwrap();
        let want = reference::conv1x1_loop(&x, &w);
        assert!(tape.value(y).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn conv1x1_rejects_channel_mismatch() {
        let x = rand_tensor(vec![3, 2, 2], 5);
        let w = rand_tensor(vec![2, 4], 6);
        let mut tape = Tape::new();
        let xi = tape.leaf(x);
        let wi = tape.leaf(w);
        let err = tape.conv1x1(xi, wi).unwrap_err();
        assert!(matches!(err, CoreError::ShapeMismatch { op: "conv1x1", .. }));
    }

    #[test]
    fn conv3x3s2_matches_direct_loop() {
        let x = rand_tensor(vec![2, 7, 6], 7);
        let w = rand_tensor(vec![3, 2, 3, 3], 8);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let wi = tape.leaf(w.clone());
        let y = tape.conv3x3s2(xi, wi).unwrap();
        let want = reference::conv3x3s2_loop(&x, &w);
        assert!(tape.value(y).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn pool_kernel_one_is_identity() {
        let x = rand_tensor(vec![2, 4, 4], 9);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let y = tape.dilated_max_pool(xi, 1, 1).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn pool_constant_input_stays_constant() {
        let x = Tensor::filled(vec![1, 6, 6], 2.5);
        let mut tape = Tape::new();
        let xi = tape.leaf(x);
        let y = tape.dilated_max_pool(xi, 5, 3).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn pool_ramp_matches_exhaustive_taps() {
        let x = Tensor::from_fn(vec![1, 5, 5], |i| (i as f64 * 7.0) % 11.0);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let y = tape.dilated_max_pool(xi, 3, 2).unwrap();
        let want = reference::dilated_max_pool_loop(&x, 3, 2);
        assert_eq!(tape.value(y).data(), want.data());
    }

    #[test]
    fn pool_never_below_input() {
        let x = rand_tensor(vec![3, 8, 8], 10);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let y = tape.dilated_max_pool(xi, 5, 3).unwrap();
        for (o, i) in tape.value(y).data().iter().zip(x.data()) {
            assert!(o >= i);
        }
    }

    #[test]
    fn pool_rejects_even_kernel_and_zero_dilation() {
        let x = rand_tensor(vec![1, 4, 4], 11);
        let mut tape = Tape::new();
        let xi = tape.leaf(x);
        assert!(tape.dilated_max_pool(xi, 4, 1).is_err());
        assert!(tape.dilated_max_pool(xi, 3, 0).is_err());
    }

    #[test]
    fn pool_tie_routes_gradient_to_first_tap() {
        // Constant plane: every tap ties, so the first valid row-major tap
        // wins. For the output cell at (1,1) with kernel 3, dilation 1 that
        // is the input corner (0,0).
        let x = Tensor::filled(vec![1, 3, 3], 1.0).with_grad();
        let mut tape = Tape::new();
        let xi = tape.leaf(x);
        let y = tape.dilated_max_pool(xi, 3, 1).unwrap();
        // Pick out only d(out[1,1]) by multiplying with a one-hot mask.
        let mut mask = Tensor::zeros(vec![1, 3, 3]);
        mask.data_mut()[4] = 1.0;
        let mi = tape.constant(mask);
        let prod = tape.mul(y, mi).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();
        let g = tape.grad(xi).unwrap();
        let mut want = vec![0.0; 9];
        want[0] = 1.0;
        assert_eq!(g, &want[..]);
    }

    #[test]
    fn resize_same_dims_is_exact_identity() {
        let x = rand_tensor(vec![2, 5, 7], 12);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let y = tape.resize_bilinear(xi, 5, 7).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn resize_constant_stays_constant() {
        let x = Tensor::filled(vec![1, 3, 3], 4.0f64);
        let mut tape = Tape::new();
        let xi = tape.leaf(x);
        let y = tape.resize_bilinear(xi, 9, 5).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_upsample_matches_interpolation_oracle() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 5.0]).unwrap();
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let y = tape.resize_bilinear(xi, 4, 4).unwrap();
        let want = reference::resize_bilinear_loop(&x, 4, 4);
        assert!(tape.value(y).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn resize_downsample_matches_interpolation_oracle() {
        let x = rand_tensor(vec![2, 8, 8], 13);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let y = tape.resize_bilinear(xi, 3, 5).unwrap();
        let want = reference::resize_bilinear_loop(&x, 3, 5);
        assert!(tape.value(y).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn softmax_uniform_gives_equal_weights() {
        let x = Tensor::filled(vec![4, 2, 2], 3.7f64);
        let mut tape = Tape::new();
        let xi = tape.leaf(x);
        let y = tape.softmax_axis(xi, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let x = rand_tensor(vec![3, 2, 2], 14);
        let shifted =
            Tensor::new(vec![3, 2, 2], x.data().iter().map(|v| v + 100.0).collect()).unwrap();
        let mut tape = Tape::new();
        let a = tape.leaf(x);
        let b = tape.leaf(shifted);
        let ya = tape.softmax_axis(a, 0).unwrap();
        let yb = tape.softmax_axis(b, 0).unwrap();
        assert!(tape.value(ya).max_abs_diff(tape.value(yb)) < 1e-12);
    }

    #[test]
    fn softmax_closed_form_quarter_three_quarters() {
        let x = Tensor::new(vec![2, 1, 1], vec![0.0, 3.0f64.ln()]).unwrap();
        let mut tape = Tape::new();
        let xi = tape.leaf(x);
        let y = tape.softmax_axis(xi, 0).unwrap();
        let got = tape.value(y).data();
        assert!((got[0] - 0.25).abs() < 1e-12);
        assert!((got[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_slices_sum_to_one_and_stay_positive() {
        let x = rand_tensor(vec![5, 3, 3], 15);
        let mut tape = Tape::new();
        let xi = tape.leaf(x);
        let y = tape.softmax_axis(xi, 0).unwrap();
        let v = tape.value(y);
        for p in 0..9 {
            let s: f64 = (0..5).map(|j| v.data()[j * 9 + p]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(v.data().iter().all(|&e| e > 0.0));
    }

    #[test]
    fn sigmoid_closed_forms() {
        let x = Tensor::new(vec![3], vec![0.0, 3.0f64.ln(), 40.0]).unwrap();
        let mut tape = Tape::new();
        let xi = tape.leaf(x);
        let y = tape.sigmoid(xi);
        let got = tape.value(y).data();
        assert!((got[0] - 0.5).abs() < 1e-12);
        assert!((got[1] - 0.75).abs() < 1e-12);
        assert!(got[2] > 0.999 && got[2] <= 1.0);
    }

    #[test]
    fn add_zeros_is_identity_and_scale_halves() {
        let x = rand_tensor(vec![2, 3, 3], 16);
        let z = Tensor::zeros(vec![2, 3, 3]);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let zi = tape.leaf(z);
        let y = tape.add(xi, zi).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
        let s = tape.scale(xi, 0.5);
        for (a, b) in tape.value(s).data().iter().zip(x.data()) {
            assert!((a - b * 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_gradient_passes_only_where_positive() {
        let x = Tensor::new(vec![4], vec![-1.0, 1.0, -1.0, 1.0]).unwrap().with_grad();
        let mut tape = Tape::new();
        let xi = tape.leaf(x);
        let y = tape.relu(xi);
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(xi).unwrap(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn branch_gradients_accumulate_like_duplicated_inputs() {
        let x = rand_tensor(vec![2, 3, 3], 17);
        // Shared-input program: the leaf feeds both branches.
        let mut t1 = Tape::new();
        let xi = t1.leaf(x.clone().with_grad());
        let r = t1.relu(xi);
        let s = t1.sigmoid(xi);
        let both = t1.add(r, s).unwrap();
        let l1 = t1.sum_all(both);
        t1.backward(l1).unwrap();
        // Duplicated-input program: one copy per branch, gradients summed.
        let mut t2 = Tape::new();
        let x1 = t2.leaf(x.clone().with_grad());
        let x2 = t2.leaf(x.with_grad());
        let r2 = t2.relu(x1);
        let s2 = t2.sigmoid(x2);
        let both2 = t2.add(r2, s2).unwrap();
        let l2 = t2.sum_all(both2);
        t2.backward(l2).unwrap();
        let g = t1.grad(xi).unwrap();
        let g1 = t2.grad(x1).unwrap();
        let g2 = t2.grad(x2).unwrap();
        for i in 0..g.len() {
            assert!((g[i] - (g1[i] + g2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn stack_slice_concat_round_trip() {
        let a = rand_tensor(vec![2, 2], 18);
        let b = rand_tensor(vec![2, 2], 19);
        let mut tape = Tape::new();
        let ai = tape.leaf(a.clone());
        let bi = tape.leaf(b.clone());
        let s = tape.stack0(&[ai, bi]).unwrap();
        assert_eq!(tape.value(s).dims(), &[2, 2, 2]);
        let back = tape.slice0(s, 1).unwrap();
        assert_eq!(tape.value(back).data(), b.data());
        let a3 = rand_tensor(vec![1, 2, 2], 20);
        let b3 = rand_tensor(vec![3, 2, 2], 21);
        let ai3 = tape.leaf(a3.clone());
        let bi3 = tape.leaf(b3.clone());
        let c = tape.concat0(&[ai3, bi3]).unwrap();
        assert_eq!(tape.value(c).dims(), &[4, 2, 2]);
        assert_eq!(&tape.value(c).data()[..4], a3.data());
        assert_eq!(&tape.value(c).data()[4..], b3.data());
    }

    #[test]
    fn weighted_cross_entropy_matches_hand_formula() {
        // Two classes over two pixels, unequal class weights.
        let logits = Tensor::new(vec![2, 1, 2], vec![0.3f64, -0.2, -0.1, 0.4]).unwrap();
        let targets = [0u32, 1u32];
        let weights = [1.0, 3.0];
        let mut tape = Tape::new();
        let li = tape.leaf(logits.clone());
        let loss = tape.weighted_cross_entropy(li, &targets, &weights).unwrap();
        let mut want = 0.0;
        let mut wsum = 0.0;
        for p in 0..2 {
            let z0 = logits.data()[p];
            let z1 = logits.data()[2 + p];
            let m = z0.max(z1);
            let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
            let t = targets[p] as usize;
            let zt = if t == 0 { z0 } else { z1 };
            want += weights[t] * (lse - zt);
            wsum += weights[t];
        }
        want /= wsum;
        assert!((tape.value(loss).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn weighted_cross_entropy_rejects_bad_targets() {
        let logits = Tensor::new(vec![2, 1, 1], vec![0.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let li = tape.leaf(logits);
        assert!(tape.weighted_cross_entropy(li, &[5], &[1.0, 1.0]).is_err());
        assert!(tape.weighted_cross_entropy(li, &[0, 0], &[1.0, 1.0]).is_err());
        assert!(tape.weighted_cross_entropy(li, &[0], &[1.0]).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let x = rand_tensor(vec![2, 2], 22);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.with_grad());
        let y = tape.relu(xi);
        assert!(matches!(tape.backward(y), Err(CoreError::NonScalarLoss { .. })));
    }

    #[test]
    fn finite_inputs_stay_finite_through_the_block_ops() {
        let x = rand_tensor(vec![3, 6, 6], 23);
        let mut tape = Tape::new();
        let xi = tape.leaf(x);
        let p = tape.dilated_max_pool(xi, 5, 3).unwrap();
        let r = tape.resize_bilinear(p, 4, 9).unwrap();
        let s = tape.softmax_axis(r, 0).unwrap();
        let g = tape.sigmoid(s);
        for &v in tape.value(g).data() {
            assert!(v.is_finite());
        }
    }
}
