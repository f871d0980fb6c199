//! Naive loop oracles. Everything here is written as the slowest, most
//! literal translation of the math: per-point scalar loops, no shared code
//! with the fast kernels or the tape. Tests pin the optimized paths against
//! these, so changes here invalidate the whole verification story; treat
//! the file as frozen.

use crate::block::CorrelationKind;
use crate::tensor::Tensor;

/// out[co,h,w] = sum_ci w[co,ci] * x[ci,h,w], by explicit triple loop.
pub fn conv1x1_loop(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let (c_in, h, wd) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let c_out = w.dims()[0];
    assert_eq!(w.dims()[1], c_in);
    let mut out = Tensor::zeros(vec![c_out, h, wd]);
    for co in 0..c_out {
        for y in 0..h {
            for x_ in 0..wd {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    acc += w.at2(co, ci) * x.at3(ci, y, x_);
                }
                *out.at3_mut(co, y, x_) = acc;
            }
        }
    }
    out
}

/// Direct 3x3 stride-2 pad-1 convolution, one tap at a time.
pub fn conv3x3s2_loop(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let (c_in, h, wd) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let c_out = w.dims()[0];
    assert_eq!(w.dims()[1], c_in);
    let h_out = (h - 1) / 2 + 1;
    let w_out = (wd - 1) / 2 + 1;
    let mut out = Tensor::zeros(vec![c_out, h_out, w_out]);
    for co in 0..c_out {
        for oh in 0..h_out {
            for ow in 0..w_out {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    for kh in 0..3 {
                        for kw in 0..3 {
                            let ih = (2 * oh + kh) as isize - 1;
                            let iw = (2 * ow + kw) as isize - 1;
                            if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                continue;
                            }
                            acc += w.data()[((co * c_in + ci) * 3 + kh) * 3 + kw]
                                * x.at3(ci, ih as usize, iw as usize);
                        }
                    }
                }
                *out.at3_mut(co, oh, ow) = acc;
            }
        }
    }
    out
}

/// Max over the dilated tap grid, enumerating every tap and skipping
/// out-of-bounds ones. The centered window requires an odd kernel.
pub fn dilated_max_pool_loop(x: &Tensor<f64>, kernel: usize, dilation: usize) -> Tensor<f64> {
    assert!(kernel % 2 == 1 && kernel >= 1 && dilation >= 1);
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let half = (kernel as isize - 1) / 2;
    let mut out = Tensor::zeros(vec![c, h, w]);
    for ci in 0..c {
        for y in 0..h {
            for x_ in 0..w {
                let mut best = f64::NEG_INFINITY;
                for a in -half..=half {
                    for b in -half..=half {
                        let ty = y as isize + a * dilation as isize;
                        let tx = x_ as isize + b * dilation as isize;
                        if ty < 0 || tx < 0 || ty >= h as isize || tx >= w as isize {
                            continue;
                        }
                        let v = x.at3(ci, ty as usize, tx as usize);
                        if v > best {
                            best = v;
                        }
                    }
                }
                *out.at3_mut(ci, y, x_) = best;
            }
        }
    }
    out
}

fn bilinear_src(dst: usize, out: usize, inp: usize) -> (usize, usize, f64) {
    let src = (dst as f64 + 0.5) * inp as f64 / out as f64 - 0.5;
    let src = src.clamp(0.0, (inp - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(inp - 1);
    (lo, hi, src - lo as f64)
}

/// Bilinear interpolation with half-pixel centers, evaluated pointwise.
pub fn resize_bilinear_loop(x: &Tensor<f64>, out_h: usize, out_w: usize) -> Tensor<f64> {
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let mut out = Tensor::zeros(vec![c, out_h, out_w]);
    for ci in 0..c {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let (y0, y1, fy) = bilinear_src(oy, out_h, h);
                let (x0, x1, fx) = bilinear_src(ox, out_w, w);
                let top = x.at3(ci, y0, x0) * (1.0 - fx) + x.at3(ci, y0, x1) * fx;
                let bot = x.at3(ci, y1, x0) * (1.0 - fx) + x.at3(ci, y1, x1) * fx;
                *out.at3_mut(ci, oy, ox) = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Reference assembly: resize each map to the target resolution, then pool.
pub fn assemble_refs_loop(
    maps: &[Tensor<f64>],
    h_p: usize,
    w_p: usize,
    kernel: usize,
    dilation: usize,
) -> Vec<Tensor<f64>> {
    maps.iter()
        .map(|m| dilated_max_pool_loop(&resize_bilinear_loop(m, h_p, w_p), kernel, dilation))
        .collect()
}

/// The whole fusion block as one per-point scalar program: embed, correlate,
/// weight, aggregate, project, add residual. No intermediate tensors beyond
/// the pooled references.
#[allow(clippy::too_many_arguments)]
pub fn block_forward_loop(
    maps: &[Tensor<f64>],
    target: usize,
    w_theta: &Tensor<f64>,
    w_phis: &[Tensor<f64>],
    w_alpha: &Tensor<f64>,
    kind: CorrelationKind,
    kernel: usize,
    dilation: usize,
) -> Tensor<f64> {
    let x_p = &maps[target];
    let (c_p, h_p, w_p) = (x_p.dims()[0], x_p.dims()[1], x_p.dims()[2]);
    let c_e = w_theta.dims()[0];
    let n = maps.len();
    let refs = assemble_refs_loop(maps, h_p, w_p, kernel, dilation);

    let mut out = Tensor::zeros(vec![c_p, h_p, w_p]);
    for y in 0..h_p {
        for x in 0..w_p {
            let mut q = vec![0.0; c_e];
            for (e, qe) in q.iter_mut().enumerate() {
                for cp in 0..c_p {
                    *qe += w_theta.at2(e, cp) * x_p.at3(cp, y, x);
                }
            }
            let mut keys = vec![vec![0.0; c_e]; n];
            for (j, key) in keys.iter_mut().enumerate() {
                let c_j = refs[j].dims()[0];
                for (e, ke) in key.iter_mut().enumerate() {
                    for cj in 0..c_j {
                        *ke += w_phis[j].at2(e, cj) * refs[j].at3(cj, y, x);
                    }
                }
            }
            let logits: Vec<f64> =
                keys.iter().map(|k| k.iter().zip(&q).map(|(a, b)| a * b).sum()).collect();
            let weights: Vec<f64> = match kind {
                CorrelationKind::EmbeddedGaussian => {
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                    let s: f64 = exps.iter().sum();
                    exps.iter().map(|e| e / s).collect()
                }
                CorrelationKind::Sigmoid => {
                    logits.iter().map(|l| 1.0 / (1.0 + (-l).exp())).collect()
                }
                CorrelationKind::DotProduct => logits.iter().map(|l| l / n as f64).collect(),
            };
            let mut fused = vec![0.0; c_e];
            for (j, key) in keys.iter().enumerate() {
                for (e, ke) in key.iter().enumerate() {
                    fused[e] += weights[j] * ke;
                }
            }
            for cp in 0..c_p {
                let mut acc = x_p.at3(cp, y, x);
                for (e, f) in fused.iter().enumerate() {
                    acc += w_alpha.at2(cp, e) * f;
                }
                *out.at3_mut(cp, y, x) = acc;
            }
        }
    }
    out
}

/// Addition-fusion baseline: project each pooled reference to the target
/// channel count and sum onto the target, pointwise.
pub fn addition_fusion_loop(
    maps: &[Tensor<f64>],
    target: usize,
    w_projs: &[Tensor<f64>],
    kernel: usize,
    dilation: usize,
) -> Tensor<f64> {
    let x_p = &maps[target];
    let (c_p, h_p, w_p) = (x_p.dims()[0], x_p.dims()[1], x_p.dims()[2]);
    let refs = assemble_refs_loop(maps, h_p, w_p, kernel, dilation);
    let mut out = Tensor::zeros(vec![c_p, h_p, w_p]);
    for cp in 0..c_p {
        for y in 0..h_p {
            for x in 0..w_p {
                let mut acc = x_p.at3(cp, y, x);
                for (j, r) in refs.iter().enumerate() {
                    for cj in 0..r.dims()[0] {
                        acc += w_projs[j].at2(cp, cj) * r.at3(cj, y, x);
                    }
                }
                *out.at3_mut(cp, y, x) = acc;
            }
        }
    }
    out
}

/// Concat-fusion baseline: channel-concatenate the pooled references, apply
/// one projection back to the target channel count, add to the target.
pub fn concat_fusion_loop(
    maps: &[Tensor<f64>],
    target: usize,
    w_proj: &Tensor<f64>,
    kernel: usize,
    dilation: usize,
) -> Tensor<f64> {
    let x_p = &maps[target];
    let (c_p, h_p, w_p) = (x_p.dims()[0], x_p.dims()[1], x_p.dims()[2]);
    let refs = assemble_refs_loop(maps, h_p, w_p, kernel, dilation);
    let mut out = Tensor::zeros(vec![c_p, h_p, w_p]);
    for cp in 0..c_p {
        for y in 0..h_p {
            for x in 0..w_p {
                let mut acc = x_p.at3(cp, y, x);
                let mut col = 0;
                for r in &refs {
                    for cj in 0..r.dims()[0] {
                        acc += w_proj.at2(cp, col) * r.at3(cj, y, x);
                        col += 1;
                    }
                }
                *out.at3_mut(cp, y, x) = acc;
            }
        }
    }
    out
}
