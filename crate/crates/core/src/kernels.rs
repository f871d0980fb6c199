//! Hot compute kernels. Training spends nearly all of its time in the
//! pointwise (1x1) convolution paths, so these are written as register-tiled
//! loops over fixed-size chunks: the shapes LLVM reliably turns into FMA
//! vector code. Accumulation order is fixed, so results are bit-stable
//! across runs for a given build.
//!
//! Layout conventions: activations are row-major `[C, H*W]` slices, weights
//! are row-major `[C_out, C_in]`. Forward kernels overwrite their output;
//! backward kernels accumulate into it.

use crate::tensor::Scalar;

/// Pixel-axis tile width. 16 f32 lanes = one AVX-512 register or two AVX2.
const PTILE: usize = 16;
/// Lane count for reduction accumulators.
const LANES: usize = 8;

/// Dot product with eight independent accumulator chains, combined in a
/// fixed pairwise order.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let chunks_a = a.chunks_exact(LANES);
    let chunks_b = b.chunks_exact(LANES);
    let tail_a = chunks_a.remainder();
    let tail_b = chunks_b.remainder();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for j in 0..LANES {
            acc[j] = ca[j].mul_add(cb[j], acc[j]);
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in tail_a.iter().zip(tail_b) {
        tail = x.mul_add(y, tail);
    }
    let even = (acc[0] + acc[4]) + (acc[2] + acc[6]);
    let odd = (acc[1] + acc[5]) + (acc[3] + acc[7]);
    (even + odd) + tail
}

/// out[co, p] = sum_ci w[co, ci] * x[ci, p]. Overwrites `out`.
///
/// Four output rows share each loaded input tile, so the inner loop is four
/// FMAs per load and the accumulators never leave registers.
pub fn pointwise_fwd<T: Scalar>(
    x: &[T],
    w: &[T],
    out: &mut [T],
    c_in: usize,
    c_out: usize,
    px: usize,
) {
    debug_assert_eq!(x.len(), c_in * px);
    debug_assert_eq!(w.len(), c_out * c_in);
    debug_assert_eq!(out.len(), c_out * px);
    let mut co = 0;
    while co + 4 <= c_out {
        let block = &mut out[co * px..(co + 4) * px];
        let (r0, block) = block.split_at_mut(px);
        let (r1, block) = block.split_at_mut(px);
        let (r2, r3) = block.split_at_mut(px);
        let wb = &w[co * c_in..(co + 4) * c_in];
        let mut p = 0;
        while p + PTILE <= px {
            let mut a0 = [T::zero(); PTILE];
            let mut a1 = [T::zero(); PTILE];
            let mut a2 = [T::zero(); PTILE];
            let mut a3 = [T::zero(); PTILE];
            for ci in 0..c_in {
                let xs = &x[ci * px + p..ci * px + p + PTILE];
                let w0 = wb[ci];
                let w1 = wb[c_in + ci];
                let w2 = wb[2 * c_in + ci];
                let w3 = wb[3 * c_in + ci];
                for j in 0..PTILE {
                    let xv = xs[j];
                    a0[j] = xv.mul_add(w0, a0[j]);
                    a1[j] = xv.mul_add(w1, a1[j]);
                    a2[j] = xv.mul_add(w2, a2[j]);
                    a3[j] = xv.mul_add(w3, a3[j]);
                }
            }
            r0[p..p + PTILE].copy_from_slice(&a0);
            r1[p..p + PTILE].copy_from_slice(&a1);
            r2[p..p + PTILE].copy_from_slice(&a2);
            r3[p..p + PTILE].copy_from_slice(&a3);
            p += PTILE;
        }
        for pp in p..px {
            let mut s = [T::zero(); 4];
            for ci in 0..c_in {
                let xv = x[ci * px + pp];
                for (k, sk) in s.iter_mut().enumerate() {
                    *sk = xv.mul_add(wb[k * c_in + ci], *sk);
                }
            }
            r0[pp] = s[0];
            r1[pp] = s[1];
            r2[pp] = s[2];
            r3[pp] = s[3];
        }
        co += 4;
    }
    while co < c_out {
        let row = &mut out[co * px..(co + 1) * px];
        let wrow = &w[co * c_in..(co + 1) * c_in];
        row.fill(T::zero());
        for ci in 0..c_in {
            let wv = wrow[ci];
            let xs = &x[ci * px..(ci + 1) * px];
            for (o, &xv) in row.iter_mut().zip(xs) {
                *o = xv.mul_add(wv, *o);
            }
        }
        co += 1;
    }
}

/// dx[ci, p] += sum_co w[co, ci] * dout[co, p]. Accumulates into `dx`.
pub fn pointwise_dx<T: Scalar>(
    dout: &[T],
    w: &[T],
    dx: &mut [T],
    c_in: usize,
    c_out: usize,
    px: usize,
) {
    debug_assert_eq!(dout.len(), c_out * px);
    debug_assert_eq!(w.len(), c_out * c_in);
    debug_assert_eq!(dx.len(), c_in * px);
    let mut ci = 0;
    while ci + 4 <= c_in {
        let block = &mut dx[ci * px..(ci + 4) * px];
        let (r0, block) = block.split_at_mut(px);
        let (r1, block) = block.split_at_mut(px);
        let (r2, r3) = block.split_at_mut(px);
        let mut p = 0;
        while p + PTILE <= px {
            let mut a0 = [T::zero(); PTILE];
            let mut a1 = [T::zero(); PTILE];
            let mut a2 = [T::zero(); PTILE];
            let mut a3 = [T::zero(); PTILE];
            for co in 0..c_out {
                let ds = &dout[co * px + p..co * px + p + PTILE];
                let wq = &w[co * c_in + ci..co * c_in + ci + 4];
                for j in 0..PTILE {
                    let dv = ds[j];
                    a0[j] = dv.mul_add(wq[0], a0[j]);
                    a1[j] = dv.mul_add(wq[1], a1[j]);
                    a2[j] = dv.mul_add(wq[2], a2[j]);
                    a3[j] = dv.mul_add(wq[3], a3[j]);
                }
            }
            for j in 0..PTILE {
                r0[p + j] = r0[p + j] + a0[j];
                r1[p + j] = r1[p + j] + a1[j];
                r2[p + j] = r2[p + j] + a2[j];
                r3[p + j] = r3[p + j] + a3[j];
            }
            p += PTILE;
        }
        for pp in p..px {
            let mut s = [T::zero(); 4];
            for co in 0..c_out {
                let dv = dout[co * px + pp];
                let wq = &w[co * c_in + ci..co * c_in + ci + 4];
                for (k, sk) in s.iter_mut().enumerate() {
                    *sk = dv.mul_add(wq[k], *sk);
                }
            }
            r0[pp] = r0[pp] + s[0];
            r1[pp] = r1[pp] + s[1];
            r2[pp] = r2[pp] + s[2];
            r3[pp] = r3[pp] + s[3];
        }
        ci += 4;
    }
    while ci < c_in {
        let row = &mut dx[ci * px..(ci + 1) * px];
        for co in 0..c_out {
            let wv = w[co * c_in + ci];
            let ds = &dout[co * px..(co + 1) * px];
            for (o, &dv) in row.iter_mut().zip(ds) {
                *o = dv.mul_add(wv, *o);
            }
        }
        ci += 1;
    }
}

/// dw[co, ci] += dot(dout[co, :], x[ci, :]). Accumulates into `dw`.
pub fn pointwise_dw<T: Scalar>(
    dout: &[T],
    x: &[T],
    dw: &mut [T],
    c_in: usize,
    c_out: usize,
    px: usize,
) {
    debug_assert_eq!(dout.len(), c_out * px);
    debug_assert_eq!(x.len(), c_in * px);
    debug_assert_eq!(dw.len(), c_out * c_in);
    for co in 0..c_out {
        let dr = &dout[co * px..(co + 1) * px];
        let mut ci = 0;
        while ci + 4 <= c_in {
            let x0 = &x[ci * px..(ci + 1) * px];
            let x1 = &x[(ci + 1) * px..(ci + 2) * px];
            let x2 = &x[(ci + 2) * px..(ci + 3) * px];
            let x3 = &x[(ci + 3) * px..(ci + 4) * px];
            let mut a0 = [T::zero(); LANES];
            let mut a1 = [T::zero(); LANES];
            let mut a2 = [T::zero(); LANES];
            let mut a3 = [T::zero(); LANES];
            let mut p = 0;
            while p + LANES <= px {
                let d = &dr[p..p + LANES];
                let s0 = &x0[p..p + LANES];
                let s1 = &x1[p..p + LANES];
                let s2 = &x2[p..p + LANES];
                let s3 = &x3[p..p + LANES];
                for j in 0..LANES {
                    let dv = d[j];
                    a0[j] = dv.mul_add(s0[j], a0[j]);
                    a1[j] = dv.mul_add(s1[j], a1[j]);
                    a2[j] = dv.mul_add(s2[j], a2[j]);
                    a3[j] = dv.mul_add(s3[j], a3[j]);
                }
                p += LANES;
            }
            for pp in p..px {
                let dv = dr[pp];
                a0[0] = dv.mul_add(x0[pp], a0[0]);
                a1[0] = dv.mul_add(x1[pp], a1[0]);
                a2[0] = dv.mul_add(x2[pp], a2[0]);
                a3[0] = dv.mul_add(x3[pp], a3[0]);
            }
            let base = co * c_in + ci;
            dw[base] = dw[base] + fold(&a0);
            dw[base + 1] = dw[base + 1] + fold(&a1);
            dw[base + 2] = dw[base + 2] + fold(&a2);
            dw[base + 3] = dw[base + 3] + fold(&a3);
            ci += 4;
        }
        while ci < c_in {
            let xr = &x[ci * px..(ci + 1) * px];
            dw[co * c_in + ci] = dw[co * c_in + ci] + dot(dr, xr);
            ci += 1;
        }
    }
}

fn fold<T: Scalar>(acc: &[T; LANES]) -> T {
    let even = (acc[0] + acc[4]) + (acc[2] + acc[6]);
    let odd = (acc[1] + acc[5]) + (acc[3] + acc[7]);
    even + odd
}

/// Output spatial dims of a 3x3 stride-2 pad-1 convolution.
pub fn conv3x3s2_out_dims(h: usize, w: usize) -> (usize, usize) {
    ((h - 1) / 2 + 1, (w - 1) / 2 + 1)
}

/// Unfold `x` ([c_in, h, w], zero padding 1) into `col` with row layout
/// `[c_in * 9, h_out * w_out]`, so the strided 3x3 convolution becomes a
/// plain pointwise product against a `[c_out, c_in * 9]` weight matrix.
pub fn im2col_3x3s2<T: Scalar>(x: &[T], c_in: usize, h: usize, w: usize, col: &mut [T]) {
    let (h_out, w_out) = conv3x3s2_out_dims(h, w);
    let opx = h_out * w_out;
    debug_assert_eq!(x.len(), c_in * h * w);
    debug_assert_eq!(col.len(), c_in * 9 * opx);
    for ci in 0..c_in {
        for kh in 0..3 {
            for kw in 0..3 {
                let row = &mut col[(ci * 9 + kh * 3 + kw) * opx..(ci * 9 + kh * 3 + kw + 1) * opx];
                for oh in 0..h_out {
                    let ih = (2 * oh + kh) as isize - 1;
                    let dst = &mut row[oh * w_out..(oh + 1) * w_out];
                    if ih < 0 || ih >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &x[ci * h * w + ih as usize * w..ci * h * w + (ih as usize + 1) * w];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = (2 * ow + kw) as isize - 1;
                        *d = if iw < 0 || iw >= w as isize { T::zero() } else { src[iw as usize] };
                    }
                }
            }
        }
    }
}

/// Transpose of [`im2col_3x3s2`]: scatter-add column gradients back onto the
/// input layout. Accumulates into `dx`.
pub fn col2im_3x3s2<T: Scalar>(dcol: &[T], c_in: usize, h: usize, w: usize, dx: &mut [T]) {
    let (h_out, w_out) = conv3x3s2_out_dims(h, w);
    let opx = h_out * w_out;
    debug_assert_eq!(dx.len(), c_in * h * w);
    debug_assert_eq!(dcol.len(), c_in * 9 * opx);
    for ci in 0..c_in {
        for kh in 0..3 {
            for kw in 0..3 {
                let row = &dcol[(ci * 9 + kh * 3 + kw) * opx..(ci * 9 + kh * 3 + kw + 1) * opx];
                for oh in 0..h_out {
                    let ih = (2 * oh + kh) as isize - 1;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst =
                        &mut dx[ci * h * w + ih as usize * w..ci * h * w + (ih as usize + 1) * w];
                    for (ow, &g) in row[oh * w_out..(oh + 1) * w_out].iter().enumerate() {
                        let iw = (2 * ow + kw) as isize - 1;
                        if iw >= 0 && (iw as usize) < w {
                            dst[iw as usize] = dst[iw as usize] + g;
                        }
                    }
                }
            }
        }
    }
}
