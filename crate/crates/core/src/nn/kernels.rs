//! Forward and backward kernels.
//!
//! Convolutions use a padded flat-index scheme: the input is zero-padded
//! into a `(D+2p) x (H+2p) x (W+2p)` buffer and every output voxel `q`
//! (addressed with the padded row/plane pitch) accumulates
//! `w[tap] * xpad[q + offset(tap)]` over channels and taps. Positions with
//! `x >= W` or `y >= H` are computed and discarded. The inner loops keep
//! `ROWS` output channels times `VECS` SIMD vectors of consecutive positions
//! in registers.

use super::{Lanes, Scalar, Tensor};

const ROWS: usize = 4;
const VECS: usize = 2;

/// Positions per register block.
fn block<T: Scalar>() -> usize {
    VECS * T::V::N
}

#[inline]
fn axpy<T: Scalar>(acc: &mut [T], alpha: T, x: &[T]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += alpha * v;
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Geometry of a same-padded cubic convolution over `[d, h, w]`.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    d: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ph: usize,
    pw: usize,
    padded_len: usize,
    /// `span` (the flat output range in padded pitch) rounded up to whole blocks.
    blocks_len: usize,
    /// Largest tap offset.
    max_off: usize,
    /// Channel stride of padded buffers: room for every block read.
    stride: usize,
}

impl ConvGeom {
    fn new<T: Scalar>(spatial: [usize; 3], k: usize) -> Self {
        let [d, h, w] = spatial;
        let pad = k / 2;
        let (pd, ph, pw) = (d + 2 * pad, h + 2 * pad, w + 2 * pad);
        let padded_len = pd * ph * pw;
        let span = ((d - 1) * ph + (h - 1)) * pw + w;
        let max_off = ((k - 1) * ph + (k - 1)) * pw + (k - 1);
        let lanes = block::<T>();
        let blocks_len = span.next_multiple_of(lanes);
        // the input-gradient pass reads `padded_len` outputs shifted by up to `max_off`
        let stride = padded_len.next_multiple_of(lanes).max(blocks_len) + max_off;
        ConvGeom {
            d,
            h,
            w,
            k,
            pad,
            ph,
            pw,
            padded_len,
            blocks_len,
            max_off,
            stride,
        }
    }

    fn taps(&self) -> Vec<usize> {
        let k = self.k;
        (0..k * k * k)
            .map(|t| {
                let (kz, ky, kx) = (t / (k * k), (t / k) % k, t % k);
                (kz * self.ph + ky) * self.pw + kx
            })
            .collect()
    }

    /// Flat-range index of output row `(z, y)`.
    #[inline]
    fn q(&self, z: usize, y: usize) -> usize {
        (z * self.ph + y) * self.pw
    }

    /// Flat index of `(z, y, 0)` inside a padded channel.
    #[inline]
    fn interior(&self, z: usize, y: usize) -> usize {
        ((z + self.pad) * self.ph + y + self.pad) * self.pw + self.pad
    }
}

/// Input channels copied into zeroed padded buffers of `g.stride`.
fn padded_input<T: Scalar>(x: &Tensor<T>, g: &ConvGeom) -> Vec<T> {
    let cin = x.channels();
    let mut buf = vec![T::zero(); cin * g.stride];
    for c in 0..cin {
        let src = x.channel(c);
        let dst = &mut buf[c * g.stride..];
        for z in 0..g.d {
            for y in 0..g.h {
                let s = (z * g.h + y) * g.w;
                let t = g.interior(z, y);
                dst[t..t + g.w].copy_from_slice(&src[s..s + g.w]);
            }
        }
    }
    buf
}

/// `out[o][q] = sum_{i, t} w[o][i][t] * src[i * stride + q + offs[t]]` for
/// `q < out_len` (a multiple of the register block). `w` has its output
/// channels padded to a multiple of `ROWS`; `out` has one `out_len` row per
/// padded channel.
fn correlate<T: Scalar>(src: &[T], stride: usize, nsrc: usize, w: &[T], offs: &[usize], out_len: usize, out: &mut [T]) {
    let n = T::V::N;
    let ntaps = offs.len();
    let rows = w.len() / (nsrc * ntaps);
    debug_assert_eq!(rows % ROWS, 0);
    debug_assert_eq!(out_len % block::<T>(), 0);
    for q0 in (0..out_len).step_by(block::<T>()) {
        for rb in (0..rows).step_by(ROWS) {
            let mut acc = [[T::V::splat(T::zero()); VECS]; ROWS];
            for i in 0..nsrc {
                let sc = &src[i * stride + q0..];
                let wr: [&[T]; ROWS] = std::array::from_fn(|r| &w[((rb + r) * nsrc + i) * ntaps..][..ntaps]);
                for (t, &off) in offs.iter().enumerate() {
                    let s: [T::V; VECS] = std::array::from_fn(|v| T::V::load(&sc[off + v * n..]));
                    for r in 0..ROWS {
                        let wv = T::V::splat(wr[r][t]);
                        for v in 0..VECS {
                            acc[r][v] = wv.mul_add(s[v], acc[r][v]);
                        }
                    }
                }
            }
            for (r, a) in acc.iter().enumerate() {
                for (v, x) in a.iter().enumerate() {
                    x.store(&mut out[(rb + r) * out_len + q0 + v * n..]);
                }
            }
        }
    }
}

/// Weights padded with zero rows to a multiple of `ROWS` output channels.
fn pad_rows<T: Scalar>(w: &[T], rows: usize, row_len: usize) -> Vec<T> {
    let mut v = w[..rows * row_len].to_vec();
    v.resize(rows.next_multiple_of(ROWS) * row_len, T::zero());
    v
}

/// Same-padded, stride-1 cubic convolution. `weight` is `[cout, cin, k, k, k]`.
pub fn conv3d_forward<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: &[T], cout: usize, k: usize) -> Tensor<T> {
    let cin = x.channels();
    let g = ConvGeom::new::<T>(x.spatial(), k);
    let kk = k * k * k;
    debug_assert_eq!(weight.len(), cout * cin * kk);
    let xpad = padded_input(x, &g);
    let taps = g.taps();
    let w = pad_rows(weight, cout, cin * kk);
    let mut acc = vec![T::zero(); cout.next_multiple_of(ROWS) * g.blocks_len];
    correlate(&xpad, g.stride, cin, &w, &taps, g.blocks_len, &mut acc);
    let mut out = Tensor::zeros([cout, g.d, g.h, g.w]);
    let plane = g.d * g.h * g.w;
    for co in 0..cout {
        let a = &acc[co * g.blocks_len..];
        let oc = &mut out.data[co * plane..(co + 1) * plane];
        for z in 0..g.d {
            for y in 0..g.h {
                let q = g.q(z, y);
                let o = (z * g.h + y) * g.w;
                for (dst, &v) in oc[o..o + g.w].iter_mut().zip(&a[q..q + g.w]) {
                    *dst = v + bias[co];
                }
            }
        }
    }
    out
}

/// `gw[co][ci][t] += sum_q gq[co][q] * xpad[ci][q + offs[t]]`, blocked over
/// `ROWS` output channels and `KX` consecutive taps.
fn weight_grad<T: Scalar, const KX: usize>(gq: &[T], xpad: &[T], g: &ConvGeom, cin: usize, cout: usize, offs: &[usize], gw: &mut [T]) {
    let n = T::V::N;
    let ntaps = offs.len();
    for ci in 0..cin {
        let xc = &xpad[ci * g.stride..(ci + 1) * g.stride];
        for rb in (0..cout.next_multiple_of(ROWS)).step_by(ROWS) {
            let gr: [&[T]; ROWS] = std::array::from_fn(|r| &gq[(rb + r) * g.blocks_len..][..g.blocks_len]);
            for t0 in (0..ntaps).step_by(KX) {
                let xo = &xc[offs[t0]..];
                let mut acc = [[T::V::splat(T::zero()); KX]; ROWS];
                for q0 in (0..g.blocks_len).step_by(n) {
                    let xs: [T::V; KX] = std::array::from_fn(|kx| T::V::load(&xo[q0 + kx..]));
                    for r in 0..ROWS {
                        let gs = T::V::load(&gr[r][q0..]);
                        for kx in 0..KX {
                            acc[r][kx] = gs.mul_add(xs[kx], acc[r][kx]);
                        }
                    }
                }
                for (r, ar) in acc.iter().enumerate().take(cout - rb.min(cout)) {
                    for (kx, a) in ar.iter().enumerate() {
                        gw[((rb + r) * cin + ci) * ntaps + t0 + kx] += a.sum();
                    }
                }
            }
        }
    }
}

/// Backward pass of [`conv3d_forward`]. Accumulates into `grad_weight` and
/// `grad_bias`; returns the input gradient when `need_input_grad`.
pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    grad_out: &Tensor<T>,
    k: usize,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    let cin = x.channels();
    let cout = grad_out.channels();
    let g = ConvGeom::new::<T>(x.spatial(), k);
    let kk = k * k * k;
    let xpad = padded_input(x, &g);
    let taps = g.taps();

    // output gradient laid out on the flat range, zero at discarded positions
    let mut gq = vec![T::zero(); cout.next_multiple_of(ROWS) * g.blocks_len];
    for co in 0..cout {
        let src = grad_out.channel(co);
        let dst = &mut gq[co * g.blocks_len..(co + 1) * g.blocks_len];
        for z in 0..g.d {
            for y in 0..g.h {
                let q = g.q(z, y);
                let o = (z * g.h + y) * g.w;
                dst[q..q + g.w].copy_from_slice(&src[o..o + g.w]);
            }
        }
        grad_bias[co] += src.iter().fold(T::zero(), |a, &b| a + b);
    }

    if k == 3 {
        weight_grad::<T, 3>(&gq, &xpad, &g, cin, cout, &taps, grad_weight);
    } else {
        weight_grad::<T, 1>(&gq, &xpad, &g, cin, cout, &taps, grad_weight);
    }

    if !need_input_grad {
        return None;
    }
    // gin_pad[ci][p] = sum_{co, t} w[co][ci][t] * gq[co][p - off_t], read from a
    // copy of gq shifted right by `max_off`.
    let m = g.max_off;
    let out_len = g.padded_len.next_multiple_of(block::<T>());
    let mut gsh = vec![T::zero(); cout * g.stride];
    for co in 0..cout {
        gsh[co * g.stride + m..][..g.blocks_len].copy_from_slice(&gq[co * g.blocks_len..(co + 1) * g.blocks_len]);
    }
    let offs: Vec<usize> = taps.iter().map(|&o| m - o).collect();
    let mut wt = vec![T::zero(); cin.next_multiple_of(ROWS) * cout * kk];
    for co in 0..cout {
        for ci in 0..cin {
            wt[(ci * cout + co) * kk..][..kk].copy_from_slice(&weight[(co * cin + ci) * kk..][..kk]);
        }
    }
    let mut gpad = vec![T::zero(); cin.next_multiple_of(ROWS) * out_len];
    correlate(&gsh, g.stride, cout, &wt, &offs, out_len, &mut gpad);
    let mut gin = Tensor::zeros(x.shape);
    let plane = g.d * g.h * g.w;
    for ci in 0..cin {
        let src = &gpad[ci * out_len..];
        let dst = &mut gin.data[ci * plane..(ci + 1) * plane];
        for z in 0..g.d {
            for y in 0..g.h {
                let t = g.interior(z, y);
                let o = (z * g.h + y) * g.w;
                dst[o..o + g.w].copy_from_slice(&src[t..t + g.w]);
            }
        }
    }
    Some(gin)
}

/// Output extent of a 2-wide stride-2 pool with ceil semantics.
pub fn pooled_extent(n: usize) -> usize {
    n.div_ceil(2)
}

/// 2x2x2 max-pool, stride 2, partial windows kept at odd edges. Returns the
/// pooled tensor and the flat argmax index of every output.
pub fn maxpool_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let [c, d, h, w] = x.shape;
    let (od, oh, ow) = (pooled_extent(d), pooled_extent(h), pooled_extent(w));
    let mut out = Tensor::zeros([c, od, oh, ow]);
    let mut arg = vec![0usize; out.data.len()];
    let mut o = 0;
    for ch in 0..c {
        let base = ch * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut bi = 0;
                    for zz in 2 * z..(2 * z + 2).min(d) {
                        for yy in 2 * y..(2 * y + 2).min(h) {
                            for xx in 2 * xo..(2 * xo + 2).min(w) {
                                let i = base + (zz * h + yy) * w + xx;
                                if x.data[i] > best {
                                    best = x.data[i];
                                    bi = i;
                                }
                            }
                        }
                    }
                    out.data[o] = best;
                    arg[o] = bi;
                    o += 1;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward<T: Scalar>(input_shape: [usize; 4], argmax: &[usize], grad_out: &[T]) -> Tensor<T> {
    let mut g = Tensor::zeros(input_shape);
    for (&i, &v) in argmax.iter().zip(grad_out) {
        g.data[i] += v;
    }
    g
}

/// `y = W x + b` with `W` laid out `[out, in]`.
pub fn dense_forward<T: Scalar>(x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let n = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, &b)| b + dot(&weight[o * n..(o + 1) * n], x))
        .collect()
}

pub fn dense_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    need_input_grad: bool,
) -> Option<Vec<T>> {
    let n = x.len();
    for (o, &g) in grad_out.iter().enumerate() {
        grad_bias[o] += g;
        if g != T::zero() {
            axpy(&mut grad_weight[o * n..(o + 1) * n], g, x);
        }
    }
    need_input_grad.then(|| {
        let mut gx = vec![T::zero(); n];
        for (o, &g) in grad_out.iter().enumerate() {
            if g != T::zero() {
                axpy(&mut gx, g, &weight[o * n..(o + 1) * n]);
            }
        }
        gx
    })
}
