//! Forward and backward kernels for the primitive operations.
//!
//! Signal tensors keep the SNN time axis innermost: `(batch, H, W, C, S)`.
//! Convolutions and linear layers act on every time step independently.
//! Internally the operands are transposed to time-major channel blocks so
//! a whole layer is one GEMM with `rows * S` rows, fed by an im2col buffer
//! that is built in cache-sized chunks of output rows.

use crate::error::{Error, Result};
use crate::tensor::Element;

/// Stride and zero padding of a square 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const SAME3: ConvGeometry = ConvGeometry {
        stride: 1,
        padding: 1,
    };
    pub const POINTWISE: ConvGeometry = ConvGeometry {
        stride: 1,
        padding: 0,
    };
}

/// Resolved extents of one convolution call.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub steps: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub geom: ConvGeometry,
}

impl ConvDims {
    pub fn resolve(input: &[usize], weight: &[usize], geom: ConvGeometry) -> Result<Self> {
        if input.len() != 5 || weight.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "expected input (B,H,W,C,S) and weight (Co,KH,KW,Ci), got {:?} and {:?}",
                    input, weight
                ),
            ));
        }
        let (batch, h, w, cin, steps) = (input[0], input[1], input[2], input[3], input[4]);
        let (cout, kh, kw, wcin) = (weight[0], weight[1], weight[2], weight[3]);
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, weight expects {}", cin, wcin),
            ));
        }
        if geom.stride == 0 {
            return Err(Error::shape("conv2d", "stride 0"));
        }
        if h + 2 * geom.padding < kh || w + 2 * geom.padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {}x{} larger than padded input {}x{}", kh, kw, h, w),
            ));
        }
        let ho = (h + 2 * geom.padding - kh) / geom.stride + 1;
        let wo = (w + 2 * geom.padding - kw) / geom.stride + 1;
        Ok(ConvDims {
            batch,
            h,
            w,
            cin,
            steps,
            cout,
            kh,
            kw,
            ho,
            wo,
            geom,
        })
    }

    pub fn rows(&self) -> usize {
        self.batch * self.ho * self.wo
    }

    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.ho, self.wo, self.cout, self.steps]
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.geom == ConvGeometry::POINTWISE
    }

    /// Input row/column feeding output `(oy, ox)` through tap `(ky, kx)`.
    #[inline]
    pub fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.geom.stride + ky).checked_sub(self.geom.padding)?;
        let ix = (ox * self.geom.stride + kx).checked_sub(self.geom.padding)?;
        (iy < self.h && ix < self.w).then_some((iy, ix))
    }
}

/// `(rows, C, S)` -> `(rows, S, C)`.
fn to_time_major<F: Element>(x: &[F], rows: usize, c: usize, s: usize) -> Vec<F> {
    if s == 1 {
        return x.to_vec();
    }
    let mut out = vec![F::zero(); x.len()];
    for r in 0..rows {
        let src = &x[r * c * s..(r + 1) * c * s];
        let dst = &mut out[r * c * s..(r + 1) * c * s];
        for ci in 0..c {
            for si in 0..s {
                dst[si * c + ci] = src[ci * s + si];
            }
        }
    }
    out
}

/// `(rows, S, C)` -> `(rows, C, S)`.
fn from_time_major<F: Element>(x: &[F], rows: usize, c: usize, s: usize) -> Vec<F> {
    if s == 1 {
        return x.to_vec();
    }
    let mut out = vec![F::zero(); x.len()];
    for r in 0..rows {
        let src = &x[r * c * s..(r + 1) * c * s];
        let dst = &mut out[r * c * s..(r + 1) * c * s];
        for si in 0..s {
            for ci in 0..c {
                dst[ci * s + si] = src[si * c + ci];
            }
        }
    }
    out
}

/// Bounds-checked `C = A B + beta C` with `C` row-major of row stride `n`.
///
/// `A` is `m x k` with strides `(rsa, csa)`, `B` is `k x n` with strides
/// `(rsb, csb)`.
#[allow(clippy::too_many_arguments)]
fn gemm<F: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    (rsa, csa): (usize, usize),
    b: &[F],
    (rsb, csb): (usize, usize),
    beta: F,
    c: &mut [F],
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(c.len() >= m * n);
    if k > 0 {
        assert!(a.len() > last(m, k, rsa, csa) && b.len() > last(k, n, rsb, csb));
    }
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is uniquely borrowed.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output rows per im2col chunk, sized so a chunk stays cache resident.
fn chunk_rows(d: &ConvDims) -> usize {
    ((1 << 17) / (d.steps * d.patch()).max(1)).max(1)
}

/// Patch matrix for output rows `r0..r1` from a time-major input
/// `(B, H, W, S, C)`, laid out as `(row, S, KH, KW, C)`.
fn im2col_chunk<F: Element>(xt: &[F], d: &ConvDims, r0: usize, r1: usize, col: &mut Vec<F>) {
    let (s, c, patch) = (d.steps, d.cin, d.patch());
    col.clear();
    col.resize((r1 - r0) * s * patch, F::zero());
    for r in r0..r1 {
        let (b, rem) = (r / (d.ho * d.wo), r % (d.ho * d.wo));
        let (oy, ox) = (rem / d.wo, rem % d.wo);
        let dst_row = (r - r0) * s * patch;
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let Some((iy, ix)) = d.source(oy, ox, ky, kx) else { continue };
                let src = ((b * d.h + iy) * d.w + ix) * s * c;
                let tap = (ky * d.kw + kx) * c;
                for si in 0..s {
                    let dst = dst_row + si * patch + tap;
                    col[dst..dst + c].copy_from_slice(&xt[src + si * c..src + (si + 1) * c]);
                }
            }
        }
    }
}

/// Scatter-adds a patch-matrix chunk back onto a time-major input gradient.
fn col2im_chunk<F: Element>(col: &[F], d: &ConvDims, r0: usize, r1: usize, dxt: &mut [F]) {
    let (s, c, patch) = (d.steps, d.cin, d.patch());
    for r in r0..r1 {
        let (b, rem) = (r / (d.ho * d.wo), r % (d.ho * d.wo));
        let (oy, ox) = (rem / d.wo, rem % d.wo);
        let src_row = (r - r0) * s * patch;
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let Some((iy, ix)) = d.source(oy, ox, ky, kx) else { continue };
                let dst = ((b * d.h + iy) * d.w + ix) * s * c;
                let tap = (ky * d.kw + kx) * c;
                for si in 0..s {
                    let src = src_row + si * patch + tap;
                    for (o, &g) in dxt[dst + si * c..dst + (si + 1) * c].iter_mut().zip(&col[src..src + c]) {
                        *o = *o + g;
                    }
                }
            }
        }
    }
}

/// Adds `bias[n]` to every `(row, n, s)` element.
fn add_bias<F: Element>(out: &mut [F], bias: &[F], steps: usize) {
    let n = bias.len();
    for chunk in out.chunks_mut(n * steps) {
        for (c, &b) in bias.iter().enumerate() {
            for v in &mut chunk[c * steps..(c + 1) * steps] {
                *v = *v + b;
            }
        }
    }
}

/// Sums `(row, n, s)` over rows and steps.
fn bias_grad<F: Element>(g: &[F], n: usize, steps: usize) -> Vec<F> {
    let mut db = vec![F::zero(); n];
    for chunk in g.chunks(n * steps) {
        for (c, d) in db.iter_mut().enumerate() {
            for &v in &chunk[c * steps..(c + 1) * steps] {
                *d = *d + v;
            }
        }
    }
    db
}

pub fn conv2d_forward<F: Element>(
    input: &[F],
    weight: &[F],
    bias: Option<&[F]>,
    d: &ConvDims,
) -> Vec<F> {
    let (s, patch, cout) = (d.steps, d.patch(), d.cout);
    let xt = to_time_major(input, d.batch * d.h * d.w, d.cin, s);
    let mut out_t = vec![F::zero(); d.rows() * s * cout];
    if d.is_pointwise() {
        gemm(d.rows() * s, patch, cout, &xt, (patch, 1), weight, (1, patch), F::zero(), &mut out_t);
    } else {
        let step = chunk_rows(d);
        let mut col = Vec::new();
        for r0 in (0..d.rows()).step_by(step) {
            let r1 = (r0 + step).min(d.rows());
            im2col_chunk(&xt, d, r0, r1, &mut col);
            gemm(
                (r1 - r0) * s,
                patch,
                cout,
                &col,
                (patch, 1),
                weight,
                (1, patch),
                F::zero(),
                &mut out_t[r0 * s * cout..r1 * s * cout],
            );
        }
    }
    let mut out = from_time_major(&out_t, d.rows(), cout, s);
    if let Some(b) = bias {
        add_bias(&mut out, b, s);
    }
    out
}

/// Returns `(d_input, d_weight, d_bias)`; `d_input` only when `need_input`.
pub fn conv2d_backward<F: Element>(
    input: &[F],
    weight: &[F],
    grad_out: &[F],
    d: &ConvDims,
    need_input: bool,
) -> (Option<Vec<F>>, Vec<F>, Vec<F>) {
    let (s, patch, cout) = (d.steps, d.patch(), d.cout);
    let db = bias_grad(grad_out, cout, s);
    let gt = to_time_major(grad_out, d.rows(), cout, s);
    let xt = to_time_major(input, d.batch * d.h * d.w, d.cin, s);
    let mut dw = vec![F::zero(); weight.len()];
    if d.is_pointwise() {
        let m = d.rows() * s;
        gemm(cout, m, patch, &gt, (1, cout), &xt, (patch, 1), F::zero(), &mut dw);
        let dx = need_input.then(|| {
            let mut dxt = vec![F::zero(); input.len()];
            gemm(m, cout, patch, &gt, (cout, 1), weight, (patch, 1), F::zero(), &mut dxt);
            from_time_major(&dxt, d.rows(), d.cin, s)
        });
        return (dx, dw, db);
    }
    let mut dxt = if need_input { vec![F::zero(); input.len()] } else { Vec::new() };
    let step = chunk_rows(d);
    let mut col = Vec::new();
    let mut dcol = Vec::new();
    for r0 in (0..d.rows()).step_by(step) {
        let r1 = (r0 + step).min(d.rows());
        let m = (r1 - r0) * s;
        let g = &gt[r0 * s * cout..r1 * s * cout];
        im2col_chunk(&xt, d, r0, r1, &mut col);
        gemm(cout, m, patch, g, (1, cout), &col, (patch, 1), F::one(), &mut dw);
        if need_input {
            dcol.resize(m * patch, F::zero());
            gemm(m, cout, patch, g, (cout, 1), weight, (patch, 1), F::zero(), &mut dcol);
            col2im_chunk(&dcol, d, r0, r1, &mut dxt);
        }
    }
    let dx = need_input.then(|| from_time_major(&dxt, d.batch * d.h * d.w, d.cin, s));
    (dx, dw, db)
}

/// Linear layer over `(N, Din, S)` with weight `(Dout, Din)`.
pub fn linear_forward<F: Element>(
    input: &[F],
    weight: &[F],
    bias: Option<&[F]>,
    rows: usize,
    din: usize,
    dout: usize,
    steps: usize,
) -> Vec<F> {
    let xt = to_time_major(input, rows, din, steps);
    let mut out_t = vec![F::zero(); rows * dout * steps];
    gemm(rows * steps, din, dout, &xt, (din, 1), weight, (1, din), F::zero(), &mut out_t);
    let mut out = from_time_major(&out_t, rows, dout, steps);
    if let Some(b) = bias {
        add_bias(&mut out, b, steps);
    }
    out
}

pub fn linear_backward<F: Element>(
    input: &[F],
    weight: &[F],
    grad_out: &[F],
    rows: usize,
    din: usize,
    dout: usize,
    steps: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let m = rows * steps;
    let gt = to_time_major(grad_out, rows, dout, steps);
    let xt = to_time_major(input, rows, din, steps);
    let mut dxt = vec![F::zero(); input.len()];
    let mut dw = vec![F::zero(); weight.len()];
    gemm(m, dout, din, &gt, (dout, 1), weight, (din, 1), F::zero(), &mut dxt);
    gemm(dout, m, din, &gt, (1, dout), &xt, (din, 1), F::zero(), &mut dw);
    (from_time_major(&dxt, rows, din, steps), dw, bias_grad(grad_out, dout, steps))
}

/// 2x2 average pooling with stride 2 on `(B, H, W, C, S)`.
pub fn avgpool2x2_forward<F: Element>(input: &[F], shape: &[usize]) -> Vec<F> {
    let (b, h, w, blk) = (shape[0], shape[1], shape[2], shape[3] * shape[4]);
    let (ho, wo) = (h / 2, w / 2);
    let quarter = F::from_f64(0.25);
    let mut out = vec![F::zero(); b * ho * wo * blk];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let dst = ((bi * ho + oy) * wo + ox) * blk;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src = ((bi * h + 2 * oy + dy) * w + 2 * ox + dx) * blk;
                    for i in 0..blk {
                        out[dst + i] = out[dst + i] + input[src + i];
                    }
                }
                for v in &mut out[dst..dst + blk] {
                    *v = *v * quarter;
                }
            }
        }
    }
    out
}

pub fn avgpool2x2_backward<F: Element>(grad_out: &[F], in_shape: &[usize]) -> Vec<F> {
    let (b, h, w, blk) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3] * in_shape[4]);
    let (ho, wo) = (h / 2, w / 2);
    let quarter = F::from_f64(0.25);
    let mut dx = vec![F::zero(); b * h * w * blk];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let src = ((bi * ho + y / 2) * wo + x / 2) * blk;
                let dst = ((bi * h + y) * w + x) * blk;
                for i in 0..blk {
                    dx[dst + i] = grad_out[src + i] * quarter;
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling on `(B, H, W, C, S)`.
pub fn upsample2x_forward<F: Element>(input: &[F], shape: &[usize]) -> Vec<F> {
    let (b, h, w, blk) = (shape[0], shape[1], shape[2], shape[3] * shape[4]);
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![F::zero(); b * ho * wo * blk];
    for bi in 0..b {
        for y in 0..ho {
            for x in 0..wo {
                let src = ((bi * h + y / 2) * w + x / 2) * blk;
                let dst = ((bi * ho + y) * wo + x) * blk;
                out[dst..dst + blk].copy_from_slice(&input[src..src + blk]);
            }
        }
    }
    out
}

pub fn upsample2x_backward<F: Element>(grad_out: &[F], in_shape: &[usize]) -> Vec<F> {
    let (b, h, w, blk) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3] * in_shape[4]);
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![F::zero(); b * h * w * blk];
    for bi in 0..b {
        for y in 0..ho {
            for x in 0..wo {
                let src = ((bi * ho + y) * wo + x) * blk;
                let dst = ((bi * h + y / 2) * w + x / 2) * blk;
                for i in 0..blk {
                    dx[dst + i] = dx[dst + i] + grad_out[src + i];
                }
            }
        }
    }
    dx
}

/// Splits a shape into `(outer, channels, steps)` around the channel axis
/// (second to last).
pub fn channel_split(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(
            "channel axis",
            format!("rank {} has no channel axis", shape.len()),
        ));
    }
    let r = shape.len();
    Ok((shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1]))
}

/// Per-channel statistics over all non-channel axes (biased variance).
pub fn channel_moments<F: Element>(x: &[F], outer: usize, c: usize, s: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (outer * s) as f64;
    let mut mean = vec![0.0; c];
    for o in 0..outer {
        for (ch, m) in mean.iter_mut().enumerate() {
            let base = (o * c + ch) * s;
            for &v in &x[base..base + s] {
                *m += v.to_f64();
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; c];
    for o in 0..outer {
        for (ch, v) in var.iter_mut().enumerate() {
            let base = (o * c + ch) * s;
            for &e in &x[base..base + s] {
                let d = e.to_f64() - mean[ch];
                *v += d * d;
            }
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(input: &[f64], weight: &[f64], d: &ConvDims) -> Vec<f64> {
        let mut out = vec![0.0; d.rows() * d.cout * d.steps];
        for b in 0..d.batch {
            for oy in 0..d.ho {
                for ox in 0..d.wo {
                    for co in 0..d.cout {
                        for s in 0..d.steps {
                            let mut acc = 0.0;
                            for ky in 0..d.kh {
                                for kx in 0..d.kw {
                                    let Some((iy, ix)) = d.source(oy, ox, ky, kx) else {
                                        continue;
                                    };
                                    for ci in 0..d.cin {
                                        let x = input[(((b * d.h + iy) * d.w + ix) * d.cin + ci)
                                            * d.steps
                                            + s];
                                        let w = weight[((co * d.kh + ky) * d.kw + kx) * d.cin + ci];
                                        acc += x * w;
                                    }
                                }
                            }
                            out[(((b * d.ho + oy) * d.wo + ox) * d.cout + co) * d.steps + s] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn gemm_conv_matches_direct_loops() {
        for (k, geom) in [
            (3, ConvGeometry::SAME3),
            (1, ConvGeometry::POINTWISE),
            (3, ConvGeometry { stride: 2, padding: 1 }),
            (2, ConvGeometry { stride: 2, padding: 0 }),
        ] {
            let d = ConvDims::resolve(&[2, 5, 6, 3, 2], &[4, k, k, 3], geom).unwrap();
            let input: Vec<f64> = (0..2 * 5 * 6 * 3 * 2).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let weight: Vec<f64> = (0..4 * k * k * 3).map(|i| ((i * 13 % 7) as f64) * 0.1).collect();
            let fast = conv2d_forward(&input, &weight, None, &d);
            let slow = direct_conv(&input, &weight, &d);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b} for k={k} {geom:?}");
            }
        }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn pseudo(n: usize, k: usize) -> Vec<f64> {
        (0..n).map(|i| (((i * k + 3) * 2654435761 % 1000) as f64) / 500.0 - 1.0).collect()
    }

    #[test]
    fn conv_backward_is_the_adjoint() {
        for (k, geom) in [
            (3, ConvGeometry::SAME3),
            (1, ConvGeometry::POINTWISE),
            (3, ConvGeometry { stride: 2, padding: 1 }),
        ] {
            let d = ConvDims::resolve(&[2, 5, 6, 3, 2], &[4, k, k, 3], geom).unwrap();
            let nx = 2 * 5 * 6 * 3 * 2;
            let nw = 4 * k * k * 3;
            let (x, x2) = (pseudo(nx, 7), pseudo(nx, 11));
            let (w, w2) = (pseudo(nw, 13), pseudo(nw, 17));
            let g = pseudo(d.rows() * d.cout * d.steps, 19);
            let (dx, dw, db) = conv2d_backward(&x, &w, &g, &d, true);
            let dx = dx.unwrap();
            let lhs = dot(&dx, &x2);
            let rhs = dot(&g, &direct_conv(&x2, &w, &d));
            assert!((lhs - rhs).abs() < 1e-9, "dx {lhs} vs {rhs}");
            let lhs = dot(&dw, &w2);
            let rhs = dot(&g, &direct_conv(&x, &w2, &d));
            assert!((lhs - rhs).abs() < 1e-9, "dw {lhs} vs {rhs}");
            let expect_db: Vec<f64> = (0..4)
                .map(|c| g.chunks(2).enumerate().filter(|(i, _)| i % 4 == c).flat_map(|(_, v)| v).sum())
                .collect();
            for (a, b) in db.iter().zip(&expect_db) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!(conv2d_backward(&x, &w, &g, &d, false).0.is_none());
        }
    }

    #[test]
    fn linear_matches_direct_sum() {
        let (rows, din, dout, s) = (3, 5, 2, 3);
        let x = pseudo(rows * din * s, 5);
        let w = pseudo(dout * din, 9);
        let y = linear_forward(&x, &w, None, rows, din, dout, s);
        for r in 0..rows {
            for o in 0..dout {
                for t in 0..s {
                    let e: f64 = (0..din).map(|i| w[o * din + i] * x[(r * din + i) * s + t]).sum();
                    assert!((y[(r * dout + o) * s + t] - e).abs() < 1e-12);
                }
            }
        }
        let g = pseudo(rows * dout * s, 3);
        let (dx, dw, _) = linear_backward(&x, &w, &g, rows, din, dout, s);
        let x2 = pseudo(x.len(), 21);
        let w2 = pseudo(w.len(), 23);
        assert!((dot(&dx, &x2) - dot(&g, &linear_forward(&x2, &w, None, rows, din, dout, s))).abs() < 1e-9);
        assert!((dot(&dw, &w2) - dot(&g, &linear_forward(&x, &w2, None, rows, din, dout, s))).abs() < 1e-9);
    }

    #[test]
    fn shape_rule_rejects_channel_mismatch() {
        let err = ConvDims::resolve(&[1, 4, 4, 3, 1], &[2, 3, 3, 2], ConvGeometry::SAME3).unwrap_err();
        assert!(err.to_string().contains("conv2d"));
    }
}
