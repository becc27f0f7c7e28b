//! Pure array kernels for the spatial ops: forward passes and their adjoints.
//!
//! Every kernel computes each output element as a sequential reduction in a
//! fixed order, so results are bitwise independent of how the outer loops are
//! split across threads.

use rayon::prelude::*;

/// Geometry of a 2-d convolution. `h_out`/`w_out` are derived by the caller.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// Inclusive output-index range `[lo, hi]` such that `q*stride + off` stays
/// inside `[0, extent_in)`. Empty ranges return `(1, 0)`.
fn valid_range(extent_out: usize, extent_in: usize, stride: usize, off: i64) -> (usize, usize) {
    let s = stride as i64;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi_num = extent_in as i64 - 1 - off;
    if hi_num < 0 {
        return (1, 0);
    }
    let hi = (hi_num / s).min(extent_out as i64 - 1);
    if lo > hi {
        (1, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

fn for_each_plane(out: &mut [f64], plane_len: usize, f: impl Fn(usize, &mut [f64]) + Sync) {
    debug_assert_eq!(out.len() % plane_len.max(1), 0);
    // Parallelism only pays off once planes carry real work.
    if out.len() >= 1 << 14 {
        out.par_chunks_exact_mut(plane_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
    } else {
        for (i, chunk) in out.chunks_exact_mut(plane_len).enumerate() {
            f(i, chunk);
        }
    }
}

/// y[n,k,oh,ow] = bias[k] + sum_{c,i,j} x[n,c,oh*s+i-p, ow*s+j-p] * w[k,c,i,j]
pub fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.c_out * g.h_out * g.w_out];
    let plane = g.h_out * g.w_out;
    for_each_plane(&mut out, plane, |pi, acc| {
        let n = pi / g.c_out;
        let k = pi % g.c_out;
        if let Some(b) = bias {
            acc.fill(b[k]);
        }
        for c in 0..g.c_in {
            let x_plane = &x[(n * g.c_in + c) * g.h_in * g.w_in..][..g.h_in * g.w_in];
            let w_plane = &w[(k * g.c_in + c) * g.kh * g.kw..][..g.kh * g.kw];
            for i in 0..g.kh {
                let off_h = i as i64 - g.pad as i64;
                let (oh_lo, oh_hi) = valid_range(g.h_out, g.h_in, g.stride, off_h);
                for j in 0..g.kw {
                    let wv = w_plane[i * g.kw + j];
                    if wv == 0.0 {
                        continue;
                    }
                    let off_w = j as i64 - g.pad as i64;
                    let (ow_lo, ow_hi) = valid_range(g.w_out, g.w_in, g.stride, off_w);
                    if ow_lo > ow_hi {
                        continue;
                    }
                    for oh in oh_lo..=oh_hi {
                        let ih = (oh * g.stride) as i64 + off_h;
                        let x_row = &x_plane[ih as usize * g.w_in..][..g.w_in];
                        let acc_row = &mut acc[oh * g.w_out..][..g.w_out];
                        if g.stride == 1 {
                            // contiguous: vectorizable axpy
                            let src = &x_row[(ow_lo as i64 + off_w) as usize..][..ow_hi - ow_lo + 1];
                            let dst = &mut acc_row[ow_lo..=ow_hi];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        } else {
                            let mut iw = (ow_lo * g.stride) as i64 + off_w;
                            for ow in ow_lo..=ow_hi {
                                acc_row[ow] += wv * x_row[iw as usize];
                                iw += g.stride as i64;
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// dx adjoint of `conv2d_forward` w.r.t. its input.
pub fn conv2d_backward_input(gy: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut dx = vec![0.0; g.n * g.c_in * g.h_in * g.w_in];
    let plane = g.h_in * g.w_in;
    for_each_plane(&mut dx, plane, |pi, acc| {
        let n = pi / g.c_in;
        let c = pi % g.c_in;
        for k in 0..g.c_out {
            let g_plane = &gy[(n * g.c_out + k) * g.h_out * g.w_out..][..g.h_out * g.w_out];
            let w_plane = &w[(k * g.c_in + c) * g.kh * g.kw..][..g.kh * g.kw];
            for i in 0..g.kh {
                let off_h = i as i64 - g.pad as i64;
                let (oh_lo, oh_hi) = valid_range(g.h_out, g.h_in, g.stride, off_h);
                for j in 0..g.kw {
                    let wv = w_plane[i * g.kw + j];
                    if wv == 0.0 {
                        continue;
                    }
                    let off_w = j as i64 - g.pad as i64;
                    let (ow_lo, ow_hi) = valid_range(g.w_out, g.w_in, g.stride, off_w);
                    if ow_lo > ow_hi {
                        continue;
                    }
                    for oh in oh_lo..=oh_hi {
                        let ih = ((oh * g.stride) as i64 + off_h) as usize;
                        let g_row = &g_plane[oh * g.w_out..][..g.w_out];
                        let acc_row = &mut acc[ih * g.w_in..][..g.w_in];
                        if g.stride == 1 {
                            let src = &g_row[ow_lo..=ow_hi];
                            let dst =
                                &mut acc_row[(ow_lo as i64 + off_w) as usize..][..ow_hi - ow_lo + 1];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        } else {
                            let mut iw = (ow_lo * g.stride) as i64 + off_w;
                            for ow in ow_lo..=ow_hi {
                                acc_row[iw as usize] += wv * g_row[ow];
                                iw += g.stride as i64;
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

/// dw adjoint of `conv2d_forward` w.r.t. its weight.
pub fn conv2d_backward_weight(gy: &[f64], x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut dw = vec![0.0; g.c_out * g.c_in * g.kh * g.kw];
    let plane = g.c_in * g.kh * g.kw;
    for_each_plane(&mut dw, plane, |k, acc| {
        for n in 0..g.n {
            let g_plane = &gy[(n * g.c_out + k) * g.h_out * g.w_out..][..g.h_out * g.w_out];
            for c in 0..g.c_in {
                let x_plane = &x[(n * g.c_in + c) * g.h_in * g.w_in..][..g.h_in * g.w_in];
                for i in 0..g.kh {
                    let off_h = i as i64 - g.pad as i64;
                    let (oh_lo, oh_hi) = valid_range(g.h_out, g.h_in, g.stride, off_h);
                    for j in 0..g.kw {
                        let off_w = j as i64 - g.pad as i64;
                        let (ow_lo, ow_hi) = valid_range(g.w_out, g.w_in, g.stride, off_w);
                        if ow_lo > ow_hi {
                            continue;
                        }
                        let mut sum = 0.0;
                        for oh in oh_lo..=oh_hi {
                            let ih = ((oh * g.stride) as i64 + off_h) as usize;
                            let g_row = &g_plane[oh * g.w_out..][..g.w_out];
                            let x_row = &x_plane[ih * g.w_in..][..g.w_in];
                            if g.stride == 1 {
                                let xs = &x_row[(ow_lo as i64 + off_w) as usize..][..ow_hi - ow_lo + 1];
                                sum += g_row[ow_lo..=ow_hi]
                                    .iter()
                                    .zip(xs)
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            } else {
                                let mut iw = (ow_lo * g.stride) as i64 + off_w;
                                for ow in ow_lo..=ow_hi {
                                    sum += g_row[ow] * x_row[iw as usize];
                                    iw += g.stride as i64;
                                }
                            }
                        }
                        acc[c * g.kh * g.kw + i * g.kw + j] += sum;
                    }
                }
            }
        }
    });
    dw
}

/// db[k] = sum over batch and spatial positions of gy.
pub fn conv2d_backward_bias(gy: &[f64], n: usize, c_out: usize, plane: usize) -> Vec<f64> {
    let mut db = vec![0.0; c_out];
    for ni in 0..n {
        for k in 0..c_out {
            let p = &gy[(ni * c_out + k) * plane..][..plane];
            db[k] += p.iter().sum::<f64>();
        }
    }
    db
}

/// Geometry of a transposed convolution; weight layout is (c_in, c_out, kh, kw).
#[derive(Debug, Clone, Copy)]
pub struct ConvTGeom {
    pub n: usize,
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvTGeom {
    /// The equivalent forward-conv geometry mapping output back to input.
    fn as_conv(&self) -> ConvGeom {
        ConvGeom {
            n: self.n,
            c_in: self.c_out,
            h_in: self.h_out,
            w_in: self.w_out,
            c_out: self.c_in,
            kh: self.kh,
            kw: self.kw,
            stride: self.stride,
            pad: self.pad,
            h_out: self.h_in,
            w_out: self.w_in,
        }
    }
}

/// y[n,o, h*s+i-p, w*s+j-p] += x[n,c,h,w] * wt[c,o,i,j], plus bias.
pub fn conv_transpose2d_forward(
    x: &[f64],
    wt: &[f64],
    bias: Option<&[f64]>,
    g: &ConvTGeom,
) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.c_out * g.h_out * g.w_out];
    let plane = g.h_out * g.w_out;
    for_each_plane(&mut out, plane, |pi, acc| {
        let n = pi / g.c_out;
        let o = pi % g.c_out;
        if let Some(b) = bias {
            acc.fill(b[o]);
        }
        for c in 0..g.c_in {
            let x_plane = &x[(n * g.c_in + c) * g.h_in * g.w_in..][..g.h_in * g.w_in];
            let w_plane = &wt[(c * g.c_out + o) * g.kh * g.kw..][..g.kh * g.kw];
            for i in 0..g.kh {
                let off_h = i as i64 - g.pad as i64;
                let (h_lo, h_hi) = valid_range(g.h_in, g.h_out, g.stride, off_h);
                for j in 0..g.kw {
                    let wv = w_plane[i * g.kw + j];
                    if wv == 0.0 {
                        continue;
                    }
                    let off_w = j as i64 - g.pad as i64;
                    let (w_lo, w_hi) = valid_range(g.w_in, g.w_out, g.stride, off_w);
                    if w_lo > w_hi {
                        continue;
                    }
                    for h in h_lo..=h_hi {
                        let oh = ((h * g.stride) as i64 + off_h) as usize;
                        let x_row = &x_plane[h * g.w_in..][..g.w_in];
                        let acc_row = &mut acc[oh * g.w_out..][..g.w_out];
                        let mut ow = (w_lo * g.stride) as i64 + off_w;
                        for wi in w_lo..=w_hi {
                            acc_row[ow as usize] += wv * x_row[wi];
                            ow += g.stride as i64;
                        }
                    }
                }
            }
        }
    });
    out
}

/// dx adjoint of `conv_transpose2d_forward`: an ordinary convolution of gy.
pub fn conv_transpose2d_backward_input(gy: &[f64], wt: &[f64], g: &ConvTGeom) -> Vec<f64> {
    // Roles swap exactly: gy convolved with wt (viewed as (c_in→K, c_out→C))
    // yields dx with c_in channels at (h_in, w_in).
    conv2d_forward(gy, wt, None, &g.as_conv())
}

/// dw adjoint of `conv_transpose2d_forward` w.r.t. the weight.
pub fn conv_transpose2d_backward_weight(gy: &[f64], x: &[f64], g: &ConvTGeom) -> Vec<f64> {
    let mut dw = vec![0.0; g.c_in * g.c_out * g.kh * g.kw];
    let plane = g.c_out * g.kh * g.kw;
    for_each_plane(&mut dw, plane, |c, acc| {
        for n in 0..g.n {
            let x_plane = &x[(n * g.c_in + c) * g.h_in * g.w_in..][..g.h_in * g.w_in];
            for o in 0..g.c_out {
                let g_plane = &gy[(n * g.c_out + o) * g.h_out * g.w_out..][..g.h_out * g.w_out];
                for i in 0..g.kh {
                    let off_h = i as i64 - g.pad as i64;
                    let (h_lo, h_hi) = valid_range(g.h_in, g.h_out, g.stride, off_h);
                    for j in 0..g.kw {
                        let off_w = j as i64 - g.pad as i64;
                        let (w_lo, w_hi) = valid_range(g.w_in, g.w_out, g.stride, off_w);
                        if w_lo > w_hi {
                            continue;
                        }
                        let mut sum = 0.0;
                        for h in h_lo..=h_hi {
                            let oh = ((h * g.stride) as i64 + off_h) as usize;
                            let x_row = &x_plane[h * g.w_in..][..g.w_in];
                            let g_row = &g_plane[oh * g.w_out..][..g.w_out];
                            let mut ow = (w_lo * g.stride) as i64 + off_w;
                            for wi in w_lo..=w_hi {
                                sum += x_row[wi] * g_row[ow as usize];
                                ow += g.stride as i64;
                            }
                        }
                        acc[o * g.kh * g.kw + i * g.kw + j] += sum;
                    }
                }
            }
        }
    });
    dw
}

/// C[m,n] = sum_l A[m,l] * B[l,n], row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let run = |rows: &mut [f64], i0: usize| {
        for (di, row) in rows.chunks_exact_mut(n).enumerate() {
            let i = i0 + di;
            for l in 0..k {
                let av = a[i * k + l];
                if av == 0.0 {
                    continue;
                }
                let b_row = &b[l * n..][..n];
                for (o, bv) in row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    };
    if m * k * n >= 1 << 16 && m > 1 {
        let chunk = m.div_ceil(rayon::current_num_threads().max(1));
        out.par_chunks_mut(chunk * n)
            .enumerate()
            .for_each(|(ci, rows)| run(rows, ci * chunk));
    } else {
        run(&mut out, 0);
    }
    out
}
