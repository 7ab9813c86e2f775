//! Hot numeric loops: matrix multiply and 3x3 convolution, forward and
//! backward.
//!
//! Each kernel has a sequential implementation and, with the `parallel`
//! feature, a rayon one. The parallel variants split work along disjoint
//! output slices and keep every floating-point reduction in a fixed order,
//! so both paths produce bitwise-identical results; the dispatching wrappers
//! pick the rayon path when it is compiled in and the problem is big enough
//! to amortize the fork/join. The `benches/kernels.rs` suite compares the two
//! paths directly.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work threshold (in multiply-adds) below which forking is a net loss.
#[cfg(feature = "parallel")]
const PAR_MIN_WORK: usize = 1 << 14;

// ── matmul ───────────────────────────────────────────────────────────

fn matmul_row(out_row: &mut [f64], a_row: &[f64], b: &[f64], k: usize, m: usize) {
    for (p, &a_val) in a_row.iter().enumerate().take(k) {
        let b_row = &b[p * m..(p + 1) * m];
        for (o, &b_val) in out_row.iter_mut().zip(b_row) {
            *o += a_val * b_val;
        }
    }
}

/// `a [n,k] * b [k,m] -> [n,m]`, row-major.
pub fn matmul_seq(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for (i, out_row) in out.chunks_mut(m).enumerate() {
        matmul_row(out_row, &a[i * k..(i + 1) * k], b, k, m);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    out.par_chunks_mut(m).enumerate().for_each(|(i, out_row)| {
        matmul_row(out_row, &a[i * k..(i + 1) * k], b, k, m);
    });
    out
}

pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if n > 1 && n * k * m >= PAR_MIN_WORK {
        return matmul_par(a, b, n, k, m);
    }
    matmul_seq(a, b, n, k, m)
}

// ── 3x3 convolution, zero padding 1 ──────────────────────────────────

/// Output spatial extent for kernel 3, padding 1.
pub fn conv_out_extent(h: usize, stride: usize) -> usize {
    (h + 2 - 3) / stride + 1
}

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        conv_out_extent(self.h, self.stride)
    }
    pub fn out_w(&self) -> usize {
        conv_out_extent(self.w, self.stride)
    }
}

fn conv_forward_sample(out: &mut [f64], x: &[f64], w: &[f64], d: &ConvDims) {
    let (oh, ow) = (d.out_h(), d.out_w());
    for co in 0..d.c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..d.c_in {
                    let xc = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
                    let wc = &w[(co * d.c_in + ci) * 9..(co * d.c_in + ci + 1) * 9];
                    for ky in 0..3 {
                        let iy = (oy * d.stride + ky) as isize - 1;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * d.stride + kx) as isize - 1;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            acc += xc[iy as usize * d.w + ix as usize] * wc[ky * 3 + kx];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
}

pub fn conv2d_forward_seq(x: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    let out_sample = d.c_out * d.out_h() * d.out_w();
    let in_sample = d.c_in * d.h * d.w;
    let mut out = vec![0.0; d.n * out_sample];
    for (i, out_s) in out.chunks_mut(out_sample).enumerate() {
        conv_forward_sample(out_s, &x[i * in_sample..(i + 1) * in_sample], w, d);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn conv2d_forward_par(x: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    let out_sample = d.c_out * d.out_h() * d.out_w();
    let in_sample = d.c_in * d.h * d.w;
    let mut out = vec![0.0; d.n * out_sample];
    out.par_chunks_mut(out_sample).enumerate().for_each(|(i, out_s)| {
        conv_forward_sample(out_s, &x[i * in_sample..(i + 1) * in_sample], w, d);
    });
    out
}

fn conv_work(d: &ConvDims) -> usize {
    d.n * d.c_out * d.c_in * d.out_h() * d.out_w() * 9
}

pub fn conv2d_forward(x: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if d.n > 1 && conv_work(d) >= PAR_MIN_WORK {
        return conv2d_forward_par(x, w, d);
    }
    conv2d_forward_seq(x, w, d)
}

fn conv_grad_input_sample(dx: &mut [f64], dout: &[f64], w: &[f64], d: &ConvDims) {
    let (oh, ow) = (d.out_h(), d.out_w());
    for co in 0..d.c_out {
        let dc = &dout[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..d.c_in {
            let wc = &w[(co * d.c_in + ci) * 9..(co * d.c_in + ci + 1) * 9];
            let dxc = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dc[oy * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for ky in 0..3 {
                        let iy = (oy * d.stride + ky) as isize - 1;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * d.stride + kx) as isize - 1;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            dxc[iy as usize * d.w + ix as usize] += g * wc[ky * 3 + kx];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_grad_input_seq(dout: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    let in_sample = d.c_in * d.h * d.w;
    let out_sample = d.c_out * d.out_h() * d.out_w();
    let mut dx = vec![0.0; d.n * in_sample];
    for (i, dx_s) in dx.chunks_mut(in_sample).enumerate() {
        conv_grad_input_sample(dx_s, &dout[i * out_sample..(i + 1) * out_sample], w, d);
    }
    dx
}

#[cfg(feature = "parallel")]
pub fn conv2d_grad_input_par(dout: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    let in_sample = d.c_in * d.h * d.w;
    let out_sample = d.c_out * d.out_h() * d.out_w();
    let mut dx = vec![0.0; d.n * in_sample];
    dx.par_chunks_mut(in_sample).enumerate().for_each(|(i, dx_s)| {
        conv_grad_input_sample(dx_s, &dout[i * out_sample..(i + 1) * out_sample], w, d);
    });
    dx
}

pub fn conv2d_grad_input(dout: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if d.n > 1 && conv_work(d) >= PAR_MIN_WORK {
        return conv2d_grad_input_par(dout, w, d);
    }
    conv2d_grad_input_seq(dout, w, d)
}

/// Weight gradient for one output channel, batch summed in sample order.
fn conv_grad_weight_channel(dw_co: &mut [f64], co: usize, dout: &[f64], x: &[f64], d: &ConvDims) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let in_sample = d.c_in * d.h * d.w;
    let out_sample = d.c_out * oh * ow;
    for i in 0..d.n {
        let xs = &x[i * in_sample..(i + 1) * in_sample];
        let dc = &dout[i * out_sample + co * oh * ow..i * out_sample + (co + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dc[oy * ow + ox];
                if g == 0.0 {
                    continue;
                }
                for ci in 0..d.c_in {
                    let xc = &xs[ci * d.h * d.w..(ci + 1) * d.h * d.w];
                    let wslot = &mut dw_co[ci * 9..(ci + 1) * 9];
                    for ky in 0..3 {
                        let iy = (oy * d.stride + ky) as isize - 1;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * d.stride + kx) as isize - 1;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            wslot[ky * 3 + kx] += g * xc[iy as usize * d.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_grad_weight_seq(dout: &[f64], x: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut dw = vec![0.0; d.c_out * d.c_in * 9];
    for (co, dw_co) in dw.chunks_mut(d.c_in * 9).enumerate() {
        conv_grad_weight_channel(dw_co, co, dout, x, d);
    }
    dw
}

#[cfg(feature = "parallel")]
pub fn conv2d_grad_weight_par(dout: &[f64], x: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut dw = vec![0.0; d.c_out * d.c_in * 9];
    dw.par_chunks_mut(d.c_in * 9).enumerate().for_each(|(co, dw_co)| {
        conv_grad_weight_channel(dw_co, co, dout, x, d);
    });
    dw
}

pub fn conv2d_grad_weight(dout: &[f64], x: &[f64], d: &ConvDims) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if d.c_out > 1 && conv_work(d) >= PAR_MIN_WORK {
        return conv2d_grad_weight_par(dout, x, d);
    }
    conv2d_grad_weight_seq(dout, x, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fill(n: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
        (0..n).map(f).collect()
    }

    #[test]
    fn matmul_small_known() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul_seq(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn conv_stride_extents() {
        assert_eq!(conv_out_extent(16, 1), 16);
        assert_eq!(conv_out_extent(16, 2), 8);
        assert_eq!(conv_out_extent(1, 2), 1);
        assert_eq!(conv_out_extent(5, 2), 3);
    }

    #[test]
    fn conv_identity_kernel() {
        // Center-one kernel at stride 1 reproduces the input plane.
        let d = ConvDims { n: 1, c_in: 1, h: 4, w: 4, c_out: 1, stride: 1 };
        let x = fill(16, |i| i as f64);
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        assert_eq!(conv2d_forward_seq(&x, &w, &d), x);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matches_sequential_bitwise() {
        let d = ConvDims { n: 6, c_in: 3, h: 8, w: 8, c_out: 5, stride: 2 };
        let x = fill(d.n * d.c_in * d.h * d.w, |i| (i as f64 * 0.37).sin());
        let w = fill(d.c_out * d.c_in * 9, |i| (i as f64 * 0.11).cos());
        let fwd_s = conv2d_forward_seq(&x, &w, &d);
        let fwd_p = conv2d_forward_par(&x, &w, &d);
        assert_eq!(fwd_s, fwd_p);

        let dout = fill(fwd_s.len(), |i| (i as f64 * 0.05).sin());
        assert_eq!(conv2d_grad_input_seq(&dout, &w, &d), conv2d_grad_input_par(&dout, &w, &d));
        assert_eq!(conv2d_grad_weight_seq(&dout, &x, &d), conv2d_grad_weight_par(&dout, &x, &d));

        let a = fill(64 * 48, |i| (i as f64 * 0.013).sin());
        let b = fill(48 * 32, |i| (i as f64 * 0.029).cos());
        assert_eq!(matmul_seq(&a, &b, 64, 48, 32), matmul_par(&a, &b, 64, 48, 32));
    }
}
