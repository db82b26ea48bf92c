use rayon::prelude::*;

use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Convolution weights plus geometry.
///
/// The kernel is stored as `(dim0, dim1, k_h, k_w)`. [`conv2d`] reads it as
/// `(C_out, C_in / groups, k_h, k_w)`; [`conv_transpose2d`] applies the adjoint
/// of that same map, so it consumes `dim0` channels and produces
/// `dim1 * groups` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub kernel: Tensor,
    pub bias: Option<Vec<f64>>,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub groups: usize,
    pub tie_group: Option<String>,
}

impl ConvParams {
    pub fn new(kernel: Tensor, bias: Option<Vec<f64>>, stride: usize, pad: usize) -> Self {
        ConvParams {
            kernel,
            bias,
            stride: (stride, stride),
            pad: (pad, pad),
            groups: 1,
            tie_group: None,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        let s = self.kernel.shape();
        (s.h, s.w)
    }

    /// Channels consumed by [`conv2d`].
    pub fn in_channels(&self) -> usize {
        self.kernel.shape().c * self.groups
    }

    /// Channels produced by [`conv2d`].
    pub fn out_channels(&self) -> usize {
        self.kernel.shape().n
    }

    fn validate(&self) -> Result<()> {
        let ks = self.kernel.shape();
        if self.groups == 0 || ks.n % self.groups != 0 {
            return Err(Error::dim(format!(
                "kernel dim0 {} not divisible by groups {}",
                ks.n, self.groups
            )));
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::geometry("stride must be at least 1"));
        }
        Ok(())
    }
}

/// Gradients of a convolution with respect to its input, kernel and bias.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Option<Vec<f64>>,
}

fn out_dim(size: usize, k: usize, s: usize, p: usize, axis: &str) -> Result<usize> {
    let padded = size + 2 * p;
    if padded < k {
        return Err(Error::geometry(format!(
            "{axis}: kernel {k} larger than padded input {padded}"
        )));
    }
    if (padded - k) % s != 0 {
        return Err(Error::geometry(format!(
            "{axis}: ({size} + 2*{p} - {k}) / {s} is not integral"
        )));
    }
    Ok((padded - k) / s + 1)
}

struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }
}

/// Unfolds `x` (`c*h*w`) into `(c*kh*kw) x (ho*wo)` patches.
fn im2col(x: &[f64], g: &Geom, cols: &mut [f64]) {
    let hw_out = g.cols();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * hw_out;
                for oy in 0..g.ho {
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patches back, accumulating into `x`.
fn col2im(cols: &[f64], g: &Geom, x: &mut [f64]) {
    let hw_out = g.cols();
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * hw_out;
                for oy in 0..g.ho {
                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c = op(a) * op(b) + beta * c` with `op(a)` of size `m x k` and `op(b)` of size `k x n`,
/// all row-major. A transposed operand is stored in its untransposed layout.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above guarantee every strided access stays inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

/// Per-group slices into the kernel: `(dim0 / groups) x (dim1 * kh * kw)` blocks.
fn kernel_block(kernel: &[f64], g: usize, rows: usize, cols: usize) -> &[f64] {
    &kernel[g * rows * cols..(g + 1) * rows * cols]
}

/// Cross-correlation of `input` with the kernel over a zero-padded window, plus bias.
pub fn conv2d(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    p.validate()?;
    let is = input.shape();
    let ks = p.kernel.shape();
    if is.c != p.in_channels() {
        return Err(Error::dim(format!(
            "conv2d: input channels (axis 1) {} != kernel in-channels {}",
            is.c,
            p.in_channels()
        )));
    }
    let geom = Geom {
        c: ks.c,
        h: is.h,
        w: is.w,
        kh: ks.h,
        kw: ks.w,
        sh: p.stride.0,
        sw: p.stride.1,
        ph: p.pad.0,
        pw: p.pad.1,
        ho: out_dim(is.h, ks.h, p.stride.0, p.pad.0, "height")?,
        wo: out_dim(is.w, ks.w, p.stride.1, p.pad.1, "width")?,
    };
    check_bias(p, ks.n)?;
    let groups = p.groups;
    let cout_g = ks.n / groups;
    let out_shape = Shape::new(is.n, ks.n, geom.ho, geom.wo);
    let mut out = Tensor::zeros(out_shape);
    let in_len = is.c * is.h * is.w;
    let out_len = ks.n * geom.cols();
    let (rows, cols) = (geom.rows(), geom.cols());

    out.data_mut()
        .par_chunks_mut(out_len)
        .enumerate()
        .for_each(|(n, out_n)| {
            let x_n = &input.data()[n * in_len..(n + 1) * in_len];
            let mut buf = if geom.is_pointwise() {
                Vec::new()
            } else {
                vec![0.0; rows * cols]
            };
            for g in 0..groups {
                let x_g = &x_n[g * geom.c * is.h * is.w..(g + 1) * geom.c * is.h * is.w];
                let patches: &[f64] = if geom.is_pointwise() {
                    x_g
                } else {
                    im2col(x_g, &geom, &mut buf);
                    &buf
                };
                let k_g = kernel_block(p.kernel.data(), g, cout_g, rows);
                let y_g = &mut out_n[g * cout_g * cols..(g + 1) * cout_g * cols];
                gemm(cout_g, rows, cols, k_g, false, patches, false, 0.0, y_g);
            }
            if let Some(bias) = &p.bias {
                for (co, b) in bias.iter().enumerate() {
                    out_n[co * cols..(co + 1) * cols]
                        .iter_mut()
                        .for_each(|v| *v += b);
                }
            }
        });
    Ok(out)
}

fn check_bias(p: &ConvParams, channels: usize) -> Result<()> {
    match &p.bias {
        Some(b) if b.len() != channels => Err(Error::dim(format!(
            "bias length {} != output channels {channels}",
            b.len()
        ))),
        _ => Ok(()),
    }
}

fn sum_partials(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for part in parts {
        for (a, v) in acc.iter_mut().zip(part) {
            *a += v;
        }
    }
    acc
}

fn bias_grad(grad_out: &Tensor) -> Vec<f64> {
    let s = grad_out.shape();
    let plane = s.plane();
    let mut gb = vec![0.0; s.c];
    for n in 0..s.n {
        for (c, g) in gb.iter_mut().enumerate() {
            let start = (n * s.c + c) * plane;
            *g += grad_out.data()[start..start + plane].iter().sum::<f64>();
        }
    }
    gb
}

/// Backward pass of [`conv2d`] given the upstream gradient.
pub fn conv2d_backward(input: &Tensor, p: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads> {
    p.validate()?;
    let is = input.shape();
    let ks = p.kernel.shape();
    let os = grad_out.shape();
    let geom = Geom {
        c: ks.c,
        h: is.h,
        w: is.w,
        kh: ks.h,
        kw: ks.w,
        sh: p.stride.0,
        sw: p.stride.1,
        ph: p.pad.0,
        pw: p.pad.1,
        ho: out_dim(is.h, ks.h, p.stride.0, p.pad.0, "height")?,
        wo: out_dim(is.w, ks.w, p.stride.1, p.pad.1, "width")?,
    };
    if os != Shape::new(is.n, ks.n, geom.ho, geom.wo) {
        return Err(Error::dim(format!(
            "conv2d_backward: grad shape {os} does not match output shape {}x{}x{}x{}",
            is.n, ks.n, geom.ho, geom.wo
        )));
    }
    let groups = p.groups;
    let cout_g = ks.n / groups;
    let (rows, cols) = (geom.rows(), geom.cols());
    let in_len = is.c * is.h * is.w;
    let out_len = ks.n * cols;
    let group_in = geom.c * is.h * is.w;

    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..is.n)
        .into_par_iter()
        .map(|n| {
            let x_n = &input.data()[n * in_len..(n + 1) * in_len];
            let g_n = &grad_out.data()[n * out_len..(n + 1) * out_len];
            let mut gx = vec![0.0; in_len];
            let mut gk = vec![0.0; p.kernel.len()];
            let mut patches = vec![0.0; rows * cols];
            let mut dpatches = vec![0.0; rows * cols];
            for g in 0..groups {
                let x_g = &x_n[g * group_in..(g + 1) * group_in];
                let gy_g = &g_n[g * cout_g * cols..(g + 1) * cout_g * cols];
                let k_g = kernel_block(p.kernel.data(), g, cout_g, rows);
                let gk_g = &mut gk[g * cout_g * rows..(g + 1) * cout_g * rows];
                let gx_g = &mut gx[g * group_in..(g + 1) * group_in];
                if geom.is_pointwise() {
                    gemm(cout_g, cols, rows, gy_g, false, x_g, true, 0.0, gk_g);
                    gemm(rows, cout_g, cols, k_g, true, gy_g, false, 0.0, gx_g);
                } else {
                    im2col(x_g, &geom, &mut patches);
                    gemm(cout_g, cols, rows, gy_g, false, &patches, true, 0.0, gk_g);
                    gemm(
                        rows,
                        cout_g,
                        cols,
                        k_g,
                        true,
                        gy_g,
                        false,
                        0.0,
                        &mut dpatches,
                    );
                    col2im(&dpatches, &geom, gx_g);
                }
            }
            (gx, gk)
        })
        .collect();

    let mut gx_all = Vec::with_capacity(is.numel());
    let mut gk_parts = Vec::with_capacity(is.n);
    for (gx, gk) in per_sample {
        gx_all.extend_from_slice(&gx);
        gk_parts.push(gk);
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(is, gx_all)?,
        kernel: Tensor::from_vec(ks, sum_partials(gk_parts, p.kernel.len()))?,
        bias: p.bias.as_ref().map(|_| bias_grad(grad_out)),
    })
}

fn transpose_geom(input: &Tensor, p: &ConvParams, output_size: (usize, usize)) -> Result<Geom> {
    p.validate()?;
    let is = input.shape();
    let ks = p.kernel.shape();
    if is.c != ks.n {
        return Err(Error::dim(format!(
            "conv_transpose2d: input channels (axis 1) {} != kernel dim0 {}",
            is.c, ks.n
        )));
    }
    let (oh, ow) = output_size;
    if oh == 0 || ow == 0 {
        return Err(Error::geometry(
            "conv_transpose2d: output size must be positive",
        ));
    }
    let ho = out_dim(oh, ks.h, p.stride.0, p.pad.0, "height")?;
    let wo = out_dim(ow, ks.w, p.stride.1, p.pad.1, "width")?;
    if (ho, wo) != (is.h, is.w) {
        return Err(Error::geometry(format!(
            "conv_transpose2d: output size {oh}x{ow} maps to {ho}x{wo} under the forward conv, \
             not the input size {}x{}",
            is.h, is.w
        )));
    }
    Ok(Geom {
        c: ks.c,
        h: oh,
        w: ow,
        kh: ks.h,
        kw: ks.w,
        sh: p.stride.0,
        sw: p.stride.1,
        ph: p.pad.0,
        pw: p.pad.1,
        ho,
        wo,
    })
}

/// Transposed convolution: the adjoint of [`conv2d`] with the same kernel, plus bias.
///
/// `output_size` must satisfy the forward shape relation exactly, i.e.
/// `conv2d` applied to an `output_size` map yields the input's spatial size.
pub fn conv_transpose2d(
    input: &Tensor,
    p: &ConvParams,
    output_size: (usize, usize),
) -> Result<Tensor> {
    let geom = transpose_geom(input, p, output_size)?;
    let is = input.shape();
    let ks = p.kernel.shape();
    let groups = p.groups;
    let c_out = ks.c * groups;
    check_bias(p, c_out)?;
    let cin_g = ks.n / groups;
    let (rows, cols) = (geom.rows(), geom.cols());
    let in_len = is.c * cols;
    let group_out = geom.c * geom.h * geom.w;
    let out_len = c_out * geom.h * geom.w;
    let mut out = Tensor::zeros(Shape::new(is.n, c_out, geom.h, geom.w));

    out.data_mut()
        .par_chunks_mut(out_len)
        .enumerate()
        .for_each(|(n, out_n)| {
            let b_n = &input.data()[n * in_len..(n + 1) * in_len];
            let mut patches = vec![0.0; rows * cols];
            for g in 0..groups {
                let b_g = &b_n[g * cin_g * cols..(g + 1) * cin_g * cols];
                let k_g = kernel_block(p.kernel.data(), g, cin_g, rows);
                let y_g = &mut out_n[g * group_out..(g + 1) * group_out];
                if geom.is_pointwise() {
                    gemm(rows, cin_g, cols, k_g, true, b_g, false, 0.0, y_g);
                } else {
                    gemm(rows, cin_g, cols, k_g, true, b_g, false, 0.0, &mut patches);
                    col2im(&patches, &geom, y_g);
                }
            }
            if let Some(bias) = &p.bias {
                let plane = geom.h * geom.w;
                for (co, b) in bias.iter().enumerate() {
                    out_n[co * plane..(co + 1) * plane]
                        .iter_mut()
                        .for_each(|v| *v += b);
                }
            }
        });
    Ok(out)
}

/// Backward pass of [`conv_transpose2d`].
pub fn conv_transpose2d_backward(
    input: &Tensor,
    p: &ConvParams,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    let os = grad_out.shape();
    let geom = transpose_geom(input, p, (os.h, os.w))?;
    let is = input.shape();
    let ks = p.kernel.shape();
    let groups = p.groups;
    let c_out = ks.c * groups;
    if os != Shape::new(is.n, c_out, geom.h, geom.w) {
        return Err(Error::dim(format!(
            "conv_transpose2d_backward: grad shape {os} does not match output channels {c_out}"
        )));
    }
    let cin_g = ks.n / groups;
    let (rows, cols) = (geom.rows(), geom.cols());
    let in_len = is.c * cols;
    let group_out = geom.c * geom.h * geom.w;
    let out_len = c_out * geom.h * geom.w;

    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..is.n)
        .into_par_iter()
        .map(|n| {
            let b_n = &input.data()[n * in_len..(n + 1) * in_len];
            let g_n = &grad_out.data()[n * out_len..(n + 1) * out_len];
            let mut gb = vec![0.0; in_len];
            let mut gk = vec![0.0; p.kernel.len()];
            let mut patches = vec![0.0; rows * cols];
            for g in 0..groups {
                let gy_g = &g_n[g * group_out..(g + 1) * group_out];
                let b_g = &b_n[g * cin_g * cols..(g + 1) * cin_g * cols];
                let k_g = kernel_block(p.kernel.data(), g, cin_g, rows);
                let gk_g = &mut gk[g * cin_g * rows..(g + 1) * cin_g * rows];
                let gb_g = &mut gb[g * cin_g * cols..(g + 1) * cin_g * cols];
                let unfolded: &[f64] = if geom.is_pointwise() {
                    gy_g
                } else {
                    im2col(gy_g, &geom, &mut patches);
                    &patches
                };
                gemm(cin_g, rows, cols, k_g, false, unfolded, false, 0.0, gb_g);
                gemm(cin_g, cols, rows, b_g, false, unfolded, true, 0.0, gk_g);
            }
            (gb, gk)
        })
        .collect();

    let mut gb_all = Vec::with_capacity(is.numel());
    let mut gk_parts = Vec::with_capacity(is.n);
    for (gb, gk) in per_sample {
        gb_all.extend_from_slice(&gb);
        gk_parts.push(gk);
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(is, gb_all)?,
        kernel: Tensor::from_vec(ks, sum_partials(gk_parts, p.kernel.len()))?,
        bias: p.bias.as_ref().map(|_| bias_grad(grad_out)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop cross-correlation used as an oracle.
    fn naive_conv(x: &Tensor, p: &ConvParams) -> Tensor {
        let is = x.shape();
        let ks = p.kernel.shape();
        let ho = (is.h + 2 * p.pad.0 - ks.h) / p.stride.0 + 1;
        let wo = (is.w + 2 * p.pad.1 - ks.w) / p.stride.1 + 1;
        let cin_g = ks.c;
        let cout_g = ks.n / p.groups;
        Tensor::from_fn(Shape::new(is.n, ks.n, ho, wo), |n, co, oy, ox| {
            let g = co / cout_g;
            let mut acc = p.bias.as_ref().map_or(0.0, |b| b[co]);
            for ci in 0..cin_g {
                for ky in 0..ks.h {
                    for kx in 0..ks.w {
                        let iy = (oy * p.stride.0 + ky) as isize - p.pad.0 as isize;
                        let ix = (ox * p.stride.1 + kx) as isize - p.pad.1 as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < is.h && (ix as usize) < is.w {
                            acc += p.kernel.at(co, ci, ky, kx)
                                * x.at(n, g * cin_g + ci, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn all_ones_2x2_kernel_on_3x3_grid() {
        let x = Tensor::from_vec(Shape::new(1, 1, 3, 3), (1..=9).map(f64::from).collect()).unwrap();
        let p = ConvParams::new(
            Tensor::filled(Shape::new(1, 1, 2, 2), 1.0),
            Some(vec![0.0]),
            1,
            0,
        );
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn identity_1x1_kernel_returns_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(Shape::new(2, 3, 5, 4), &mut rng);
        let k = Tensor::from_fn(
            Shape::new(3, 3, 1, 1),
            |o, i, _, _| if o == i { 1.0 } else { 0.0 },
        );
        let p = ConvParams::new(k, Some(vec![0.0; 3]), 1, 0);
        assert_eq!(conv2d(&x, &p).unwrap(), x);
        let back = conv_transpose2d(&x, &p, (5, 4)).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn same_padding_preserves_spatial_dims() {
        let x = Tensor::zeros(Shape::new(1, 8, 16, 16));
        let p = ConvParams::new(Tensor::zeros(Shape::new(8, 8, 5, 5)), None, 1, 2);
        assert_eq!(conv2d(&x, &p).unwrap().shape(), Shape::new(1, 8, 16, 16));
    }

    #[test]
    fn matches_naive_loop_including_groups_and_stride() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(cin, cout, groups, k, s, pad, h) in &[
            (3, 4, 1, 3, 1, 1, 6),
            (4, 4, 2, 3, 2, 1, 7),
            (2, 6, 2, 1, 1, 0, 5),
            (3, 2, 1, 5, 3, 2, 10),
        ] {
            let x = random(Shape::new(2, cin, h, h), &mut rng);
            let kernel = random(Shape::new(cout, cin / groups, k, k), &mut rng);
            let bias = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = ConvParams::new(kernel, Some(bias), s, pad).with_groups(groups);
            let fast = conv2d(&x, &p).unwrap();
            let slow = naive_conv(&x, &p);
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_a_dimension_error() {
        let x = Tensor::zeros(Shape::new(1, 2, 4, 4));
        let p = ConvParams::new(Tensor::zeros(Shape::new(1, 3, 3, 3)), None, 1, 1);
        assert!(matches!(conv2d(&x, &p), Err(Error::Dimension(m)) if m.contains("axis 1")));
    }

    #[test]
    fn non_integral_output_is_a_geometry_error() {
        let x = Tensor::zeros(Shape::new(1, 1, 4, 4));
        let p = ConvParams::new(Tensor::zeros(Shape::new(1, 1, 3, 3)), None, 2, 0);
        assert!(matches!(conv2d(&x, &p), Err(Error::Geometry(_))));
    }

    #[test]
    fn transpose_rejects_inconsistent_output_size() {
        let b = Tensor::zeros(Shape::new(1, 1, 4, 4));
        let p = ConvParams::new(Tensor::zeros(Shape::new(1, 1, 3, 3)), None, 2, 0);
        assert!(conv_transpose2d(&b, &p, (9, 9)).is_ok());
        assert!(matches!(
            conv_transpose2d(&b, &p, (10, 9)),
            Err(Error::Geometry(_))
        ));
        assert!(matches!(
            conv_transpose2d(&b, &p, (11, 11)),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn transpose_equals_explicit_matrix_transpose() {
        // Materialise conv2d as a dense matrix column by column, then check the
        // transposed conv against its transpose.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kernel = random(Shape::new(1, 1, 3, 3), &mut rng);
        let p = ConvParams::new(kernel, None, 2, 0);
        let (big, small) = (9usize, 4usize);
        let mut matrix = vec![vec![0.0; big * big]; small * small];
        for j in 0..big * big {
            let mut e = Tensor::zeros(Shape::new(1, 1, big, big));
            e.data_mut()[j] = 1.0;
            let col = conv2d(&e, &p).unwrap();
            for (i, row) in matrix.iter_mut().enumerate() {
                row[j] = col.data()[i];
            }
        }
        let b = random(Shape::new(1, 1, small, small), &mut rng);
        let t = conv_transpose2d(&b, &p, (big, big)).unwrap();
        for j in 0..big * big {
            let expect: f64 = (0..small * small).map(|i| matrix[i][j] * b.data()[i]).sum();
            assert!((t.data()[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_adjoint_definitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(Shape::new(2, 4, 6, 6), &mut rng);
        let p = ConvParams::new(
            random(Shape::new(6, 2, 3, 3), &mut rng),
            Some(vec![0.5; 6]),
            1,
            1,
        )
        .with_groups(2);
        let y = conv2d(&x, &p).unwrap();
        let g = random(y.shape(), &mut rng);
        let grads = conv2d_backward(&x, &p, &g).unwrap();
        // grad wrt input of <conv(x), g> is conv_transpose(g).
        let mut p0 = p.clone();
        p0.bias = None;
        let t = conv_transpose2d(&g, &p0, (6, 6)).unwrap();
        assert!(grads.input.max_abs_diff(&t) < 1e-12);
        let gb = grads.bias.unwrap();
        assert!(
            (gb[0]
                - (0..2)
                    .map(|n| (0..36).map(|i| g.sample(n)[i]).sum::<f64>())
                    .sum::<f64>())
            .abs()
                < 1e-12
        );
    }
}
