use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Max-pool result with the flat input index of the winner of every window.
#[derive(Clone, Debug)]
pub struct PoolOutput {
    pub output: Tensor,
    pub argmax: Vec<usize>,
}

/// Square `k x k` max pooling with stride `s`, no padding, floor output size.
///
/// Ties resolve to the first maximum in row-major window order.
pub fn maxpool2d(input: &Tensor, k: usize, s: usize) -> Result<PoolOutput> {
    let is = input.shape();
    if k == 0 || s == 0 {
        return Err(Error::geometry(
            "maxpool2d: window and stride must be positive",
        ));
    }
    if k > is.h || k > is.w {
        return Err(Error::geometry(format!(
            "maxpool2d: window {k} larger than input {}x{}",
            is.h, is.w
        )));
    }
    let ho = (is.h - k) / s + 1;
    let wo = (is.w - k) / s + 1;
    let os = Shape::new(is.n, is.c, ho, wo);
    let mut out = Tensor::zeros(os);
    let mut argmax = vec![0usize; os.numel()];
    let src = input.data();
    let mut o = 0;
    for n in 0..is.n {
        for c in 0..is.c {
            let base = (n * is.c + c) * is.plane();
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = base + oy * s * is.w + ox * s;
                    for ky in 0..k {
                        let row = base + (oy * s + ky) * is.w + ox * s;
                        for (kx, &v) in src[row..row + k].iter().enumerate() {
                            if v > best {
                                best = v;
                                best_i = row + kx;
                            }
                        }
                    }
                    out.data_mut()[o] = best;
                    argmax[o] = best_i;
                    o += 1;
                }
            }
        }
    }
    Ok(PoolOutput {
        output: out,
        argmax,
    })
}

/// Routes each upstream gradient to the stored argmax position.
pub fn maxpool2d_backward(
    input_shape: Shape,
    argmax: &[usize],
    grad_out: &Tensor,
) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::dim(format!(
            "maxpool2d_backward: {} argmax entries for {} gradients",
            argmax.len(),
            grad_out.len()
        )));
    }
    let mut gx = Tensor::zeros(input_shape);
    let data = gx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        data[i] += g;
    }
    Ok(gx)
}
