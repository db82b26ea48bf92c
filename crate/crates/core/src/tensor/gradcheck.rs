//! Central-difference gradient oracle for the layer primitives.
//!
//! A primitive is wrapped as a [`Differentiable`] and reduced to the scalar
//! `L(x, θ) = <op(x; θ), r>` with a fixed random projection `r`. The analytic
//! gradient of `L` comes from the primitive's backward function; the numeric
//! one from `<op(x + h e_i) - op(x - h e_i), r> / 2h` over every input and
//! parameter coordinate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    batchnorm2d, batchnorm2d_backward, center_crop, center_crop_backward, conv2d, conv2d_backward,
    conv_transpose2d, conv_transpose2d_backward, maxpool2d, maxpool2d_backward, relu,
    relu_backward, softmax_cross_entropy_weighted, BnParams, ConvParams, LabelMap, Shape, Tensor,
};
use crate::error::{Error, Result};

/// Gradients of `<forward(input), grad_out>`.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub input: Tensor,
    pub params: Vec<Vec<f64>>,
}

pub trait Differentiable {
    fn forward(&mut self, input: &Tensor) -> Result<Tensor>;

    fn backward(&mut self, input: &Tensor, grad_out: &Tensor) -> Result<Gradients>;

    /// Learnable buffers, in the same order as [`Gradients::params`].
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        Vec::new()
    }
}

const PROJECTION_SEED: u64 = 0x5eed_9a0d;

/// `<op(x+) - op(x-), r> / 2h`. Differencing the outputs before projecting lets the
/// untouched output coordinates cancel exactly.
fn central_difference(
    op: &mut dyn Differentiable,
    plus: &Tensor,
    minus: &Tensor,
    r: &Tensor,
    h: f64,
) -> Result<f64> {
    let yp = op.forward(plus)?;
    let ym = op.forward(minus)?;
    if yp.shape() != r.shape() || ym.shape() != r.shape() {
        return Err(Error::dim(
            "gradcheck: forward output shape changed under perturbation",
        ));
    }
    let diff: f64 = yp
        .data()
        .iter()
        .zip(ym.data())
        .zip(r.data())
        .map(|((a, b), w)| (a - b) * w)
        .sum();
    Ok(diff / (2.0 * h))
}

fn param_difference(
    op: &mut dyn Differentiable,
    input: &Tensor,
    (j, k): (usize, usize),
    r: &Tensor,
    h: f64,
) -> Result<f64> {
    let orig = op.params_mut()[j][k];
    op.params_mut()[j][k] = orig + h;
    let yp = op.forward(input)?;
    op.params_mut()[j][k] = orig - h;
    let ym = op.forward(input)?;
    op.params_mut()[j][k] = orig;
    if yp.shape() != r.shape() || ym.shape() != r.shape() {
        return Err(Error::dim(
            "gradcheck: forward output shape changed under perturbation",
        ));
    }
    let diff: f64 = yp
        .data()
        .iter()
        .zip(ym.data())
        .zip(r.data())
        .map(|((a, b), w)| (a - b) * w)
        .sum();
    Ok(diff / (2.0 * h))
}

fn relative(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Maximum relative error between analytic and central-difference gradients
/// over every input element and every parameter of `op`.
pub fn finite_difference_check(op: &mut dyn Differentiable, input: &Tensor, h: f64) -> Result<f64> {
    let y = op.forward(input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
    let r = Tensor::from_fn(y.shape(), |_, _, _, _| StandardNormal.sample(&mut rng));
    let analytic = op.backward(input, &r)?;
    if analytic.input.shape() != input.shape() {
        return Err(Error::dim("gradcheck: input gradient has the wrong shape"));
    }

    let mut worst = 0.0f64;
    let mut plus = input.clone();
    let mut minus = input.clone();
    for i in 0..input.len() {
        let orig = input.data()[i];
        plus.data_mut()[i] = orig + h;
        minus.data_mut()[i] = orig - h;
        let numeric = central_difference(op, &plus, &minus, &r, h)?;
        plus.data_mut()[i] = orig;
        minus.data_mut()[i] = orig;
        worst = worst.max(relative(analytic.input.data()[i], numeric));
    }

    let counts: Vec<usize> = op.params_mut().iter().map(|p| p.len()).collect();
    if counts.len() != analytic.params.len() {
        return Err(Error::dim("gradcheck: parameter gradient count mismatch"));
    }
    for (j, &count) in counts.iter().enumerate() {
        for k in 0..count {
            let numeric = param_difference(op, input, (j, k), &r, h)?;
            worst = worst.max(relative(analytic.params[j][k], numeric));
        }
    }
    Ok(worst)
}

pub struct Conv2dOp(pub ConvParams);

impl Differentiable for Conv2dOp {
    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        conv2d(input, &self.0)
    }

    fn backward(&mut self, input: &Tensor, grad_out: &Tensor) -> Result<Gradients> {
        let g = conv2d_backward(input, &self.0, grad_out)?;
        let mut params = vec![g.kernel.into_data()];
        params.extend(g.bias);
        Ok(Gradients {
            input: g.input,
            params,
        })
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.0.kernel.data_mut()];
        if let Some(b) = self.0.bias.as_mut() {
            out.push(b.as_mut_slice());
        }
        out
    }
}

pub struct ConvTranspose2dOp {
    pub params: ConvParams,
    pub output_size: (usize, usize),
}

impl Differentiable for ConvTranspose2dOp {
    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        conv_transpose2d(input, &self.params, self.output_size)
    }

    fn backward(&mut self, input: &Tensor, grad_out: &Tensor) -> Result<Gradients> {
        let g = conv_transpose2d_backward(input, &self.params, grad_out)?;
        let mut params = vec![g.kernel.into_data()];
        params.extend(g.bias);
        Ok(Gradients {
            input: g.input,
            params,
        })
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.params.kernel.data_mut()];
        if let Some(b) = self.params.bias.as_mut() {
            out.push(b.as_mut_slice());
        }
        out
    }
}

pub struct MaxPoolOp {
    pub kernel: usize,
    pub stride: usize,
}

impl Differentiable for MaxPoolOp {
    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        Ok(maxpool2d(input, self.kernel, self.stride)?.output)
    }

    fn backward(&mut self, input: &Tensor, grad_out: &Tensor) -> Result<Gradients> {
        let p = maxpool2d(input, self.kernel, self.stride)?;
        Ok(Gradients {
            input: maxpool2d_backward(input.shape(), &p.argmax, grad_out)?,
            params: Vec::new(),
        })
    }
}

pub struct BatchNormOp(pub BnParams);

impl Differentiable for BatchNormOp {
    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        Ok(batchnorm2d(input, &mut self.0)?.0)
    }

    fn backward(&mut self, input: &Tensor, grad_out: &Tensor) -> Result<Gradients> {
        let (_, cache) = batchnorm2d(input, &mut self.0)?;
        let g = batchnorm2d_backward(&cache, &self.0, grad_out)?;
        Ok(Gradients {
            input: g.input,
            params: vec![g.gamma, g.beta],
        })
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.0.gamma.as_mut_slice(), self.0.beta.as_mut_slice()]
    }
}

pub struct ReluOp;

impl Differentiable for ReluOp {
    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        Ok(relu(input))
    }

    fn backward(&mut self, input: &Tensor, grad_out: &Tensor) -> Result<Gradients> {
        Ok(Gradients {
            input: relu_backward(input, grad_out)?,
            params: Vec::new(),
        })
    }
}

/// `input + sum(others)`; linear with identity gradient.
pub struct SumOp {
    pub others: Vec<Tensor>,
}

impl Differentiable for SumOp {
    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let mut all: Vec<&Tensor> = vec![input];
        all.extend(self.others.iter());
        super::elementwise_sum(&all)
    }

    fn backward(&mut self, _input: &Tensor, grad_out: &Tensor) -> Result<Gradients> {
        let mut g = grad_out.clone();
        g.clear_grad();
        Ok(Gradients {
            input: g,
            params: Vec::new(),
        })
    }
}

pub struct CenterCropOp {
    pub target: (usize, usize),
}

impl Differentiable for CenterCropOp {
    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        center_crop(input, self.target)
    }

    fn backward(&mut self, input: &Tensor, grad_out: &Tensor) -> Result<Gradients> {
        Ok(Gradients {
            input: center_crop_backward(input.shape(), grad_out)?,
            params: Vec::new(),
        })
    }
}

/// Weighted cross-entropy viewed as a map from logits to a 1x1x1x1 tensor.
pub struct LossOp {
    pub labels: Vec<LabelMap>,
    pub weights: Vec<f64>,
    pub void_index: u8,
}

impl Differentiable for LossOp {
    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let out =
            softmax_cross_entropy_weighted(input, &self.labels, &self.weights, self.void_index)?;
        Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![out.loss])
    }

    fn backward(&mut self, input: &Tensor, grad_out: &Tensor) -> Result<Gradients> {
        let out =
            softmax_cross_entropy_weighted(input, &self.labels, &self.weights, self.void_index)?;
        let scale = grad_out.data()[0];
        Ok(Gradients {
            input: out.grad.map(|g| g * scale),
            params: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn linear_sum_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = Shape::new(1, 2, 3, 3);
        let mut rand_t = || Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0));
        let x = rand_t();
        let mut op = SumOp {
            others: vec![rand_t(), rand_t()],
        };
        let err = finite_difference_check(&mut op, &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn detects_a_wrong_backward() {
        struct Broken;
        impl Differentiable for Broken {
            fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
                Ok(input.map(|v| v * v))
            }
            fn backward(&mut self, input: &Tensor, grad_out: &Tensor) -> Result<Gradients> {
                // missing factor of 2
                let data = input
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(x, g)| x * g)
                    .collect();
                Ok(Gradients {
                    input: Tensor::from_vec(input.shape(), data)?,
                    params: Vec::new(),
                })
            }
        }
        let x = Tensor::filled(Shape::new(1, 1, 2, 2), 0.5);
        assert!(finite_difference_check(&mut Broken, &x, 1e-5).unwrap() > 0.1);
    }
}
