use crate::error::{Error, Result};
use crate::tensor::{ConvParams, Shape, Tensor};

pub fn bilinear_kernel_size(factor: usize) -> usize {
    2 * factor - factor % 2
}

/// Triangular 1-D interpolation weights for upsampling by `factor`.
pub fn bilinear_profile(factor: usize) -> Vec<f64> {
    let k = bilinear_kernel_size(factor);
    let center = if k % 2 == 1 {
        factor as f64 - 1.0
    } else {
        factor as f64 - 0.5
    };
    (0..k)
        .map(|i| 1.0 - (i as f64 - center).abs() / factor as f64)
        .collect()
}

/// Depthwise transposed-conv parameters that upsample each of `channels`
/// maps by exactly `factor` with bilinear interpolation.
pub fn bilinear_deconv_kernel(factor: usize, channels: usize) -> Result<ConvParams> {
    if factor < 2 {
        return Err(Error::config(format!(
            "bilinear upsampling factor must be >= 2, got {factor}"
        )));
    }
    if channels == 0 {
        return Err(Error::config(
            "bilinear upsampling needs at least one channel",
        ));
    }
    let k = bilinear_kernel_size(factor);
    let profile = bilinear_profile(factor);
    let kernel = Tensor::from_fn(Shape::new(channels, 1, k, k), |_, _, y, x| {
        profile[y] * profile[x]
    });
    Ok(ConvParams::new(kernel, None, factor, (k - factor) / 2).with_groups(channels))
}
