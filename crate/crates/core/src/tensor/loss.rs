use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Label id marking pixels that carry no supervision.
pub const VOID_LABEL: u8 = 255;

/// Per-pixel class ids of one image, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim(format!(
                "label map {height}x{width} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    /// dLoss/dlogits, same shape as the logits.
    pub grad: Tensor,
}

/// Weighted-mean softmax cross-entropy over all non-void pixels.
///
/// `loss = sum_p w[y_p] * -log softmax(z_p)[y_p] / sum_p w[y_p]`. With no
/// weighted support the loss and its gradient are zero.
pub fn softmax_cross_entropy_weighted(
    logits: &Tensor,
    labels: &[LabelMap],
    weights: &[f64],
    void_index: u8,
) -> Result<LossOutput> {
    let s = logits.shape();
    if labels.len() != s.n {
        return Err(Error::dim(format!(
            "loss: {} label maps for batch of {}",
            labels.len(),
            s.n
        )));
    }
    if weights.len() != s.c {
        return Err(Error::dim(format!(
            "loss: {} class weights for {} logit channels",
            weights.len(),
            s.c
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
        return Err(Error::data(format!(
            "loss: class weight {w} is not a finite non-negative value"
        )));
    }
    let plane = s.plane();
    let mut total_weight = 0.0;
    for (n, lm) in labels.iter().enumerate() {
        if (lm.height, lm.width) != (s.h, s.w) {
            return Err(Error::dim(format!(
                "loss: label map {n} is {}x{}, logits are {}x{}",
                lm.height, lm.width, s.h, s.w
            )));
        }
        for (i, &l) in lm.data.iter().enumerate() {
            if l == void_index {
                continue;
            }
            if l as usize >= s.c {
                return Err(Error::data(format!(
                    "loss: label {l} out of range [0, {}) at pixel (n={n}, y={}, x={})",
                    s.c,
                    i / s.w,
                    i % s.w
                )));
            }
            total_weight += weights[l as usize];
        }
    }
    let mut grad = Tensor::zeros(s);
    if total_weight <= 0.0 {
        return Ok(LossOutput { loss: 0.0, grad });
    }
    let z = logits.data();
    let mut loss = 0.0;
    let mut probs = vec![0.0; s.c];
    for (n, lm) in labels.iter().enumerate() {
        let base = n * s.c * plane;
        for (i, &l) in lm.data.iter().enumerate() {
            if l == void_index {
                continue;
            }
            let w = weights[l as usize];
            if w == 0.0 {
                continue;
            }
            let max = (0..s.c)
                .map(|c| z[base + c * plane + i])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (c, p) in probs.iter_mut().enumerate() {
                *p = (z[base + c * plane + i] - max).exp();
                denom += *p;
            }
            let log_denom = denom.ln();
            loss += w * (log_denom - (z[base + l as usize * plane + i] - max));
            let scale = w / total_weight;
            let g = grad.data_mut();
            for (c, p) in probs.iter().enumerate() {
                let onehot = if c == l as usize { 1.0 } else { 0.0 };
                g[base + c * plane + i] = scale * (p / denom - onehot);
            }
        }
    }
    Ok(LossOutput {
        loss: loss / total_weight,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn uniform_logits_give_ln2() {
        let logits = Tensor::zeros(Shape::new(1, 2, 2, 2));
        let labels = [LabelMap::new(2, 2, vec![0, 1, 1, 0]).unwrap()];
        let out =
            softmax_cross_entropy_weighted(&logits, &labels, &[1.0, 1.0], VOID_LABEL).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn all_void_gives_zero_loss_and_grad() {
        let logits = Tensor::filled(Shape::new(1, 3, 2, 2), 0.7);
        let labels = [LabelMap::filled(2, 2, VOID_LABEL)];
        let out = softmax_cross_entropy_weighted(&logits, &labels, &[1.0; 3], VOID_LABEL).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_pixel_weight_cancels() {
        let logits = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![2.0, 0.0]).unwrap();
        let labels = [LabelMap::new(1, 1, vec![0]).unwrap()];
        let out =
            softmax_cross_entropy_weighted(&logits, &labels, &[3.0, 1.0], VOID_LABEL).unwrap();
        let e2 = 2f64.exp();
        assert!((out.loss - -(e2 / (e2 + 1.0)).ln()).abs() < 1e-15);
    }

    #[test]
    fn two_pixels_unequal_weights_match_hand_formula() {
        // pixel 0: logits [2, 0], label 0, weight 3; pixel 1: logits [0, 1], label 1, weight 1.
        let logits = Tensor::from_vec(Shape::new(1, 2, 1, 2), vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        let labels = [LabelMap::new(1, 2, vec![0, 1]).unwrap()];
        let out =
            softmax_cross_entropy_weighted(&logits, &labels, &[3.0, 1.0], VOID_LABEL).unwrap();
        let ce0 = (1.0 + (-2f64).exp()).ln();
        let ce1 = (1.0 + (-1f64).exp()).ln();
        let expect = (3.0 * ce0 + 1.0 * ce1) / 4.0;
        assert!((out.loss - expect).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_label_reports_pixel() {
        let logits = Tensor::zeros(Shape::new(1, 2, 2, 3));
        let labels = [LabelMap::new(2, 3, vec![0, 0, 0, 0, 7, 0]).unwrap()];
        let err =
            softmax_cross_entropy_weighted(&logits, &labels, &[1.0, 1.0], VOID_LABEL).unwrap_err();
        assert!(err.to_string().contains("y=1, x=1"), "{err}");
    }
}
