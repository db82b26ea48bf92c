use super::{Shape, Tensor};
use crate::error::{Error, Result};

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Masks `grad_out` where the forward input was not strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(Error::dim(format!(
            "relu_backward: grad shape {} != input shape {}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// Elementwise sum of equally shaped tensors. The backward pass is the identity
/// for every summand.
pub fn elementwise_sum(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::dim("elementwise_sum: empty input list"))?;
    let mut out = (*first).clone();
    out.clear_grad();
    for (i, t) in inputs.iter().enumerate().skip(1) {
        if t.shape() != first.shape() {
            return Err(Error::dim(format!(
                "elementwise_sum: input {i} has shape {}, expected {}",
                t.shape(),
                first.shape()
            )));
        }
        for (a, b) in out.data_mut().iter_mut().zip(t.data()) {
            *a += b;
        }
    }
    Ok(out)
}

/// Top/left margins for cropping `from` down to `to`; the odd pixel goes to the bottom/right.
pub fn crop_margins(from: usize, to: usize) -> usize {
    (from - to) / 2
}

fn check_crop(s: Shape, target: (usize, usize)) -> Result<()> {
    if target.0 == 0 || target.1 == 0 || target.0 > s.h || target.1 > s.w {
        return Err(Error::geometry(format!(
            "center_crop: target {}x{} does not fit inside {}x{}",
            target.0, target.1, s.h, s.w
        )));
    }
    Ok(())
}

pub fn center_crop(input: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let s = input.shape();
    check_crop(s, target)?;
    if (s.h, s.w) == target {
        let mut out = input.clone();
        out.clear_grad();
        return Ok(out);
    }
    let top = crop_margins(s.h, target.0);
    let left = crop_margins(s.w, target.1);
    Ok(Tensor::from_fn(
        Shape::new(s.n, s.c, target.0, target.1),
        |n, c, y, x| input.at(n, c, y + top, x + left),
    ))
}

/// Scatters `grad_out` back into the cropped window of a zero tensor shaped like the input.
pub fn center_crop_backward(input_shape: Shape, grad_out: &Tensor) -> Result<Tensor> {
    let gs = grad_out.shape();
    check_crop(input_shape, (gs.h, gs.w))?;
    if gs.n != input_shape.n || gs.c != input_shape.c {
        return Err(Error::dim(format!(
            "center_crop_backward: grad {gs} incompatible with input {input_shape}"
        )));
    }
    let top = crop_margins(input_shape.h, gs.h);
    let left = crop_margins(input_shape.w, gs.w);
    let mut out = Tensor::zeros(input_shape);
    for n in 0..gs.n {
        for c in 0..gs.c {
            for y in 0..gs.h {
                for x in 0..gs.w {
                    out.set(n, c, y + top, x + left, grad_out.at(n, c, y, x));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize) -> Tensor {
        Tensor::from_vec(
            Shape::new(1, 1, h, w),
            (0..h * w).map(|v| v as f64).collect(),
        )
        .unwrap()
    }

    #[test]
    fn relu_values_and_mask() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = Tensor::filled(x.shape(), 1.0);
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 0.0, 1.0]);
        let pos = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 3.0]).unwrap();
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn sum_of_inverse_pair_is_zero() {
        let a = grid(2, 2);
        let neg = a.map(|v| -v);
        assert!(elementwise_sum(&[&a, &neg])
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert_eq!(elementwise_sum(&[&a]).unwrap(), a);
    }

    #[test]
    fn sum_reports_first_offender() {
        let a = grid(2, 2);
        let b = grid(3, 3);
        let err = elementwise_sum(&[&a, &a, &b, &b]).unwrap_err();
        assert!(err.to_string().contains("input 2"), "{err}");
        assert!(elementwise_sum(&[]).is_err());
    }

    #[test]
    fn crop_4x4_to_2x2_keeps_center() {
        let out = center_crop(&grid(4, 4), (2, 2)).unwrap();
        assert_eq!(out.data(), &[5.0, 6.0, 9.0, 10.0]);
    }

    #[test]
    fn crop_5x5_to_2x2_puts_extra_margin_bottom_right() {
        let out = center_crop(&grid(5, 5), (2, 2)).unwrap();
        // rows/cols {1,2}
        assert_eq!(out.data(), &[6.0, 7.0, 11.0, 12.0]);
        let back = center_crop_backward(Shape::new(1, 1, 5, 5), &out).unwrap();
        assert_eq!(back.at(0, 0, 1, 1), 6.0);
        assert_eq!(back.at(0, 0, 2, 2), 12.0);
        assert_eq!(back.sum(), 6.0 + 7.0 + 11.0 + 12.0);
    }

    #[test]
    fn crop_identity_and_oversize() {
        let g = grid(3, 3);
        assert_eq!(center_crop(&g, (3, 3)).unwrap(), g);
        assert!(matches!(center_crop(&g, (4, 3)), Err(Error::Geometry(_))));
    }
}
