use super::tensor::Tensor;
use crate::error::Result;

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = v.max(0.0);
    }
    out
}

/// Passes gradient only where the forward input was strictly positive;
/// the subgradient at exactly zero is zero.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    grad_out.ensure_shape(input.shape())?;
    let mut g = grad_out.clone();
    for (gv, x) in g.data_mut().iter_mut().zip(input.data()) {
        if *x <= 0.0 {
            *gv = 0.0;
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn_engine::tensor::Shape;

    #[test]
    fn pointwise_definition_and_zero_subgradient() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-1.0, 3.5, 0.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 3.5, 0.0]);
        let g = Tensor::from_vec(x.shape(), vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 1.0, 0.0]);
    }
}
