use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_shape(input.shape(), "relu_backward")?;
    let mut g = grad_out.clone();
    for (d, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x <= T::zero() {
            *d = T::zero();
        }
    }
    Ok(g)
}

/// Mean over H and W: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4("global_avg_pool")?;
    let plane = h * w;
    let inv = T::one() / T::of(plane as f64);
    let mut out = Tensor::zeros(&[n, c]);
    for (o, p) in out.data_mut().iter_mut().zip(input.data().chunks_exact(plane)) {
        let mut acc = T::zero();
        for &v in p {
            acc += v;
        }
        *o = acc * inv;
    }
    Ok(out)
}

pub fn global_avg_pool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    let &[n, c, h, w] = input_shape else {
        return Err(Error::shape(format!("global_avg_pool_backward: bad input shape {input_shape:?}")));
    };
    grad_out.expect_shape(&[n, c], "global_avg_pool_backward grad_out")?;
    let plane = h * w;
    let inv = T::one() / T::of(plane as f64);
    let mut g = Tensor::zeros(input_shape);
    for (p, &d) in g.data_mut().chunks_exact_mut(plane).zip(grad_out.data()) {
        p.fill(d * inv);
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::testing::{check_grad, rand_tensor};

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::new(vec![2], vec![-1.0f32, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
    }

    #[test]
    fn pool_of_constant_map() {
        let x = Tensor::<f64>::full(&[2, 3, 4, 4], 2.5);
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn gradients_match_finite_differences() {
        // keep inputs away from the relu kink
        let x = rand_tensor(&[2, 3, 3, 3], 9).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
        let gy = rand_tensor(&[2, 3, 3, 3], 10);
        let g = relu_backward(&gy, &x).unwrap();
        check_grad(&x, &g, |p| relu(p).data().iter().zip(gy.data()).map(|(a, b)| a * b).sum());

        let gp = rand_tensor(&[2, 3], 11);
        let g = global_avg_pool_backward(&gp, x.shape()).unwrap();
        check_grad(&x, &g, |p| {
            global_avg_pool(p).unwrap().data().iter().zip(gp.data()).map(|(a, b)| a * b).sum()
        });
    }
}
