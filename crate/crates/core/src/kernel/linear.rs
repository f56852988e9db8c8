use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `out = input · weightᵀ + bias` for `input: [N, d_in]`, `weight: [d_out, d_in]`.
pub fn linear_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, d_in] = input.dims2("linear input")?;
    let [d_out, w_in] = weight.dims2("linear weight")?;
    if w_in != d_in {
        return Err(Error::shape(format!("linear: input has {d_in} features, weight expects {w_in}")));
    }
    bias.expect_shape(&[d_out], "linear bias")?;
    let mut out = Tensor::zeros(&[n, d_out]);
    let (x, w, b) = (input.data(), weight.data(), bias.data());
    for (row, y) in out.data_mut().chunks_exact_mut(d_out).enumerate() {
        let xr = &x[row * d_in..(row + 1) * d_in];
        for (o, yo) in y.iter_mut().enumerate() {
            let wr = &w[o * d_in..(o + 1) * d_in];
            let mut acc = T::zero();
            for (&a, &c) in xr.iter().zip(wr) {
                acc += a * c;
            }
            *yo = acc + b[o];
        }
    }
    Ok(out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn linear_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, d_in] = input.dims2("linear input")?;
    let [d_out, w_in] = weight.dims2("linear weight")?;
    if w_in != d_in {
        return Err(Error::shape(format!("linear: input has {d_in} features, weight expects {w_in}")));
    }
    grad_out.expect_shape(&[n, d_out], "linear grad_out")?;
    let mut gx = Tensor::zeros(&[n, d_in]);
    let mut gw = Tensor::zeros(&[d_out, d_in]);
    let mut gb = Tensor::zeros(&[d_out]);
    let (x, w, dy) = (input.data(), weight.data(), grad_out.data());
    for row in 0..n {
        let xr = &x[row * d_in..(row + 1) * d_in];
        for o in 0..d_out {
            let d = dy[row * d_out + o];
            gb.data_mut()[o] += d;
            let gw_r = &mut gw.data_mut()[o * d_in..(o + 1) * d_in];
            for (g, &a) in gw_r.iter_mut().zip(xr) {
                *g += a * d;
            }
            let gx_r = &mut gx.data_mut()[row * d_in..(row + 1) * d_in];
            for (g, &c) in gx_r.iter_mut().zip(&w[o * d_in..(o + 1) * d_in]) {
                *g += c * d;
            }
        }
    }
    Ok((gx, gw, gb))
}
