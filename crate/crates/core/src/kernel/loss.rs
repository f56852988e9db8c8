use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn log_softmax_row<T: Scalar>(row: &[T], scale: T, out: &mut [T]) {
    let mut max = T::neg_infinity();
    for &v in row {
        max = max.max(v * scale);
    }
    let mut sum = T::zero();
    for &v in row {
        sum += (v * scale - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v * scale - lse;
    }
}

/// Mean softmax cross-entropy over the batch with optional label smoothing.
///
/// The target distribution is `(1 - ls)·onehot + ls / C`. Returns the loss and
/// its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    label_smoothing: f64,
) -> Result<(T, Tensor<T>)> {
    let [n, c] = logits.dims2("softmax_cross_entropy logits")?;
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
    }
    if !(0.0..1.0).contains(&label_smoothing) {
        return Err(Error::invalid(format!("label smoothing {label_smoothing} not in [0, 1)")));
    }
    let ls = T::of(label_smoothing);
    let uniform = ls / T::of(c as f64);
    let inv_n = T::one() / T::of(n as f64);
    let mut grad = Tensor::zeros(&[n, c]);
    let mut logp = vec![T::zero(); c];
    let mut total = T::zero();
    for (i, (row, g)) in logits.data().chunks_exact(c).zip(grad.data_mut().chunks_exact_mut(c)).enumerate() {
        log_softmax_row(row, T::one(), &mut logp);
        let mut l = T::zero();
        for (j, (&lp, gj)) in logp.iter().zip(g.iter_mut()).enumerate() {
            let target = if j == labels[i] { T::one() - ls + uniform } else { uniform };
            l -= target * lp;
            *gj = (lp.exp() - target) * inv_n;
        }
        total += l;
    }
    Ok((total * inv_n, grad))
}

/// Temperature-scaled distillation loss `T²·KL(softmax(t/T) ‖ softmax(s/T))`,
/// averaged over the batch. The gradient is taken with respect to the student
/// logits only; the teacher is treated as a constant.
pub fn kl_distill_loss<T: Scalar>(
    teacher: &Tensor<T>,
    student: &Tensor<T>,
    temperature: f64,
) -> Result<(T, Tensor<T>)> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    let [n, c] = student.dims2("kl_distill_loss student")?;
    teacher.expect_shape(&[n, c], "kl_distill_loss teacher")?;
    let temp = T::of(temperature);
    let scale = T::one() / temp;
    let inv_n = T::one() / T::of(n as f64);
    let mut grad = Tensor::zeros(&[n, c]);
    let mut lt = vec![T::zero(); c];
    let mut ls = vec![T::zero(); c];
    let mut total = T::zero();
    for ((t_row, s_row), g) in teacher
        .data()
        .chunks_exact(c)
        .zip(student.data().chunks_exact(c))
        .zip(grad.data_mut().chunks_exact_mut(c))
    {
        log_softmax_row(t_row, scale, &mut lt);
        log_softmax_row(s_row, scale, &mut ls);
        for j in 0..c {
            let pt = lt[j].exp();
            if pt > T::zero() {
                total += pt * (lt[j] - ls[j]);
            }
            g[j] = temp * (ls[j].exp() - pt) * inv_n;
        }
    }
    Ok((total * temp * temp * inv_n, grad))
}
