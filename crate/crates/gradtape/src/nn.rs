//! Composite differentiable functions built from the primitive ops.

use crate::tensor::Tensor;
use crate::var::Var;
use crate::{Result, TapeError};

fn last_axis(x: &Var) -> Result<usize> {
    x.shape()
        .len()
        .checked_sub(1)
        .ok_or_else(|| TapeError::Shape("expected at least one axis".into()))
}

/// Row-wise maximum, as a constant (softmax is shift invariant, so the shift
/// carries no gradient).
fn row_max(x: &Tensor) -> Tensor {
    let shape = x.shape();
    let n = *shape.last().unwrap_or(&1);
    let rows = x.len() / n.max(1);
    let data = x.data();
    let maxes = (0..rows)
        .map(|r| data[r * n..(r + 1) * n].iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut out = shape.to_vec();
    if let Some(last) = out.last_mut() {
        *last = 1;
    }
    Tensor::new(out, maxes).expect("row max shape")
}

/// Log-softmax along the last axis.
pub fn log_softmax(x: &Var) -> Result<Var> {
    let axis = last_axis(x)?;
    let shifted = x.sub(&Var::constant(row_max(x.value())))?;
    let lse = shifted.exp().sum_axis(axis)?.ln();
    shifted.sub(&lse)
}

/// Softmax along the last axis.
pub fn softmax(x: &Var) -> Result<Var> {
    Ok(log_softmax(x)?.exp())
}

/// Mean negative log-likelihood of integer `labels` under row-wise
/// softmax of `logits` (`[batch, classes]`).
pub fn cross_entropy(logits: &Var, labels: &[usize]) -> Result<Var> {
    let (b, n) = match logits.shape() {
        [b, n] => (*b, *n),
        s => return Err(TapeError::Shape(format!("cross_entropy expects [batch, classes], got {s:?}"))),
    };
    if labels.len() != b {
        return Err(TapeError::Shape(format!("{} labels for batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(TapeError::Shape(format!("label {bad} out of range for {n} classes")));
    }
    let lp = log_softmax(logits)?;
    let index: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| i * n + l).collect();
    Ok(lp.gather(index.into(), &[b])?.mean().neg())
}

/// Scales every row (last axis) to unit Euclidean norm; `eps` keeps the
/// all-zero row finite (it maps to zero).
pub fn normalize_rows(x: &Var, eps: f64) -> Result<Var> {
    let axis = last_axis(x)?;
    let norm = x.square().sum_axis(axis)?.add_scalar(eps).sqrt();
    x.div(&norm)
}

/// Feature-wise normalisation over the last axis followed by a learned
/// affine map. Uses only per-example statistics.
pub fn feature_norm(x: &Var, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
    let axis = last_axis(x)?;
    let centered = x.sub(&x.mean_axis(axis)?)?;
    let var = centered.square().mean_axis(axis)?;
    let normed = centered.div(&var.add_scalar(eps).sqrt())?;
    normed.mul(gain)?.add(bias)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Var::constant(Tensor::matrix(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 50.0]]).unwrap());
        let s = softmax(&x).unwrap();
        for r in s.value().data().chunks(3) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let x = Var::constant(Tensor::zeros(&[4, 5]));
        let l = cross_entropy(&x, &[0, 1, 2, 3]).unwrap();
        assert!((l.item() - 5f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&x, &[0, 1, 2, 5]).is_err());
    }

    #[test]
    fn zero_row_normalizes_to_zero() {
        let x = Var::constant(Tensor::matrix(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap());
        let n = normalize_rows(&x, 1e-12).unwrap();
        assert_eq!(&n.value().data()[..2], &[0.0, 0.0]);
        assert!((n.value().data()[2] - 0.6).abs() < 1e-9);
    }

    #[test]
    fn feature_norm_of_zero_input_is_bias() {
        let x = Var::constant(Tensor::zeros(&[2, 3]));
        let gain = Var::constant(Tensor::ones(&[3]));
        let bias = Var::constant(Tensor::vector(&[0.5, 0.0, -1.0]));
        let y = feature_norm(&x, &gain, &bias, 1e-5).unwrap();
        assert_eq!(y.value().data(), &[0.5, 0.0, -1.0, 0.5, 0.0, -1.0]);
    }
}
