use super::{NnError, Tensor};

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor), NnError> {
    if pred.shape() != target.shape() {
        return Err(NnError::ShapeMismatch(format!(
            "mse: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad: Vec<f64> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, Tensor::new(pred.shape().to_vec(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_is_zero() {
        let a = Tensor::new(vec![1, 1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(mse_loss(&a, &a).unwrap().0, 0.0);
    }

    #[test]
    fn footnote_pair() {
        let p = Tensor::new(vec![1], vec![0.49]).unwrap();
        let t = Tensor::new(vec![1], vec![0.51]).unwrap();
        let (loss, grad) = mse_loss(&p, &t).unwrap();
        assert!((loss - 0.0004).abs() < 1e-15);
        assert!((grad.data()[0] + 0.04).abs() < 1e-15);
    }
}
