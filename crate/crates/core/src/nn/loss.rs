use crate::error::{Error, Result};
use crate::tensor::{Matrix, Real};

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax - onehot) / N`. Uses the log-sum-exp shift by the row maximum.
pub fn softmax_xent<T: Real>(logits: &Matrix<T>, labels: &[usize]) -> Result<(f64, Matrix<T>)> {
    let (n, k) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Dataset(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    if n == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let mut grad = Matrix::zeros(n, k);
    let mut total = 0.0f64;
    for r in 0..n {
        let row = logits.row(r);
        let max = row
            .iter()
            .map(|v| v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let log_z = z.ln() + max;
        total += log_z - row[labels[r]].as_f64();
        let g = grad.row_mut(r);
        for (j, e) in exps.iter().enumerate() {
            let onehot = if j == labels[r] { 1.0 } else { 0.0 };
            g[j] = T::from_f64((e / z - onehot) / n as f64);
        }
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "softmax cross-entropy".into(),
        });
    }
    Ok((loss, grad))
}

/// Index of the largest logit per row (first on ties).
pub fn argmax_rows<T: Real>(logits: &Matrix<T>) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let mut best = 0;
            for (j, &v) in logits.row(r).iter().enumerate() {
                if v > logits.row(r)[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Matrix::<f64>::zeros(3, 100);
        let (loss, grad) = softmax_xent(&logits, &[0, 50, 99]).unwrap();
        assert!((loss - 100f64.ln()).abs() < 1e-12);
        assert!((grad.get(0, 0) - (0.01 - 1.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn huge_margin_gives_zero_loss() {
        let logits = Matrix::new(1, 3, vec![1e4, 0.0, -5.0]).unwrap();
        let (loss, _) = softmax_xent(&logits, &[0]).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Matrix::<f64>::zeros(1, 3);
        assert!(softmax_xent(&logits, &[3]).is_err());
        assert!(softmax_xent(&logits, &[0, 1]).is_err());
    }

    #[test]
    fn argmax_first_tie() {
        let m = Matrix::new(2, 3, vec![1.0, 3.0, 3.0, -1.0, -2.0, -0.5]).unwrap();
        assert_eq!(argmax_rows(&m), vec![1, 2]);
    }
}
