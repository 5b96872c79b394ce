use crate::error::{Error, Result};
use crate::layers::softmax_into;
use crate::tensor::Tensor;

/// Cross-entropy of `softmax(logits)` against `target`; returns the loss,
/// the logit gradient `softmax - onehot`, and the probabilities.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let c = logits.len();
    if target >= c {
        return Err(Error::Index(format!(
            "target class {target} out of range for {c} classes"
        )));
    }
    let mut probs = vec![0.0; c];
    softmax_into(logits, &mut probs);
    // log-sum-exp form keeps the loss finite even when probs[target] underflows
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[target];
    let mut grad = probs.clone();
    grad[target] -= 1.0;
    Ok((loss, grad, probs))
}

/// Mean squared error and its gradient `2 (pred - target) / N`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "mse: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(pred.shape());
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_c() {
        let (loss, _, _) = softmax_cross_entropy(&[0.3; 10], 4).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - std::f64::consts::LN_10).abs() < 1e-12);
    }

    #[test]
    fn shift_invariance() {
        let logits = [0.1, -2.0, 3.5, 0.7];
        let shifted: Vec<f64> = logits.iter().map(|v| v + 41.0).collect();
        let (l1, g1, _) = softmax_cross_entropy(&logits, 2).unwrap();
        let (l2, g2, _) = softmax_cross_entropy(&shifted, 2).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn target_out_of_range() {
        assert!(matches!(
            softmax_cross_entropy(&[0.0, 1.0], 2),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn mse_hand_values() {
        let p = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let t = Tensor::zeros(&[2]);
        let (loss, grad) = mse_loss(&p, &t).unwrap();
        assert_eq!(loss, 1.0);
        assert_eq!(grad.data(), &[1.0, 1.0]);

        let (loss, grad) = mse_loss(&p, &p).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mse_shape_mismatch() {
        assert!(matches!(
            mse_loss(&Tensor::zeros(&[2]), &Tensor::zeros(&[3])),
            Err(Error::Dimension(_))
        ));
    }
}
