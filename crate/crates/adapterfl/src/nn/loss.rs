//! Softmax cross-entropy with the log-sum-exp stabilization.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Row-wise softmax of `[N, C]` logits.
pub fn softmax<F: Element>(logits: &Tensor<F>) -> Tensor<F> {
    let c = *logits.shape().last().unwrap();
    let mut out = Tensor::zeros(logits.shape());
    for (src, dst) in logits.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
        let max = src.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = 0.0f64;
        for (d, s) in dst.iter_mut().zip(src) {
            let e = (s.as_f64() - max.as_f64()).exp();
            *d = F::from_f64(e);
            sum += e;
        }
        for d in dst.iter_mut() {
            *d = F::from_f64(d.as_f64() / sum);
        }
    }
    out
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits:
/// `(softmax - onehot) / N`.
pub fn cross_entropy<F: Element>(
    logits: &Tensor<F>,
    labels: &[usize],
    num_classes: usize,
) -> Result<(f64, Tensor<F>)> {
    let (n, c) = match logits.shape() {
        [n, c] => (*n, *c),
        other => {
            return Err(Error::shape("cross_entropy", format!("expected [N,C] logits, got {other:?}")))
        }
    };
    if c != num_classes {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits have {c} classes, expected {num_classes}"),
        ));
    }
    if labels.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    for &l in labels {
        if l >= num_classes {
            return Err(Error::LabelOutOfRange { label: l, num_classes });
        }
    }
    let mut dlogits = Tensor::zeros(logits.shape());
    let mut loss = 0.0f64;
    let inv_n = 1.0 / n as f64;
    for (row, (src, dst)) in logits
        .data()
        .chunks(c)
        .zip(dlogits.data_mut().chunks_mut(c))
        .enumerate()
    {
        let max = src.iter().cloned().fold(F::neg_infinity(), F::max).as_f64();
        let mut sum = 0.0f64;
        for s in src {
            sum += (s.as_f64() - max).exp();
        }
        let label = labels[row];
        loss += sum.ln() + max - src[label].as_f64();
        for (j, (d, s)) in dst.iter_mut().zip(src).enumerate() {
            let p = (s.as_f64() - max).exp() / sum;
            let target = if j == label { 1.0 } else { 0.0 };
            *d = F::from_f64((p - target) * inv_n);
        }
    }
    Ok((loss * inv_n, dlogits))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_loss_is_ln_num_classes() {
        let logits = Tensor::<f64>::zeros(&[4, 10]);
        let labels = [0, 3, 7, 9];
        let (loss, _) = cross_entropy(&logits, &labels, 10).unwrap();
        assert!((loss - (10f64).ln()).abs() < 1e-12, "loss {loss}");
        assert!((loss - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let mut logits = Tensor::<f64>::zeros(&[2, 5]);
        logits.data_mut()[0] = 50.0; // row 0, class 0
        logits.data_mut()[5 + 3] = 50.0; // row 1, class 3
        let (loss, _) = cross_entropy(&logits, &[0, 3], 5).unwrap();
        assert!(loss < 1e-9, "loss {loss}");
    }

    #[test]
    fn label_out_of_range_is_an_error() {
        let logits = Tensor::<f64>::zeros(&[1, 3]);
        assert!(matches!(
            cross_entropy(&logits, &[3], 3),
            Err(Error::LabelOutOfRange { label: 3, num_classes: 3 })
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits =
            Tensor::from_vec(&[3, 4], vec![1.0, -2.0, 0.5, 3.0, 100.0, 100.0, 0.0, -100.0, 0.1, 0.2, 0.3, 0.4])
                .unwrap();
        let p = softmax::<f64>(&logits);
        for row in p.data().chunks(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn gradient_is_softmax_minus_onehot_over_n() {
        let logits = Tensor::from_vec(&[2, 3], vec![0.2, -0.4, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let (_, d) = cross_entropy(&logits, &[2, 1], 3).unwrap();
        let p = softmax::<f64>(&logits);
        for i in 0..2 {
            for j in 0..3 {
                let onehot = if (i == 0 && j == 2) || (i == 1 && j == 1) { 1.0 } else { 0.0 };
                let want = (p.data()[i * 3 + j] - onehot) / 2.0;
                assert!((d.data()[i * 3 + j] - want).abs() < 1e-12);
            }
        }
    }
}
