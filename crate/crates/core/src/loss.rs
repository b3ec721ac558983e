//! Classification loss and accuracy over row-major logits.

use std::rc::Rc;

use aal_tensor::Tensor;

/// Mean negative log-likelihood of `labels` under row-wise softmax of `logits` (`[B, N]`).
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Tensor {
    let &[b, n] = logits.shape() else {
        panic!("cross_entropy expects [batch, classes] logits, got {:?}", logits.shape());
    };
    assert_eq!(b, labels.len(), "{b} logit rows for {} labels", labels.len());
    let idx: Rc<[usize]> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            assert!(l < n, "label {l} outside [0, {n})");
            i * n + l
        })
        .collect();
    logits.log_softmax().gather(idx, &[b]).mean().neg()
}

/// Row-wise argmax; the first maximum wins ties.
pub fn argmax_rows(values: &[f64], cols: usize) -> Vec<usize> {
    values
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let cols = logits.shape()[1];
    let hits = argmax_rows(logits.data(), cols).iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_n() {
        let logits = Tensor::constant(vec![2, 5], vec![0.3; 10]);
        assert!((cross_entropy(&logits, &[1, 4]).item() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_evaluation() {
        let z = [1.0, 2.0, 0.5, -1.0, 0.0, 3.0];
        let logits = Tensor::constant(vec![2, 3], z.to_vec());
        let direct = |row: &[f64], l: usize| -> f64 { row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[l] };
        let want = (direct(&z[..3], 1) + direct(&z[3..], 2)) / 2.0;
        assert!((cross_entropy(&logits, &[1, 2]).item() - want).abs() < 1e-12);
        assert_eq!(accuracy(&logits, &[1, 2]), 1.0);
        assert_eq!(accuracy(&logits, &[0, 2]), 0.5);
    }
}
