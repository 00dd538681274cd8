//! Loss and accuracy over the loss-carrying positions of a batch.

use crate::corpus::Batch;
use crate::error::{ElmError, Result};
use crate::numkernel::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub loss_sum: f64,
    pub correct: usize,
    pub count: usize,
}

impl Metrics {
    /// Adds one batch of `[B·N, V]` logits.
    pub fn add(&mut self, logits: &Tensor, batch: &Batch) -> Result<()> {
        let (rows, v) = logits.dims2()?;
        if rows != batch.tokens() {
            return Err(ElmError::Dimension(format!(
                "{rows} logit rows for a batch of {} tokens",
                batch.tokens()
            )));
        }
        for (r, row) in logits.data().chunks_exact(v).enumerate() {
            if !batch.loss_mask[r] {
                continue;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            let target = batch.target_ids[r];
            self.loss_sum += lse - row[target];
            // First maximal index wins ties.
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
                .0;
            if pred == target {
                self.correct += 1;
            }
            self.count += 1;
        }
        Ok(())
    }

    pub fn loss(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.loss_sum / self.count as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Objective;

    #[test]
    fn uniform_logits_give_log_v() {
        let batch = Batch {
            input_ids: vec![3, 4],
            target_ids: vec![1, 2],
            loss_mask: vec![true, false],
            batch_size: 1,
            seq_len: 2,
            objective: Objective::Mlm,
        };
        let mut m = Metrics::default();
        m.add(&Tensor::zeros(&[2, 5]), &batch).unwrap();
        assert_eq!(m.count, 1);
        assert!((m.loss() - 5f64.ln()).abs() < 1e-12);
        assert_eq!(m.accuracy(), 0.0);
    }
}
