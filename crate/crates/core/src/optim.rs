//! AdamW with per-tensor state, gradient clipping and the warmup/decay schedule.

use std::collections::BTreeMap;

use crate::error::{ElmError, Result};
use crate::numkernel::{Graph, Tensor, Var};
use crate::supernet::ParamStore;

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: BTreeMap::new(),
        }
    }

    /// Drops moments of every tensor under `prefix`; they restart at zero.
    pub fn reset_prefix(&mut self, prefix: &str) {
        let p = format!("{prefix}.");
        self.state.retain(|k, _| !k.starts_with(&p));
    }

    pub fn has_state(&self, name: &str) -> bool {
        self.state.contains_key(name)
    }

    /// One update of the named tensors. Weight decay is decoupled and only
    /// touches matrices.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(String, Tensor)], lr: f64) -> Result<()> {
        for (name, grad) in grads {
            let current = store.get(name)?;
            if current.shape() != grad.shape() {
                return Err(ElmError::Dimension(format!(
                    "gradient for `{name}` has shape {:?}, parameter has {:?}",
                    grad.shape(),
                    current.shape()
                )));
            }
            let n = grad.numel();
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            if st.m.len() != n {
                *st = Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    t: 0,
                };
            }
            st.t += 1;
            let bc1 = 1.0 - self.beta1.powi(st.t as i32);
            let bc2 = 1.0 - self.beta2.powi(st.t as i32);
            let decay = if current.rank() == 2 { lr * self.weight_decay } else { 0.0 };
            let mut next = current.clone();
            for (((w, &gv), m), v) in next.data_mut().iter_mut().zip(grad.data()).zip(&mut st.m).zip(&mut st.v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * gv;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *w -= lr * update + decay * *w;
            }
            next.round_in_place();
            next.ensure_finite(name)?;
            store.update(name, next)?;
        }
        Ok(())
    }
}

/// Gradients of `loss` for every leaf in `leaves`, in name order.
pub fn collect_grads(g: &Graph, loss: Var, leaves: &BTreeMap<String, Var>) -> Result<Vec<(String, Tensor)>> {
    let mut grads = g.backward(loss)?;
    Ok(leaves
        .iter()
        .map(|(name, &v)| (name.clone(), grads.take(v)))
        .collect())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`. Returns the norm before scaling.
pub fn clip_global_norm(groups: &mut [&mut Vec<(String, Tensor)>], max_norm: f64) -> f64 {
    let total: f64 = groups
        .iter()
        .flat_map(|g| g.iter())
        .map(|(_, t)| t.frobenius_sq())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let s = max_norm / total;
        for group in groups.iter_mut() {
            for (_, t) in group.iter_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    total
}

/// Linear warmup over the first `warmup` fraction of steps, then linear decay to zero.
pub fn lr_at(step: usize, total: usize, base: f64, warmup: f64) -> f64 {
    let total = total.max(1);
    let warm = ((total as f64 * warmup).ceil() as usize).max(1);
    if step < warm {
        base * (step + 1) as f64 / warm as f64
    } else {
        let rest = (total - warm).max(1) as f64;
        base * (1.0 - (step - warm) as f64 / rest).max(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        assert!((lr_at(0, 100, 1.0, 0.1) - 0.1).abs() < 1e-12);
        assert!((lr_at(9, 100, 1.0, 0.1) - 1.0).abs() < 1e-12);
        assert!(lr_at(99, 100, 1.0, 0.1) < 0.02);
        assert!(lr_at(50, 100, 1.0, 0.1) < lr_at(20, 100, 1.0, 0.1));
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("b", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let mut opt = AdamW::new(0.0);
        let g = vec![("b".to_string(), Tensor::new(vec![2], vec![3.0, -0.5]).unwrap())];
        opt.step(&mut store, &g, 0.1).unwrap();
        let w = store.get("b").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut a = vec![("x".to_string(), Tensor::new(vec![2], vec![3.0, 4.0]).unwrap())];
        let n = clip_global_norm(&mut [&mut a], 1.0);
        assert_eq!(n, 5.0);
        assert!((a[0].1.frobenius_sq() - 1.0).abs() < 1e-12);
    }
}
