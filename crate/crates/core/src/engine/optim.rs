use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Polynomial learning-rate decay `lr0 * (1 - t/T)^0.9`.
pub fn poly_decay_lr(lr0: f64, t: usize, max_t: usize) -> Result<f64> {
    ensure!(max_t > 0, "poly decay needs a positive horizon");
    ensure!(t <= max_t, "epoch {t} beyond horizon {max_t}");
    Ok(lr0 * (1.0 - t as f64 / max_t as f64).powf(0.9))
}

/// SGD with heavy-ball momentum and a per-epoch polynomial schedule.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub velocity: Vec<Vec<f64>>,
    pub momentum: f64,
    pub lr0: f64,
    pub epoch: usize,
    pub max_epoch: usize,
}

impl OptimizerState {
    /// One zeroed velocity buffer per parameter, sized by `lens`.
    pub fn new(lens: &[usize], momentum: f64, lr0: f64, max_epoch: usize) -> Self {
        OptimizerState {
            velocity: lens.iter().map(|&n| vec![0.0; n]).collect(),
            momentum,
            lr0,
            epoch: 0,
            max_epoch,
        }
    }

    pub fn lr(&self) -> Result<f64> {
        poly_decay_lr(self.lr0, self.epoch, self.max_epoch)
    }

    /// `v <- momentum * v + g; p <- p - lr * v`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Tensor], lr: f64) -> Result<()> {
        ensure!(
            params.len() == grads.len() && params.len() == self.velocity.len(),
            "optimizer expects {} tensors, got {} params / {} grads",
            self.velocity.len(),
            params.len(),
            grads.len()
        );
        for ((p, g), v) in params.iter().zip(grads).zip(&self.velocity) {
            ensure!(
                p.len() == g.len() && p.len() == v.len(),
                "optimizer size mismatch: param has {} values, grad {:?}",
                p.len(),
                g.shape()
            );
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((p, g), v) in p.iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *v = self.momentum * *v + g;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}
