//! AdamW with decoupled weight decay.

use std::collections::HashMap;

use diffmath::Matrix;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: HashMap<String, (Matrix, Matrix)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: HashMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every parameter named in `grads`. Parameters without a
    /// gradient are left untouched.
    pub fn step<'a>(&mut self, params: &mut ParamStore, grads: impl IntoIterator<Item = (&'a str, &'a Matrix)>) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != grad.shape() {
                return Err(Error::Config(format!("gradient shape mismatch for {name}")));
            }
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Matrix::zeros(grad.rows(), grad.cols()), Matrix::zeros(grad.rows(), grad.cols())));
            let decay = 1.0 - self.lr * self.weight_decay;
            for (((w, &gr), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gr;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gr * gr;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            if p.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteLoss { component: "parameter update", value: f64::NAN });
            }
        }
        Ok(())
    }
}
