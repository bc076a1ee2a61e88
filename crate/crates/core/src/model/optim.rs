//! First-order optimizers over lists of parameter arrays.

use serde::{Deserialize, Serialize};

use super::ParamGrads;
use crate::autodiff::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        Self::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn sgd() -> Self {
        Self::Sgd { momentum: 0.0 }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::adam()
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    steps: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, lr, steps: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. Gradients containing NaN or infinity are rejected
    /// before any parameter is touched.
    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &ParamGrads) -> Result<()> {
        if params.len() != grads.0.len() {
            return Err(Error::Shape(format!("{} parameter arrays but {} gradients", params.len(), grads.0.len())));
        }
        for (i, (p, g)) in params.iter().zip(&grads.0).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("array {i}: parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
            }
            if let Some(j) = g.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient {} in array {i} at entry {j} (step {})",
                    g.data[j], self.steps
                )));
            }
        }
        if self.first.is_empty() {
            self.first = grads.0.iter().map(|g| Matrix::zeros(g.rows, g.cols)).collect();
            self.second = self.first.clone();
        }
        self.steps += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                for ((p, g), m) in params.into_iter().zip(&grads.0).zip(&mut self.first) {
                    for ((w, &gv), mv) in p.data.iter_mut().zip(&g.data).zip(&mut m.data) {
                        *mv = momentum * *mv + gv;
                        *w -= lr * *mv;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.steps as i32);
                let c2 = 1.0 - beta2.powi(self.steps as i32);
                for (((p, g), m), v) in params.into_iter().zip(&grads.0).zip(&mut self.first).zip(&mut self.second) {
                    for (((w, &gv), mv), vv) in p.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        let m_hat = *mv / c1;
                        let v_hat = *vv / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        for kind in [OptimizerKind::sgd(), OptimizerKind::Sgd { momentum: 0.9 }, OptimizerKind::adam()] {
            let mut w = Matrix::from_vec(1, 3, vec![0.5, -1.0, 2.0]);
            let before = w.clone();
            let mut opt = Optimizer::new(kind, 0.1);
            opt.step(vec![&mut w], &ParamGrads(vec![Matrix::zeros(1, 3)])).unwrap();
            assert_eq!(w, before);
        }
    }

    #[test]
    fn sgd_on_square() {
        let mut w = Matrix::from_vec(1, 1, vec![1.0]);
        let mut opt = Optimizer::new(OptimizerKind::sgd(), 0.1);
        let g = ParamGrads(vec![Matrix::from_vec(1, 1, vec![2.0 * w.data[0]])]);
        opt.step(vec![&mut w], &g).unwrap();
        assert!((w.data[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        let lr = 0.01;
        let mut w = Matrix::from_vec(1, 2, vec![0.0, 0.0]);
        let mut opt = Optimizer::new(OptimizerKind::adam(), lr);
        opt.step(vec![&mut w], &ParamGrads(vec![Matrix::from_vec(1, 2, vec![1.0, -1.0])])).unwrap();
        // m_hat = g and v_hat = g^2 after bias correction, so |dw| = lr * |g| / (|g| + eps).
        let expected = lr / (1.0 + 1e-8);
        assert!((w.data[0] + expected).abs() < 1e-9);
        assert!((w.data[1] - expected).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut w = Matrix::from_vec(1, 2, vec![1.0, 1.0]);
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.1);
        let err = opt.step(vec![&mut w], &ParamGrads(vec![Matrix::from_vec(1, 2, vec![0.0, f64::NAN])])).unwrap_err();
        assert!(matches!(err, Error::Training(_)));
        assert_eq!(w.data, vec![1.0, 1.0]);
    }
}
