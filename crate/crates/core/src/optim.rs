use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Gradients;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimMethod {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub method: OptimMethod,
    pub learning_rate: f64,
    /// SGD momentum, or Adam's first-moment decay.
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs of linear learning-rate warm-up.
    pub lr_warmup_epochs: usize,
    /// Epochs after which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: OptimMethod::Adam,
            learning_rate: 3e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_warmup_epochs: 0,
            milestones: Vec::new(),
            gamma: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |name: &str| format!("{prefix}.{name}");
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(field("learning_rate"), "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(field("momentum"), "must lie in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(field("weight_decay"), "must be nonnegative"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(field("gamma"), "must lie in (0, 1]"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                field("milestones"),
                "must be strictly increasing",
            ));
        }
        Ok(())
    }

    /// Learning rate used throughout 1-based epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let warm = if self.lr_warmup_epochs > 0 && epoch <= self.lr_warmup_epochs {
            epoch as f64 / self.lr_warmup_epochs as f64
        } else {
            1.0
        };
        let decays = self.milestones.iter().filter(|&&m| m < epoch).count();
        self.learning_rate * warm * self.gamma.powi(decays as i32)
    }
}

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// SGD with momentum and L2 weight decay, or Adam.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    first: Vec<Array2<T>>,
    second: Vec<Array2<T>>,
    steps: i32,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step(
        &mut self,
        params: Vec<&mut Array2<T>>,
        grads: &Gradients<T>,
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.0.len() {
            return Err(Error::shape("optimizer step", params.len(), grads.0.len()));
        }
        if self.first.is_empty() {
            self.first = grads.0.iter().map(|g| Array2::zeros(g.raw_dim())).collect();
            self.second = self.first.clone();
        }
        self.steps += 1;
        let lr = T::of(lr);
        let wd = T::of(self.config.weight_decay);
        let mu = T::of(self.config.momentum);
        let one = T::one();
        match self.config.method {
            OptimMethod::Sgd => {
                for ((p, g), v) in params.into_iter().zip(&grads.0).zip(&mut self.first) {
                    Zip::from(p).and(g).and(v).for_each(|p, &g, v| {
                        *v = mu * *v + g + wd * *p;
                        *p -= lr * *v;
                    });
                }
            }
            OptimMethod::Adam => {
                let b2 = T::of(ADAM_BETA2);
                let eps = T::of(ADAM_EPS);
                let c1 = one - mu.powi(self.steps);
                let c2 = one - b2.powi(self.steps);
                for (((p, g), m), s) in params
                    .into_iter()
                    .zip(&grads.0)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    Zip::from(p).and(g).and(m).and(s).for_each(|p, &g, m, s| {
                        let g = g + wd * *p;
                        *m = mu * *m + (one - mu) * g;
                        *s = b2 * *s + (one - b2) * g * g;
                        *p -= lr * (*m / c1) / ((*s / c2).sqrt() + eps);
                    });
                }
            }
        }
        Ok(())
    }
}
