//! Adam over named parameter matrices.

use std::collections::BTreeMap;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config("Adam eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Array2<f64>, Array2<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Parameters without a gradient entry are
    /// left untouched.
    pub fn update(
        &mut self,
        params: Vec<(String, &mut Array2<f64>)>,
        grads: &BTreeMap<String, Array2<f64>>,
    ) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let correct1 = 1.0 - c.beta1.powi(t);
        let correct2 = 1.0 - c.beta2.powi(t);
        for (name, param) in params {
            let Some(g) = grads.get(&name) else { continue };
            if g.dim() != param.dim() {
                return Err(Error::shape(
                    "adam",
                    format!("{name}: gradient {:?} for {:?}", g.dim(), param.dim()),
                ));
            }
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (Array2::zeros(g.dim()), Array2::zeros(g.dim())));
            Zip::from(&mut *param)
                .and(&mut *m)
                .and(&mut *v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let m_hat = *m / correct1;
                    let v_hat = *v / correct2;
                    *p -= c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Array2::from_elem((1, 2), 1.0);
        let mut grads = BTreeMap::new();
        grads.insert(
            "w".to_string(),
            Array2::from_shape_vec((1, 2), vec![0.5, -2.0]).unwrap(),
        );
        let mut opt = Adam::new(AdamConfig::default());
        opt.update(vec![("w".into(), &mut p)], &grads).unwrap();
        // m_hat = g and v_hat = g², so the step is lr·sign(g) up to eps.
        assert!((p[[0, 0]] - (1.0 - 3e-4)).abs() < 1e-10);
        assert!((p[[0, 1]] - (1.0 + 3e-4)).abs() < 1e-10);
    }

    #[test]
    fn missing_gradient_leaves_parameter() {
        let mut p = Array2::from_elem((2, 2), 0.3);
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::default());
        opt.update(vec![("frozen".into(), &mut p)], &BTreeMap::new()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Array2::from_elem((1, 1), 5.0);
        let mut opt = Adam::new(AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        });
        for _ in 0..500 {
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), p.mapv(|x| 2.0 * (x - 1.0)));
            opt.update(vec![("x".into(), &mut p)], &grads).unwrap();
        }
        assert!((p[[0, 0]] - 1.0).abs() < 1e-2);
    }
}
