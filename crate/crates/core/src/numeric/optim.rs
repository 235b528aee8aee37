use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected adaptive-moment optimizer.
///
/// Moment buffers are allocated on the first step and indexed by the
/// position of each parameter in the iterator handed to [`Adam::step`], so
/// callers must present parameters in a stable order.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        if !(config.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                config.learning_rate
            )));
        }
        Ok(Adam {
            config,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. Parameters paired with `None` are left
    /// untouched and their moments do not advance.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a mut Tensor, Option<&'a Tensor>)>,
    {
        let pairs: Vec<_> = params.into_iter().collect();
        if self.first.is_empty() {
            self.first = pairs.iter().map(|(p, _)| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        if pairs.len() != self.first.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, step received {}",
                self.first.len(),
                pairs.len()
            )));
        }
        for (i, (p, g)) in pairs.iter().enumerate() {
            let g_len = g.map(|g| g.len()).unwrap_or(p.len());
            if p.len() != self.first[i].len() || g.is_some_and(|g| g.shape() != p.shape()) {
                return Err(dim_err!(
                    "optimizer parameter {} has shape {:?}, gradient/moment sizes {} / {}",
                    i,
                    p.shape(),
                    g_len,
                    self.first[i].len()
                ));
            }
        }

        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in pairs.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
