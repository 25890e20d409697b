//! Named parameters and the small layers built from them.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::normal_vec;
use crate::tensor::checkpoint::Entry;
use crate::tensor::{BatchStats, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// A named, optionally trainable parameter.
///
/// The value is an immutable tensor; updates replace it, which also drops any
/// gradient attached to the previous value.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    value: Tensor,
    trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, data: Vec<f64>, shape: &[usize]) -> Result<Param> {
        Ok(Param {
            name: name.into(),
            value: Tensor::param(data, shape)?,
            trainable: true,
        })
    }

    pub fn normal(
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Param> {
        let n = shape.iter().product();
        Param::new(name, normal_vec(rng, n, std), shape)
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], v: f64) -> Result<Param> {
        let n = shape.iter().product();
        Param::new(name, vec![v; n], shape)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        if trainable != self.trainable {
            self.trainable = trainable;
            self.rebuild(self.value.to_vec());
        }
    }

    /// Replace the value, keeping shape and trainability.
    pub fn set_data(&mut self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.value.numel() {
            return Err(Error::dim("set_data", self.value.shape(), &[data.len()]));
        }
        self.rebuild(data);
        Ok(())
    }

    fn rebuild(&mut self, data: Vec<f64>) {
        let shape = self.value.shape().to_vec();
        self.value = if self.trainable {
            Tensor::param(data, &shape)
        } else {
            Tensor::new(data, &shape)
        }
        .expect("shape preserved");
    }

    /// Gradient from the last backward pass, `None` when unreached.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.value.grad()
    }

    pub fn clear_grad(&self) {
        self.value.clear_grad();
    }

    pub fn to_entry(&self) -> Entry {
        Entry {
            name: self.name.clone(),
            shape: self.shape().to_vec(),
            data: self.value.to_vec(),
        }
    }
}

/// Visit parameters in a fixed order; used by optimizers and checkpoints.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn set_trainable(&mut self, trainable: bool) {
        for p in self.params_mut() {
            p.set_trainable(trainable);
        }
    }

    fn clear_grads(&self) {
        for p in self.params() {
            p.clear_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.data().len()).sum()
    }
}

/// Dense affine map `x W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new(
        prefix: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Linear> {
        Ok(Linear {
            w: Param::normal(format!("{prefix}.w"), &[d_in, d_out], std, rng)?,
            b: Param::filled(format!("{prefix}.b"), &[d_out], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(self.w.tensor())?.add_suffix(self.b.tensor())
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

impl LayerNorm {
    pub fn new(prefix: &str, d: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gamma: Param::filled(format!("{prefix}.gamma"), &[d], 1.0)?,
            beta: Param::filled(format!("{prefix}.beta"), &[d], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(self.gamma.tensor(), self.beta.tensor(), NORM_EPS)
    }
}

impl Module for LayerNorm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Batch normalization parameters plus running statistics for inference.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(prefix: &str, d: usize) -> Result<BatchNorm> {
        Ok(BatchNorm {
            gamma: Param::filled(format!("{prefix}.gamma"), &[d], 1.0)?,
            beta: Param::filled(format!("{prefix}.beta"), &[d], 0.0)?,
            running_mean: vec![0.0; d],
            running_var: vec![1.0; d],
        })
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        for (r, m) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }

    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        x.batch_norm_eval(
            self.gamma.tensor(),
            self.beta.tensor(),
            &self.running_mean,
            &self.running_var,
            NORM_EPS,
        )
    }

    pub fn stat_entries(&self) -> Vec<Entry> {
        let d = self.running_mean.len();
        let base = self.gamma.name.trim_end_matches(".gamma");
        vec![
            Entry {
                name: format!("{base}.running_mean"),
                shape: vec![d],
                data: self.running_mean.clone(),
            },
            Entry {
                name: format!("{base}.running_var"),
                shape: vec![d],
                data: self.running_var.clone(),
            },
        ]
    }
}

impl Module for BatchNorm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn frozen_param_gets_no_grad() {
        let mut p = Param::filled("p", &[2], 1.5).unwrap();
        p.set_trainable(false);
        let loss = p.tensor().mul(p.tensor()).unwrap().sum();
        loss.backward().unwrap();
        assert!(p.grad().is_none());
        assert_eq!(p.data(), &[1.5, 1.5]);
    }

    #[test]
    fn linear_shapes() {
        let mut rng = stream(1, "t");
        let l = Linear::new("l", 3, 5, 0.1, &mut rng).unwrap();
        let x = Tensor::zeros(&[2, 4, 3]);
        let y = l.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 4, 5]);
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut bn = BatchNorm::new("bn", 1).unwrap();
        bn.update_running(&BatchStats {
            mean: vec![2.0],
            var: vec![3.0],
        });
        assert!((bn.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((bn.running_var[0] - 1.2).abs() < 1e-15);
    }
}
