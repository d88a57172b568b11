//! Adam and early-stopping bookkeeping.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::hypernet::HypernetParams;
use crate::models::EncoderParams;

/// A collection of named trainable tensors with a fixed enumeration order.
pub trait ParamSet {
    fn leaves(&self) -> Vec<(String, &Tensor)>;
    fn leaves_mut(&mut self) -> Vec<&mut Tensor>;

    fn flatten(&self) -> Vec<f64> {
        self.leaves()
            .into_iter()
            .flat_map(|(_, t)| t.data().to_vec())
            .collect()
    }

    fn unflatten(&mut self, flat: &[f64]) {
        let mut off = 0;
        for t in self.leaves_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    fn count(&self) -> usize {
        self.leaves().iter().map(|(_, t)| t.len()).sum()
    }
}

impl ParamSet for EncoderParams {
    fn leaves(&self) -> Vec<(String, &Tensor)> {
        self.blocks.iter().map(|b| (b.name.clone(), &b.values)).collect()
    }

    fn leaves_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks.iter_mut().map(|b| &mut b.values).collect()
    }
}

impl ParamSet for HypernetParams {
    fn leaves(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("weight".to_string(), &self.weight), ("bias".to_string(), &self.bias)];
        for (i, e) in self.block_embeddings.iter().enumerate() {
            v.push((format!("e{i}"), e));
        }
        if let Some(c) = &self.columnwise {
            v.push(("weight_out".to_string(), &c.weight));
            v.push(("bias_out".to_string(), &c.bias));
            for (j, e) in c.input_embeddings.iter().enumerate() {
                v.push((format!("e_in{j}"), e));
            }
        }
        v
    }

    fn leaves_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.weight, &mut self.bias];
        v.extend(self.block_embeddings.iter_mut());
        if let Some(c) = &mut self.columnwise {
            v.push(&mut c.weight);
            v.push(&mut c.bias);
            v.extend(c.input_embeddings.iter_mut());
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-leaf first and second moments.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<P: ParamSet + ?Sized>(config: AdamConfig, params: &P) -> Self {
        let sizes: Vec<usize> = params.leaves().iter().map(|(_, t)| t.len()).collect();
        AdamState {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One bias-corrected Adam update. `grads` follows the leaf order of
    /// `params`. A non-finite gradient aborts before anything is modified.
    pub fn step<P: ParamSet + ?Sized>(&mut self, params: &mut P, grads: &[Tensor], epoch: usize) -> Result<()> {
        let names: Vec<(String, Vec<usize>)> = params
            .leaves()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if names.len() != grads.len() || names.len() != self.m.len() {
            return Err(Error::Layout(format!(
                "{} gradients for {} parameter leaves",
                grads.len(),
                names.len()
            )));
        }
        for ((name, shape), g) in names.iter().zip(grads) {
            if g.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: shape.clone(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    block: name.clone(),
                    epoch,
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.config;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .leaves_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Tracks the best metric (higher is better) and its snapshot. Training
/// stops once `patience` consecutive updates bring no strict improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopState<S> {
    pub best_metric: f64,
    pub best_snapshot: Option<S>,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    pub patience: usize,
}

impl<S> EarlyStopState<S> {
    pub fn new(patience: usize) -> Self {
        EarlyStopState {
            best_metric: f64::NEG_INFINITY,
            best_snapshot: None,
            best_epoch: 0,
            epochs_since_improvement: 0,
            patience,
        }
    }

    /// Records `metric` for `epoch`. `snapshot` is only invoked on
    /// improvement.
    pub fn update(&mut self, epoch: usize, metric: f64, snapshot: impl FnOnce() -> S) -> StopDecision {
        if metric > self.best_metric {
            self.best_metric = metric;
            self.best_snapshot = Some(snapshot());
            self.best_epoch = epoch;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        if self.epochs_since_improvement > 0 && self.epochs_since_improvement >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn into_best(self) -> Option<S> {
        self.best_snapshot
    }
}
