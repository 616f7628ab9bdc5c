//! Adam and the supervised training loop.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::{ConfusionCounts, Scores};
use crate::model::{threshold_mask, OpUNet};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for a fixed list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState<T: Element = f32> {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Self { config, t: 0, m, v }
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.v
    }

    /// One update. `names` label parameters in error messages.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[Tensor<T>],
        names: &[String],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} moments, {} params, {} grads",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(i).map(String::as_str).unwrap_or("?");
            if p.shape() != self.m[i].shape() || g.shape() != self.m[i].shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "{name}: param {:?}, grad {:?}, state {:?}",
                        p.shape(),
                        g.shape(),
                        self.m[i].shape()
                    ),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }

        self.t += 1;
        let c = self.config;
        let f = T::from_f64_lossy;
        let (b1, b2, eps) = (f(c.beta1), f(c.beta2), f(c.eps));
        let bc1 = f(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = f(1.0 - c.beta2.powi(self.t as i32));
        let lr = f(c.lr);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (m, v)) in it {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive epochs without validation-F1 improvement tolerated before stopping.
    pub patience: usize,
    pub threshold: f64,
    pub learning_rate: f64,
    /// Abort on the first NaN/Inf produced by any operation.
    pub check_finite: bool,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            max_epochs: 1000,
            patience: 20,
            threshold: 0.5,
            learning_rate: 1e-5,
            check_finite: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Scores,
}

impl fmt::Display for EpochRecord {
    /// `epoch  loss(6dp)  P  R  IoU  F1 (4dp)`, tab separated.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.6}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            self.epoch,
            self.train_loss,
            self.val.precision,
            self.val.recall,
            self.val.iou,
            self.val.f1
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best: Scores,
}

fn batch_tensors(samples: &[&Sample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let inputs: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.input).collect();
    let masks: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.mask).collect();
    Ok((Tensor::stack(&inputs)?, Tensor::stack(&masks)?))
}

/// Pool the confusion counts of thresholded predictions over `samples`.
pub fn evaluate(
    model: &OpUNet<f32>,
    samples: &[Sample],
    threshold: f64,
    batch_size: usize,
) -> Result<ConfusionCounts> {
    let mut counts = ConfusionCounts::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, y) = batch_tensors(&refs)?;
        let pred = threshold_mask(&model.forward(&x)?, threshold)?;
        counts.accumulate(&pred, &y)?;
    }
    Ok(counts)
}

/// Minibatch BCE training with Adam and early stopping on validation F1.
///
/// The train set is reshuffled every epoch from a generator seeded with
/// `tc.seed`; the final partial batch is kept. On return `model` holds the
/// parameters of the best validation epoch. `on_epoch` sees each log record
/// as it is produced.
pub fn train(
    model: &mut OpUNet<f32>,
    train_set: &[Sample],
    val_set: &[Sample],
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    tc.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument(
            "training and validation sets must be nonempty".into(),
        ));
    }
    let names = model.param_names();
    let adam_config = AdamConfig {
        lr: tc.learning_rate,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_config, model.params());
    let mut rng = SplitMix64::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut epochs = Vec::new();
    let mut best: Option<(usize, Scores, Vec<Tensor<f32>>)> = None;
    let mut since_improvement = 0usize;

    for epoch in 1..=tc.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for (bi, idx) in order.chunks(tc.batch_size).enumerate() {
            let refs: Vec<&Sample> = idx.iter().map(|&i| &train_set[i]).collect();
            let (x, y) = batch_tensors(&refs)?;
            let mut tape = Tape::new().with_finite_checks(tc.check_finite);
            let vars = model.bind(&mut tape, true);
            let x = tape.constant(x);
            let prob = model.forward_on(&mut tape, &vars, x)?;
            let loss = tape.bce_loss(prob, &y)?;
            let loss_value = tape.value(loss).data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, batch {}",
                    bi + 1
                )));
            }
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Tensor<f32>> = vars
                .flat()
                .into_iter()
                .zip(model.params())
                .map(|(v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            drop(tape);
            adam.step(&mut model.params_mut(), &grads, &names)?;
            loss_sum += loss_value;
            batches += 1;
        }

        let val = evaluate(model, val_set, tc.threshold, tc.batch_size)?.scores();
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val,
        };
        on_epoch(&record);
        epochs.push(record);

        let improved = best.as_ref().is_none_or(|(_, b, _)| val.f1 > b.f1);
        if improved {
            best = Some((epoch, val, model.params().into_iter().cloned().collect()));
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= tc.patience {
                break;
            }
        }
    }

    let (best_epoch, best_scores, params) = best.expect("at least one epoch ran");
    for (slot, p) in model.params_mut().into_iter().zip(params) {
        *slot = p;
    }
    Ok(TrainOutcome {
        epochs,
        best_epoch,
        best: best_scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar(0.0);
        let mut adam = AdamState::new(
            AdamConfig {
                lr: 1e-3,
                ..Default::default()
            },
            [&p],
        );
        adam.step(&mut [&mut p], &[scalar(1.0)], &["p".into()])
            .unwrap();
        assert!((p.data()[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar(0.7);
        let mut adam = AdamState::new(AdamConfig::default(), [&p]);
        adam.step(&mut [&mut p], &[scalar(0.0)], &["p".into()])
            .unwrap();
        assert_eq!(p.data()[0], 0.7);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut p = scalar(0.0);
        let mut adam = AdamState::new(AdamConfig::default(), [&p]);
        let err = adam
            .step(&mut [&mut p], &[scalar(f64::NAN)], &["enc1.w".into()])
            .unwrap_err();
        assert!(err.to_string().contains("enc1.w"));
        let wrong = Tensor::<f64>::zeros([2]);
        assert!(adam.step(&mut [&mut p], &[wrong], &["p".into()]).is_err());
        assert_eq!(adam.t, 0);
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            patience: 5,
            max_epochs: 3,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn epoch_line_format() {
        let r = EpochRecord {
            epoch: 3,
            train_loss: 0.5,
            val: Scores {
                precision: 0.5,
                recall: 0.25,
                iou: 0.2,
                f1: 1.0 / 3.0,
                degenerate: false,
            },
        };
        assert_eq!(r.to_string(), "3\t0.500000\t0.5000\t0.2500\t0.2000\t0.3333");
    }
}
