//! Mini-batch training loop with Adam.
//!
//! Epochs shuffle deterministically from the configured seed; each batch
//! accumulates gradients of the mean joint loss over its items and applies
//! one bias-corrected Adam update. Background pairs are resampled per image
//! and epoch, also deterministically.

use crate::config::TrainConfig;
use crate::data::SceneInstance;
use crate::model::{joint_loss, ModelError, ModelParams, PairSample};
use crate::tensor::{BoundParams, ParamStore, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-parameter first/second moment accumulators and the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, tc: &TrainConfig) -> AdamState {
        AdamState {
            step: 0,
            learning_rate: tc.learning_rate,
            beta1: tc.beta1,
            beta2: tc.beta2,
            epsilon: tc.epsilon,
            m: store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }

    /// One bias-corrected update. `grads` is laid out like the store;
    /// frozen parameters are left untouched.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        assert_eq!(grads.len(), store.len(), "gradient layout mismatch");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for idx in 0..store.len() {
            let tensor = store.tensor_mut(idx);
            if !tensor.requires_grad {
                continue;
            }
            assert_eq!(grads[idx].len(), tensor.numel(), "gradient shape mismatch");
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for (e, &g) in grads[idx].iter().enumerate() {
                m[e] = self.beta1 * m[e] + (1.0 - self.beta1) * g;
                v[e] = self.beta2 * v[e] + (1.0 - self.beta2) * g * g;
                let m_hat = m[e] / bc1;
                let v_hat = v[e] / bc2;
                tensor.data[e] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Loss curve and the trained parameters.
#[derive(Debug)]
pub struct TrainResult {
    pub params: ModelParams,
    /// Mean joint loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// Mean of the step losses per epoch.
    pub epoch_losses: Vec<f64>,
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
}

/// Computes the mean joint loss and its gradients over a batch of images.
/// Gradients are accumulated into `grads` (zeroed here).
fn batch_pass(
    params: &ModelParams,
    batch: &[(usize, &SceneInstance)],
    samples: &[PairSample],
    grads: &mut [Vec<f64>],
) -> Result<f64, ModelError> {
    for g in grads.iter_mut() {
        g.iter_mut().for_each(|x| *x = 0.0);
    }
    let mut total = 0.0;
    for ((_, instance), sample) in batch.iter().zip(samples) {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&params.store, &mut tape);
        let loss = joint_loss(&mut tape, &bound, &params.config, instance, sample)?;
        let value = tape.scalar_value(loss);
        if !value.is_finite() {
            return Err(ModelError::NonFinite(format!(
                "joint loss on image {}",
                instance.id
            )));
        }
        total += value;
        tape.backward(loss)?;
        bound.accumulate_grads(&tape, grads);
    }
    let scale = 1.0 / batch.len() as f64;
    for g in grads.iter_mut() {
        g.iter_mut().for_each(|x| *x *= scale);
    }
    Ok(total * scale)
}

/// Trains in place over the dataset. `after_epoch` runs once per epoch with
/// the epoch index, current parameters and the step losses so far (used for
/// periodic checkpoints and logging).
pub fn train<F>(
    dataset: &[SceneInstance],
    mut params: ModelParams,
    tc: &TrainConfig,
    mut after_epoch: F,
) -> Result<TrainResult, ModelError>
where
    F: FnMut(usize, &ModelParams, &[f64]) -> Result<(), ModelError>,
{
    assert!(!dataset.is_empty(), "training requires a non-empty dataset");
    let mut adam = AdamState::new(&params.store, tc);
    let mut grads: Vec<Vec<f64>> = params
        .store
        .iter()
        .map(|(_, t)| vec![0.0; t.numel()])
        .collect();
    let mut step_losses = Vec::new();
    let mut epoch_losses = Vec::new();

    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(tc.seed, epoch as u64, 0));
        for k in (1..order.len()).rev() {
            let pick = shuffle_rng.gen_range(0..=k);
            order.swap(k, pick);
        }

        let epoch_start = step_losses.len();
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<(usize, &SceneInstance)> =
                chunk.iter().map(|&i| (i, &dataset[i])).collect();
            let samples: Vec<PairSample> = batch
                .iter()
                .map(|(i, inst)| {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(mix_seed(tc.seed, epoch as u64 + 1, *i as u64));
                    PairSample::subsampled(inst, params.config.bg_sample_ratio, &mut rng)
                })
                .collect();
            let loss = batch_pass(&params, &batch, &samples, &mut grads)?;
            adam.apply(&mut params.store, &grads);
            step_losses.push(loss);
        }
        let epoch_slice = &step_losses[epoch_start..];
        epoch_losses.push(epoch_slice.iter().sum::<f64>() / epoch_slice.len().max(1) as f64);
        after_epoch(epoch, &params, &step_losses)?;
    }

    Ok(TrainResult {
        params,
        step_losses,
        epoch_losses,
    })
}
