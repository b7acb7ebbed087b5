//! Seeded minibatch training loops.
//!
//! Two trainers cover the crate's needs: [`train_classifier`] minimizes
//! plain mean cross-entropy over a pair list (clean models, baseline
//! poisoned models), and [`train_two_term`] minimizes the split poisoning
//! objective whose trojan and clean sums carry `1/(alpha N)` and
//! `1/((1-alpha) N)` weights, which gives the trigger a constant share of
//! every gradient step regardless of how few samples carry it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{PoisonedDataset, TrainPair};
use crate::error::{Error, Result};
use crate::nn::{LabelDist, Model};
use crate::scalar::Scalar;

/// Hyperparameters for one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig<T> {
    pub lr: T,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seed for batch shuffling (weight init has its own seed).
    pub shuffle_seed: u64,
}

/// A trained model plus the mean loss observed in each epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub epoch_losses: Vec<T>,
}

fn validate_config<T: Scalar>(cfg: &TrainConfig<T>) -> Result<()> {
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    if !(cfg.lr >= T::zero()) || !cfg.lr.is_finite() {
        return Err(Error::invalid(format!("learning rate {} invalid", cfg.lr)));
    }
    Ok(())
}

/// Minibatch SGD on mean cross-entropy over `pairs`.
pub fn train_classifier<T: Scalar>(
    layer_dims: &[usize],
    init_seed: u64,
    pairs: &[TrainPair<T>],
    cfg: &TrainConfig<T>,
) -> Result<TrainOutcome<T>> {
    if pairs.is_empty() {
        return Err(Error::invalid("training needs a nonempty pair list"));
    }
    validate_config(cfg)?;
    let mut model = Model::init(layer_dims, init_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = T::zero();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[T], &LabelDist<T>)> = chunk
                .iter()
                .map(|&i| (pairs[i].input.as_slice(), &pairs[i].target))
                .collect();
            loss_sum += model.sgd_step(&batch, cfg.lr)?;
            batches += 1;
        }
        let mean = loss_sum / T::of_usize(batches);
        if !mean.is_finite() || !model.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged at epoch {epoch} (loss {mean})"
            )));
        }
        epoch_losses.push(mean);
    }
    Ok(TrainOutcome {
        model,
        epoch_losses,
    })
}

/// Minimizes the two-term poisoning objective
/// `c_T * mean_T(CE) + c_C * mean_C(CE)` where the trojan mean runs over the
/// triggered copies of the selected samples and the clean mean over the
/// unselected remainder, with `c_T = floor(aN)/(aN)` and
/// `c_C = ceil((1-a)N)/((1-a)N)`.
///
/// Each step pairs half a batch of trojan samples (drawn with replacement
/// when the selection is smaller than the half-batch) with half a batch of
/// clean samples drawn by epoch shuffling.
pub fn train_two_term<T: Scalar>(
    layer_dims: &[usize],
    init_seed: u64,
    poisoned: &PoisonedDataset<T>,
    cfg: &TrainConfig<T>,
) -> Result<TrainOutcome<T>> {
    validate_config(cfg)?;
    let trojan = poisoned.trojan_pairs();
    let clean = poisoned.clean_complement_pairs();
    if trojan.is_empty() || clean.is_empty() {
        return Err(Error::invalid(
            "two-term objective needs both trojan and clean samples",
        ));
    }
    let n = T::of_usize(poisoned.clean().len());
    let alpha = poisoned.alpha();
    let c_t = T::of_usize(trojan.len()) / (alpha * n);
    let c_c = T::of_usize(clean.len()) / ((T::one() - alpha) * n);

    let half = (cfg.batch_size / 2).max(1);
    let mut model = Model::init(layer_dims, init_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut clean_order: Vec<usize> = (0..clean.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        clean_order.shuffle(&mut rng);
        let mut loss_sum = T::zero();
        let mut steps = 0usize;
        for clean_chunk in clean_order.chunks(half) {
            let clean_batch: Vec<(&[T], &LabelDist<T>)> = clean_chunk
                .iter()
                .map(|&i| (clean[i].input.as_slice(), &clean[i].target))
                .collect();
            let trojan_batch: Vec<(&[T], &LabelDist<T>)> = (0..half)
                .map(|_| {
                    let i = rng.gen_range(0..trojan.len());
                    (trojan[i].input.as_slice(), &trojan[i].target)
                })
                .collect();
            let (mut g_t, loss_t) = model.batch_gradients(&trojan_batch)?;
            let (g_c, loss_c) = model.batch_gradients(&clean_batch)?;
            g_t.scale(c_t / c_c);
            // theta -= lr * c_c * (g_c + (c_t/c_c) * g_t), split in two applies.
            model.apply_gradients(&g_t, -cfg.lr * c_c);
            model.apply_gradients(&g_c, -cfg.lr * c_c);
            loss_sum += c_t * loss_t + c_c * loss_c;
            steps += 1;
        }
        let mean = loss_sum / T::of_usize(steps);
        if !mean.is_finite() || !model.is_finite() {
            return Err(Error::Numeric(format!(
                "two-term training diverged at epoch {epoch} (loss {mean})"
            )));
        }
        epoch_losses.push(mean);
    }
    Ok(TrainOutcome {
        model,
        epoch_losses,
    })
}
