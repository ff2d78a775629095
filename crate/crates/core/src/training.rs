//! Minibatch Adam training with early stopping, and adaptation that updates
//! only a model's designated tunable tensors.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::features::{extract_features, model_input, FeatureCache, FeatureConfig};
use crate::model::{CountModel, Dropout};
use crate::nn::{Adam, AdamConfig, Mat};
use crate::objectives::{loss_and_grad, LossKind, OrdinalForm};
use crate::seed::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    /// Stop as soon as the stopping-set error falls to this value.
    pub target_error: Option<f64>,
    pub seed: u64,
    pub loss: LossKind,
    pub ordinal_form: OrdinalForm,
    /// Held-out share of the training data used for early stopping.
    pub val_fraction: f64,
    /// Held-out share of an adaptation set used for early stopping.
    pub adapt_val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            dropout_rate: 0.5,
            early_stop_patience: 10,
            max_epochs: 200,
            max_steps: None,
            target_error: None,
            seed: 0,
            loss: LossKind::Ordinal,
            ordinal_form: OrdinalForm::Euclidean,
            val_fraction: 0.1,
            adapt_val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("lr must be > 0");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must be in [0, 1)");
        }
        if self.batch_size < 1 || self.early_stop_patience < 1 || self.max_epochs < 1 {
            return bad("batch_size, early_stop_patience and max_epochs must be >= 1");
        }
        if !(0.0..1.0).contains(&self.val_fraction) || !(0.0..1.0).contains(&self.adapt_val_fraction) {
            return bad("validation fractions must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam betas must be in [0, 1) and eps > 0");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// One training example: model-ready features plus the target count.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub speaker_id: String,
    pub count: u32,
    pub features: Mat,
}

/// Extracts (or fetches from `cache`) features for each utterance, in order.
pub fn load_samples(utterances: &[&Utterance], config: &FeatureConfig, cache: Option<&FeatureCache>) -> Result<Vec<Sample>> {
    utterances
        .par_iter()
        .map(|u| {
            let fm = match cache {
                Some(c) => c.get(u)?,
                None => {
                    let mut fm = extract_features(&crate::audio::read_wav(&u.audio_path)?, config)?;
                    fm.utterance_id = u.id.clone();
                    fm
                }
            };
            Ok(Sample {
                id: u.id.clone(),
                speaker_id: u.speaker_id.clone(),
                count: u.syllable_count,
                features: model_input(&fm, config),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    /// Relative count error (fraction, not %) on the stopping set.
    pub val_error: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
    MaxSteps,
    TargetReached,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_error: f64,
    pub stop: StopReason,
    /// Seconds spent per epoch. Not reproducible, so kept apart from the records.
    pub wall_clock_s: Vec<f64>,
}

impl PartialEq for TrainLog {
    fn eq(&self, other: &Self) -> bool {
        self.epochs == other.epochs
            && self.best_epoch == other.best_epoch
            && self.best_val_error == other.best_val_error
            && self.stop == other.stop
    }
}

/// Relative count error of the decoded predictions, as a fraction.
pub fn count_error<M: CountModel>(model: &M, samples: &[Sample]) -> Result<f64> {
    let errs: Vec<f64> = samples
        .par_iter()
        .map(|s| Ok((model.predict_count(&s.features)? - s.count as f64).abs() / s.count as f64))
        .collect::<Result<_>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Splits off roughly `fraction` of the samples for validation, keeping whole
/// speakers on one side when that does not overshoot the target by more than 2x.
pub fn split_train_val(samples: Vec<Sample>, fraction: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let wanted = (fraction * samples.len() as f64).round() as usize;
    if wanted == 0 || samples.len() < 2 {
        return (samples, Vec::new());
    }
    let mut by_speaker: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_speaker.entry(s.speaker_id.clone()).or_default().push(i);
    }
    let mut speakers: Vec<&Vec<usize>> = by_speaker.values().collect();
    speakers.shuffle(&mut rng_for(seed, "train/val-speakers"));
    let mut val_idx: Vec<usize> = Vec::new();
    for group in &speakers[..speakers.len() - 1] {
        if val_idx.len() >= wanted {
            break;
        }
        if val_idx.len() + group.len() <= 2 * wanted {
            val_idx.extend(group.iter());
        }
    }
    if val_idx.len() < wanted.div_ceil(2) {
        let mut all: Vec<usize> = (0..samples.len()).collect();
        all.shuffle(&mut rng_for(seed, "train/val-utterances"));
        val_idx = all[..wanted.min(samples.len() - 1)].to_vec();
    }
    let mut is_val = vec![false; samples.len()];
    val_idx.iter().for_each(|&i| is_val[i] = true);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (s, v) in samples.into_iter().zip(is_val) {
        if v {
            val.push(s)
        } else {
            train.push(s)
        }
    }
    (train, val)
}

/// Called with the parameters and record of every new best epoch.
pub type BestHook<'a, M> = &'a mut dyn FnMut(&M, &EpochRecord) -> Result<()>;

struct Fit<'a> {
    trainable: Vec<bool>,
    tunable_only: bool,
    purpose: &'a str,
}

fn fit<M: CountModel>(
    params: M,
    train: &[Sample],
    stop_set: &[Sample],
    config: &TrainConfig,
    how: Fit<'_>,
    mut on_best: Option<BestHook<'_, M>>,
) -> Result<(M, TrainLog)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    if !config.loss.compatible_with(params.head()) {
        return Err(Error::Config(format!(
            "loss {:?} cannot train a {:?} head",
            config.loss,
            params.head()
        )));
    }
    let stop_set = if stop_set.is_empty() { train } else { stop_set };
    let rank = params.head().rank();
    let mut model = params;
    let mut adam = Adam::new(&model, config.adam());
    let mut order_rng = rng_for(config.seed, &format!("{}/order", how.purpose));
    let mut drop_rng = rng_for(config.seed, &format!("{}/dropout", how.purpose));

    let mut best = model.clone();
    let mut best_error = count_error(&model, stop_set)?;
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    let mut wall_clock_s = Vec::new();
    let mut steps = 0;
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        let mut hit_step_limit = false;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch_label = || {
                let ids: Vec<&str> = chunk.iter().map(|&i| train[i].id.as_str()).collect();
                format!("epoch {epoch} batch {b} ({})", ids.join(", "))
            };
            let mut fwd = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let dropout = Dropout {
                    rng: &mut drop_rng,
                    rate: config.dropout_rate,
                };
                let out = model.forward_tape(&train[i].features, Some(dropout)).map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("{m} in {}", batch_label())),
                    other => other,
                })?;
                fwd.push(out);
            }
            let finals: Vec<&[f64]> = fwd.iter().map(|(t, _)| t.final_estimate()).collect();
            let targets: Vec<u32> = chunk.iter().map(|&i| train[i].count).collect();
            let (loss, d_final) = loss_and_grad(config.loss, config.ordinal_form, &finals, &targets, rank)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss in {}", batch_label())));
            }
            let parts: Vec<M> = fwd
                .par_iter()
                .zip(&d_final)
                .map(|((_, tape), d)| model.backward(tape, d, how.tunable_only))
                .collect();
            // summed in batch order so the result does not depend on scheduling
            let mut grad = parts[0].clone();
            parts[1..].iter().for_each(|g| grad.add_assign(g));
            if let Some(name) = grad.first_non_finite() {
                return Err(Error::NonFinite(format!("gradient of {name} in {}", batch_label())));
            }
            adam.step(&mut model, &grad, &how.trainable);
            loss_sum += loss;
            batches += 1;
            steps += 1;
            if config.max_steps.is_some_and(|m| steps >= m) {
                hit_step_limit = true;
                break;
            }
        }
        let val_error = count_error(&model, stop_set)?;
        let record = EpochRecord {
            epoch,
            steps,
            train_loss: loss_sum / batches as f64,
            val_error,
        };
        log::debug!(
            "{} epoch {epoch}: loss {:.5} stop-set error {:.4}",
            how.purpose,
            record.train_loss,
            val_error
        );
        if val_error < best_error {
            best_error = val_error;
            best_epoch = epoch;
            best = model.clone();
            if let Some(hook) = on_best.as_mut() {
                hook(&best, &record)?;
            }
        }
        epochs.push(record);
        wall_clock_s.push(started.elapsed().as_secs_f64());
        if hit_step_limit {
            stop = StopReason::MaxSteps;
            break;
        }
        if config.target_error.is_some_and(|t| val_error <= t) {
            stop = StopReason::TargetReached;
            break;
        }
        if epoch - best_epoch >= config.early_stop_patience {
            stop = StopReason::EarlyStop;
            break;
        }
    }
    Ok((
        best,
        TrainLog {
            epochs,
            best_epoch,
            best_val_error: best_error,
            stop,
            wall_clock_s,
        },
    ))
}

/// Trains every tensor. Early stopping uses `val` (or the training set when
/// `val` is empty); the returned parameters are those of the best epoch, or
/// the initial parameters if no epoch improved on them.
pub fn train<M: CountModel>(
    params: M,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
    on_best: Option<BestHook<'_, M>>,
) -> Result<(M, TrainLog)> {
    let n = params.tensors().len();
    let how = Fit {
        trainable: vec![true; n],
        tunable_only: false,
        purpose: "train",
    };
    fit(params, train, val, config, how, on_best)
}

/// Retrains only the tensors flagged by `adaptation_mask`; all other tensors
/// are returned bit-identical. Early stopping holds out `adapt_val_fraction`
/// of the set, except for sets under 5 utterances which stop on training error.
pub fn adapt<M: CountModel>(params: &M, set: &[Sample], config: &TrainConfig) -> Result<(M, TrainLog)> {
    if set.is_empty() {
        return Err(Error::InvalidInput("adaptation set is empty".into()));
    }
    let (fit_set, stop_set): (Vec<Sample>, Vec<Sample>) = if set.len() < 5 {
        log::warn!(
            "adaptation set has {} utterances; stopping on training error instead of a held-out split",
            set.len()
        );
        (set.to_vec(), Vec::new())
    } else {
        let mut idx: Vec<usize> = (0..set.len()).collect();
        idx.shuffle(&mut rng_for(config.seed, "adapt/split"));
        let n_val = ((config.adapt_val_fraction * set.len() as f64).round() as usize).clamp(1, set.len() - 1);
        let val = idx[..n_val].iter().map(|&i| set[i].clone()).collect();
        let fit = idx[n_val..].iter().map(|&i| set[i].clone()).collect();
        (fit, val)
    };
    let how = Fit {
        trainable: params.adaptation_mask(),
        tunable_only: true,
        purpose: "adapt",
    };
    fit(params.clone(), &fit_set, &stop_set, config, how, None)
}
