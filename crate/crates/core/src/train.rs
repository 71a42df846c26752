//! Adam, early stopping and the epoch loop.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_one, sample_seed, AugmentConfig};
use crate::autodiff::Tape;
use crate::data::{one_hot, Sample, DEFAULT_TRAIN_FRACTION};
use crate::error::{Error, Result};
use crate::graph::{
    forward_range, run_on_tape, GraphSpec, TrainablePolicy, WeightStore, DEFAULT_DROPOUT_RATE, DEFAULT_INPUT_SIZE,
};
use crate::metrics::{Averaging, ConfusionMatrix};
use crate::ops::categorical_crossentropy;
use crate::tensor::{Element, Tensor};

const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4531;
const DROPOUT_SALT: u64 = 0x4452_4f50_4f55_5431;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// One bias-corrected Adam update at step `t` (1-based), in place.
pub fn adam_update<T: Element>(theta: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], t: u64, lr: f64, hp: &AdamConfig) {
    let c1 = 1.0 - hp.beta1.powi(t as i32);
    let c2 = 1.0 - hp.beta2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i].to_f64_lossy();
        let mi = hp.beta1 * m[i].to_f64_lossy() + (1.0 - hp.beta1) * g;
        let vi = hp.beta2 * v[i].to_f64_lossy() + (1.0 - hp.beta2) * g * g;
        m[i] = T::from_f64_lossy(mi);
        v[i] = T::from_f64_lossy(vi);
        let step = lr * (mi / c1) / ((vi / c2).sqrt() + hp.epsilon);
        theta[i] = T::from_f64_lossy(theta[i].to_f64_lossy() - step);
    }
}

/// Moments for every parameter that has received a gradient.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub hp: AdamConfig,
    pub t: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamState {
    pub fn new(hp: AdamConfig) -> Self {
        Self {
            hp,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        self.moments.get(name).map(|(m, v)| (m, v))
    }

    /// Apply one step to every parameter in `grads`. Nothing is modified if
    /// any gradient is non-finite, misshapen or targets a frozen parameter.
    pub fn step(&mut self, store: &mut WeightStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let param = store.get(name)?;
            if !store.is_trainable(name) {
                return Err(Error::Graph(format!("gradient supplied for frozen parameter `{name}`")));
            }
            if param.shape() != g.shape() {
                return Err(Error::shape("adam", param.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient of `{name}`"),
                });
            }
        }
        self.t += 1;
        for (name, g) in grads {
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let theta = store.tensor_mut(name)?;
            adam_update(theta.data_mut(), g.data(), m.data_mut(), v.data_mut(), self.t, lr, &self.hp);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct EarlyStopState {
    pub best: Option<f64>,
    pub since_improvement: usize,
}

/// Record `val_loss`; `stop` is set once `patience` epochs pass without
/// `val_loss < best - min_delta`.
pub fn early_stop(state: EarlyStopState, val_loss: f64, patience: usize, min_delta: f64) -> (EarlyStopState, bool) {
    let improved = state.best.is_none_or(|best| val_loss < best - min_delta);
    let next = if improved {
        EarlyStopState {
            best: Some(val_loss),
            since_improvement: 0,
        }
    } else {
        EarlyStopState {
            best: state.best,
            since_improvement: state.since_improvement + 1,
        }
    };
    (next, next.since_improvement >= patience)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub policy: TrainablePolicy,
    pub seed: u64,
    pub input_size: usize,
    pub dropout_rate: f64,
    pub train_fraction: f64,
    pub stratified: bool,
    /// Build batches on the training thread instead of a prefetch worker.
    pub deterministic: bool,
    pub prefetch: usize,
    /// Initial weights; random Glorot initialization when absent.
    pub init_weights: Option<PathBuf>,
    pub adam: AdamConfig,
    pub augmentation: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            batch_size: 32,
            max_epochs: 30,
            patience: 3,
            min_delta: 0.0,
            policy: TrainablePolicy::FullFinetune,
            seed: 0,
            input_size: DEFAULT_INPUT_SIZE,
            dropout_rate: DEFAULT_DROPOUT_RATE,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            stratified: true,
            deterministic: false,
            prefetch: 4,
            init_weights: None,
            adam: AdamConfig::default(),
            augmentation: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.patience == 0 {
            return fail("patience must be at least 1".into());
        }
        if !(self.min_delta.is_finite() && self.min_delta >= 0.0) {
            return fail(format!("min_delta must be non-negative, got {}", self.min_delta));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return fail(format!("train_fraction must lie in [0, 1], got {}", self.train_fraction));
        }
        if self.prefetch == 0 {
            return fail("prefetch must be at least 1".into());
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return fail("adam betas must lie in [0, 1) and epsilon must be positive".into());
        }
        self.augmentation.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub train_precision: f64,
    pub val_precision: f64,
    pub train_recall: f64,
    pub val_recall: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub confusion: ConfusionMatrix,
    pub predictions: Vec<usize>,
    /// `[N, classes]`.
    pub probabilities: Vec<[f32; 3]>,
}

/// Per-sample tensors entering the graph after layer `from`.
struct View<'a> {
    from: usize,
    inputs: Vec<&'a Tensor>,
    labels: Vec<usize>,
}

fn stack_refs(items: &[&Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::invalid("stack", "empty batch"))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.len() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::shape("stack", first.shape(), t.shape()));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data)
}

fn onehot_batch(labels: impl Iterator<Item = usize>) -> Result<Tensor> {
    let rows: Vec<Tensor> = labels.map(one_hot).collect();
    Tensor::stack(&rows)
}

fn evaluate_view(graph: &GraphSpec, weights: &WeightStore, view: &View, batch_size: usize) -> Result<Evaluation> {
    if view.inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    // dropout is inactive here, so the generator is never drawn from
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut loss_sum = 0.0;
    let mut predictions = Vec::with_capacity(view.inputs.len());
    let mut probabilities = Vec::with_capacity(view.inputs.len());
    for (inputs, labels) in view.inputs.chunks(batch_size).zip(view.labels.chunks(batch_size)) {
        let x = stack_refs(inputs)?;
        let probs = forward_range(graph, weights, &x, view.from, graph.output_index(), false, &mut rng)?;
        let onehot = onehot_batch(labels.iter().copied())?;
        let loss = categorical_crossentropy(&probs, &onehot)? as f64;
        loss_sum += loss * labels.len() as f64;
        predictions.extend(probs.argmax_rows());
        probabilities.extend(probs.data().chunks(3).map(|r| [r[0], r[1], r[2]]));
    }
    let loss = loss_sum / view.inputs.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "evaluation loss".into(),
        });
    }
    Ok(Evaluation {
        loss,
        confusion: ConfusionMatrix::new(&predictions, &view.labels)?,
        predictions,
        probabilities,
    })
}

/// Inference-mode loss, confusion matrix and predictions over `samples`.
pub fn evaluate(graph: &GraphSpec, weights: &WeightStore, samples: &[Sample], batch_size: usize) -> Result<Evaluation> {
    let view = View {
        from: 0,
        inputs: samples.iter().map(|s| &s.input).collect(),
        labels: samples.iter().map(|s| s.label).collect(),
    };
    evaluate_view(graph, weights, &view, batch_size.max(1))
}

/// One optimizer step on a batch entering after layer `from`. Returns the
/// batch loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    graph: &GraphSpec,
    weights: &mut WeightStore,
    adam: &mut AdamState,
    from: usize,
    batch: Tensor,
    onehot: Tensor,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let grads = {
        let mut tape = Tape::new();
        let x = tape.leaf(batch, false);
        let probs = run_on_tape(graph, weights, &mut tape, from, x, graph.output_index(), true, true, rng)?;
        let loss = tape.crossentropy(probs, onehot)?;
        let value = tape.value(loss)?.data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: "training loss".into(),
            });
        }
        (tape.backward(loss)?.into_params(), value)
    };
    adam.step(weights, &grads.0, lr)?;
    Ok(grads.1)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitOutcome {
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
    pub steps: u64,
    /// Backbone features were computed once because it is frozen and the
    /// inputs are not augmented.
    pub feature_cache: bool,
}

fn mixed8_features(graph: &GraphSpec, weights: &WeightStore, samples: &[Sample], batch_size: usize) -> Result<Vec<Tensor>> {
    let to = graph.endpoint("mixed8")?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size) {
        let inputs: Vec<&Tensor> = chunk.iter().map(|s| &s.input).collect();
        let feats = forward_range(graph, weights, &stack_refs(&inputs)?, 0, to, false, &mut rng)?;
        for i in 0..chunk.len() {
            let one = feats.batch_slice(i, i + 1)?;
            let shape = one.shape()[1..].to_vec();
            out.push(one.reshape(&shape)?);
        }
    }
    Ok(out)
}

type Batch = Result<(Tensor, Tensor)>;

fn build_batch(view: &View, indices: &[usize], aug: Option<(&AugmentConfig, u64, u64)>) -> Batch {
    let inputs: Vec<Tensor> = match aug {
        Some((cfg, seed, epoch)) => indices
            .par_iter()
            .map(|&i| augment_one(view.inputs[i], cfg, seed, epoch, i as u64).map(|r| r.0))
            .collect::<Result<_>>()?,
        None => indices.iter().map(|&i| view.inputs[i].clone()).collect(),
    };
    let onehot = onehot_batch(indices.iter().map(|&i| view.labels[i]))?;
    Ok((Tensor::stack(&inputs)?, onehot))
}

/// Train `weights` in place. `on_epoch` sees each record as it is appended.
pub fn fit(
    graph: &GraphSpec,
    weights: &mut WeightStore,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<FitOutcome> {
    cfg.validate()?;
    if graph.head().is_none() {
        return Err(Error::Graph("training requires a graph with the classification head".into()));
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if val.is_empty() {
        return Err(Error::Config("validation set is empty; early stopping monitors validation loss".into()));
    }
    let mut outcome = FitOutcome {
        history: Vec::new(),
        stopped_early: false,
        steps: 0,
        feature_cache: cfg.policy == TrainablePolicy::HeadOnly && cfg.augmentation.is_identity(),
    };
    if cfg.max_epochs == 0 {
        return Ok(outcome);
    }
    weights.apply_policy(graph, cfg.policy);

    let cached = if outcome.feature_cache {
        Some((
            mixed8_features(graph, weights, train, cfg.batch_size)?,
            mixed8_features(graph, weights, val, cfg.batch_size)?,
        ))
    } else {
        None
    };
    let (train_view, val_view) = match &cached {
        Some((tf, vf)) => {
            let from = graph.endpoint("mixed8")?;
            (
                View {
                    from,
                    inputs: tf.iter().collect(),
                    labels: train.iter().map(|s| s.label).collect(),
                },
                View {
                    from,
                    inputs: vf.iter().collect(),
                    labels: val.iter().map(|s| s.label).collect(),
                },
            )
        }
        None => (
            View {
                from: 0,
                inputs: train.iter().map(|s| &s.input).collect(),
                labels: train.iter().map(|s| s.label).collect(),
            },
            View {
                from: 0,
                inputs: val.iter().map(|s| &s.input).collect(),
                labels: val.iter().map(|s| s.label).collect(),
            },
        ),
    };
    let augment = !cfg.augmentation.is_identity();

    let mut adam = AdamState::new(cfg.adam.clone());
    let mut stop_state = EarlyStopState::default();
    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_view.inputs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed ^ SHUFFLE_SALT, epoch as u64, 0)));
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let aug = augment.then_some((&cfg.augmentation, cfg.seed, epoch as u64));

        let mut step = |b: usize, batch: Batch, weights: &mut WeightStore| -> Result<()> {
            let (x, y) = batch?;
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed ^ DROPOUT_SALT, epoch as u64, b as u64));
            train_step(graph, weights, &mut adam, train_view.from, x, y, cfg.learning_rate, &mut rng).map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("{context} at epoch {epoch}, batch {}", b + 1),
                },
                other => other,
            })?;
            outcome.steps += 1;
            Ok(())
        };

        if cfg.deterministic {
            for (b, idx) in batches.iter().enumerate() {
                step(b, build_batch(&train_view, idx, aug), weights)?;
            }
        } else {
            std::thread::scope(|scope| -> Result<()> {
                let (tx, rx) = mpsc::sync_channel::<Batch>(cfg.prefetch);
                let view = &train_view;
                let batches = &batches;
                scope.spawn(move || {
                    for idx in batches {
                        if tx.send(build_batch(view, idx, aug)).is_err() {
                            break;
                        }
                    }
                });
                for (b, batch) in rx.iter().enumerate() {
                    step(b, batch, weights)?;
                }
                Ok(())
            })?;
        }

        let tr = evaluate_view(graph, weights, &train_view, cfg.batch_size)?;
        let va = evaluate_view(graph, weights, &val_view, cfg.batch_size)?;
        let (train_precision, train_recall) = tr.confusion.precision_recall(Averaging::Macro);
        let (val_precision, val_recall) = va.confusion.precision_recall(Averaging::Macro);
        let record = EpochRecord {
            epoch,
            train_loss: tr.loss,
            val_loss: va.loss,
            train_accuracy: tr.confusion.accuracy(),
            val_accuracy: va.confusion.accuracy(),
            train_precision,
            val_precision,
            train_recall,
            val_recall,
        };
        on_epoch(&record);
        outcome.history.push(record);

        let (next, stop) = early_stop(stop_state, va.loss, cfg.patience, cfg.min_delta);
        stop_state = next;
        if stop {
            outcome.stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_adam(theta: f64, g: f64, m: f64, v: f64, t: i32) -> (f64, f64, f64) {
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-7f64, 3e-5f64);
        let m = b1 * m + (1.0 - b1) * g;
        let v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t));
        let vhat = v / (1.0 - b2.powi(t));
        (theta - lr * mhat / (vhat.sqrt() + eps), m, v)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let hp = AdamConfig::default();
        let (mut th, mut m, mut v) = ([0.0f64], [0.0], [0.0]);
        adam_update(&mut th, &[0.5], &mut m, &mut v, 1, 3e-5, &hp);
        assert!((th[0] + 3e-5).abs() < 1e-9);
        let (mut th, mut m, mut v) = ([1.5f64], [0.0], [0.0]);
        adam_update(&mut th, &[0.0], &mut m, &mut v, 1, 3e-5, &hp);
        assert_eq!(th[0], 1.5);
    }

    #[test]
    fn two_steps_match_scalar_oracle() {
        let hp = AdamConfig::default();
        let (mut th, mut m, mut v) = ([0.2f64], [0.0], [0.0]);
        let (mut o_th, mut o_m, mut o_v) = (0.2, 0.0, 0.0);
        for t in 1..=2 {
            adam_update(&mut th, &[-1.3], &mut m, &mut v, t, 3e-5, &hp);
            (o_th, o_m, o_v) = scalar_adam(o_th, -1.3, o_m, o_v, t as i32);
            assert!((th[0] - o_th).abs() <= 1e-12);
        }
    }

    #[test]
    fn step_rejects_non_finite_gradient_by_name() {
        let mut store = WeightStore::new();
        store.insert("a", Tensor::zeros(&[2]), true);
        store.insert("b", Tensor::zeros(&[2]), true);
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::ones(&[2]));
        grads.insert("b".to_string(), Tensor::new(vec![2], vec![1.0, f32::NAN]).unwrap());
        let mut adam = AdamState::new(AdamConfig::default());
        match adam.step(&mut store, &grads, 1e-3) {
            Err(Error::NonFinite { context }) => assert!(context.contains("`b`")),
            other => panic!("{other:?}"),
        }
        assert_eq!(adam.t, 0);
        assert!(store.get("a").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_refuses_frozen_parameters() {
        let mut store = WeightStore::new();
        store.insert("frozen", Tensor::zeros(&[1]), false);
        let mut grads = BTreeMap::new();
        grads.insert("frozen".to_string(), Tensor::ones(&[1]));
        assert!(AdamState::default().step(&mut store, &grads, 1e-3).is_err());
    }

    fn trace(losses: &[f64], patience: usize, min_delta: f64) -> Option<usize> {
        let mut state = EarlyStopState::default();
        for (i, &l) in losses.iter().enumerate() {
            let (next, stop) = early_stop(state, l, patience, min_delta);
            state = next;
            if stop {
                return Some(i + 1);
            }
        }
        None
    }

    #[test]
    fn early_stop_traces() {
        assert_eq!(trace(&[1.0, 0.9, 0.95, 0.93, 0.91], 3, 0.0), Some(5));
        assert_eq!(trace(&[1.0, 1.0], 1, 0.0), Some(2));
        assert_eq!(trace(&[5.0, 4.0, 3.0, 2.0, 1.0], 1, 0.0), None);
        assert_eq!(trace(&[1.0, 0.95, 0.9], 2, 0.1), Some(3));
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = TrainConfig::from_toml("").unwrap();
        assert_eq!(cfg.learning_rate, 3e-5);
        assert_eq!(cfg.batch_size, 32);
        let cfg = TrainConfig::from_toml(
            "policy = \"head_only\"\nseed = 4\n[augmentation]\nrotation_max = 5.0\nfill = { constant = -1.0 }\n",
        )
        .unwrap();
        assert_eq!(cfg.policy, TrainablePolicy::HeadOnly);
        assert_eq!(cfg.augmentation.rotation_max, 5.0);
        assert!(TrainConfig::from_toml("batch_size = 0").is_err());
        assert!(TrainConfig::from_toml("learning_rate = -1.0").is_err());
        assert!(TrainConfig::from_toml("unknown = 1").is_err());
    }
}
