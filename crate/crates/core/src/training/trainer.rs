use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::schedule::cosine_lr;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::{one_hot, total_loss, LossConfig};
use crate::metrics::{compute_metrics, MetricsRecord, MetricsTable};
use crate::network::{predict_mask, ModelConfig, MyGoModel};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};

/// Everything that determines a training run besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Groups with the lowest ids that train; the rest validate.
    pub train_groups: usize,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            lr_max: 1e-4,
            lr_min: 1e-5,
            epochs: 200,
            seed: 0,
            train_groups: 32,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < lr_min ≤ lr_max, got lr_min {} lr_max {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        self.loss.validate()?;
        self.model.validate()
    }

    /// One-line description recorded in checkpoints.
    pub fn run_description(&self) -> String {
        format!(
            "seed={} epochs={} batch={} lr={}..{} focal={} alpha={} gamma={}",
            self.seed,
            self.epochs,
            self.batch_size,
            self.lr_max,
            self.lr_min,
            self.loss.use_focal,
            self.loss.alpha,
            self.loss.gamma
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean batch loss over the epoch, each measured before its update.
    pub train_loss: f64,
    pub val_iou: f64,
    pub val_dice: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: MyGoModel,
    pub log: Vec<EpochRecord>,
    pub final_params: ParamStore,
    /// Parameters after the epoch with the highest validation IoU (first
    /// one on ties).
    pub best_params: ParamStore,
    pub best_epoch: usize,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,val_iou,val_dice";

pub fn log_csv(log: &[EpochRecord]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in log {
        s.push_str(&format!(
            "{},{:e},{:.12e},{:.9},{:.9}\n",
            r.epoch, r.lr, r.train_loss, r.val_iou, r.val_dice
        ));
    }
    s
}

/// `1×H×W` network input for a sample.
pub fn input_of(sample: &Sample) -> Result<Tensor> {
    let s = sample.image.shape();
    sample.image.clone().reshape(vec![1, s[0], s[1]])
}

fn nan_at(epoch: usize, step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::NanLoss { epoch, step },
        other => other,
    }
}

/// Mean loss of `batch` and its gradient in canonical parameter order.
/// One tape per image; gradients are summed in batch order.
pub fn batch_gradient(
    model: &MyGoModel,
    params: &ParamStore,
    batch: &[&Sample],
    loss: &LossConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut sum: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    let mut total = 0.0;
    for s in batch {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let x = tape.constant(input_of(s)?);
        let logits = model.forward(&mut tape, &p, x)?;
        let target = one_hot(&s.mask, model.config.n_classes)?;
        let l = total_loss(&mut tape, logits, &target, loss)?;
        total += tape.value(l).item();
        let grads = tape.backward(l)?;
        for (acc, g) in sum.iter_mut().zip(p.collect_grads(&grads, params)) {
            for (a, g) in acc.iter_mut().zip(g) {
                *a += g;
            }
        }
    }
    let n = batch.len() as f64;
    for g in sum.iter_mut().flatten() {
        *g /= n;
    }
    Ok((total / n, sum))
}

/// Mean loss of `samples` without gradients.
pub fn dataset_loss(
    model: &MyGoModel,
    params: &ParamStore,
    samples: &[Sample],
    loss: &LossConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let mut tape = Tape::new();
        let p = params.bind_constant(&mut tape);
        let x = tape.constant(input_of(s)?);
        let logits = model.forward(&mut tape, &p, x)?;
        let target = one_hot(&s.mask, model.config.n_classes)?;
        let l = total_loss(&mut tape, logits, &target, loss)?;
        total += tape.value(l).item();
    }
    Ok(total / samples.len() as f64)
}

/// Per-image metrics of the model's argmax prediction (lesion = class 1).
pub fn evaluate(
    model: &MyGoModel,
    params: &ParamStore,
    samples: &[Sample],
) -> Result<MetricsTable> {
    let mut table = MetricsTable::default();
    for s in samples {
        let pred = predict_lesion(model, params, s)?;
        table.push(s.id.clone(), compute_metrics(&pred, &s.mask)?);
    }
    Ok(table)
}

/// Binary lesion mask predicted for one sample.
pub fn predict_lesion(model: &MyGoModel, params: &ParamStore, sample: &Sample) -> Result<Tensor> {
    let classes = predict_mask(&model.logits(params, &input_of(sample)?)?)?;
    let data = classes
        .data()
        .iter()
        .map(|&c| if c == 1.0 { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(classes.shape().to_vec(), data)
}

fn mean_metrics(
    model: &MyGoModel,
    params: &ParamStore,
    samples: &[Sample],
) -> Result<MetricsRecord> {
    Ok(evaluate(model, params, samples)?
        .mean()
        .expect("nonempty validation set"))
}

/// Trains a freshly initialized model. An empty `val` validates on `train`.
///
/// Parameters are initialized from `seed`, batches come from a seeded
/// shuffle per epoch, and the learning rate follows [`cosine_lr`] per epoch
/// with `T_max = epochs`.
pub fn train(train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = MyGoModel::new(cfg.model)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = model.init(&mut init_rng)?;
    train_from(model, params, train, val, cfg)
}

/// [`train`] starting from given parameters.
pub fn train_from(
    model: MyGoModel,
    params: ParamStore,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    fit(model, params, train, val, cfg)
}

/// The loop itself; `cfg` is not validated, so tests can freeze the
/// learning rate at zero.
pub(crate) fn fit(
    model: MyGoModel,
    mut params: ParamStore,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let val = if val.is_empty() { train } else { val };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut adam = Adam::new(cfg.adam, &params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let lr = cosine_lr(epoch - 1, cfg.epochs, cfg.lr_max, cfg.lr_min)?;
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let batches = order.chunks(cfg.batch_size);
        let n_batches = batches.len();
        for chunk in batches {
            step += 1;
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) =
                batch_gradient(&model, &params, &batch, &cfg.loss).map_err(nan_at(epoch, step))?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NanLoss { epoch, step });
            }
            loss_sum += loss;
            adam.step(&mut params, &grads, lr)?;
        }
        let m = mean_metrics(&model, &params, val).map_err(nan_at(epoch, step))?;
        log.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / n_batches as f64,
            val_iou: m.iou,
            val_dice: m.dice,
        });
        if best.as_ref().is_none_or(|b| m.iou > b.0) {
            best = Some((m.iou, epoch, params.clone()));
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        log,
        final_params: params,
        best_params,
        best_epoch,
    })
}
