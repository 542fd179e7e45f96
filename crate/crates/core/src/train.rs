//! Expert pretraining and end-to-end training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::{LabelEmbeddingTable, DEFAULT_EMBED_DIM};
use crate::encoders::RegionId;
use crate::error::{Error, Result};
use crate::loss::{combined_loss, cross_entropy, embedding_alignment_loss};
use crate::metrics::MetricsReport;
use crate::model::{AblationMask, BMoEModel, PreparedSample};
use crate::nn::{argmax, Init, Linear, LAYER_NORM_EPS};
use crate::tensor::{ParamId, ParamStore, Real, SgdState, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the label-embedding alignment term during pretraining.
    pub alpha: f64,
    pub learning_rate: f64,
    /// Base rate of the expert pretraining stage.
    pub pretrain_learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Epochs at which the rate is divided by `decay_factor`, stated for a
    /// run of `milestone_reference_epochs` epochs and rescaled to `epochs`.
    pub lr_milestones: Vec<usize>,
    pub milestone_reference_epochs: usize,
    pub decay_factor: f64,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 50.0,
            learning_rate: 0.00125,
            pretrain_learning_rate: 0.00125,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 10,
            lr_milestones: vec![30, 60],
            milestone_reference_epochs: 100,
            decay_factor: 10.0,
            epochs: 100,
            pretrain_epochs: 20,
            embed_dim: DEFAULT_EMBED_DIM,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch size must be positive".to_string());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            problems.push(format!("alpha {} must be finite and non-negative", self.alpha));
        }
        if self.epochs == 0 {
            problems.push("epochs must be at least 1".to_string());
        }
        if self.embed_dim == 0 {
            problems.push("embedding dim must be positive".to_string());
        }
        if let Err(Error::Validation(p)) = self.optimizer::<f64>(self.learning_rate, self.epochs) {
            problems.extend(p);
        }
        if let Err(Error::Validation(p)) = self.optimizer::<f64>(self.pretrain_learning_rate, self.pretrain_epochs) {
            problems.extend(p);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// Milestones rescaled to a run of `epochs` epochs.
    pub fn milestones_for(&self, epochs: usize) -> Vec<usize> {
        if self.milestone_reference_epochs == 0 {
            return self.lr_milestones.clone();
        }
        let r = self.milestone_reference_epochs as f64;
        self.lr_milestones.iter().map(|&m| (m as f64 * epochs as f64 / r).round() as usize).collect()
    }

    pub fn optimizer<T: Real>(&self, learning_rate: f64, epochs: usize) -> Result<SgdState<T>> {
        SgdState::new(
            learning_rate,
            self.momentum,
            self.weight_decay,
            self.milestones_for(epochs),
            self.decay_factor,
        )
    }
}

/// One line of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Accuracy and macro F1 of the predictions made during the epoch.
    pub top1: f64,
    pub f1_macro: f64,
}

/// Runs `epochs` epochs of minibatch SGD over `items`. `sample` records the
/// loss of one item and returns `(loss, prediction, label)`.
#[allow(clippy::too_many_arguments)]
fn sgd_loop<T: Real, F>(
    stores: &mut [&mut ParamStore<T>],
    trainable: &[Vec<ParamId>],
    items: &[usize],
    num_classes: usize,
    cfg: &TrainConfig,
    learning_rate: f64,
    epochs: usize,
    what: &str,
    mut sample: F,
) -> Result<Vec<EpochRecord>>
where
    F: FnMut(&mut Tape<T>, &[&mut ParamStore<T>], usize) -> Result<(Var, usize, usize)>,
{
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::contract(format!("{what}: no training samples")));
    }
    let mut opts = (0..stores.len()).map(|_| cfg.optimizer::<T>(learning_rate, epochs)).collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = items.to_vec();
    let mut log = Vec::with_capacity(epochs);
    let mut tape = Tape::new();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let (mut total, mut truth, mut preds) = (0.0, Vec::new(), Vec::new());
        for batch in order.chunks(cfg.batch_size) {
            stores.iter_mut().for_each(|s| s.reset_grads());
            let inv = T::lit(1.0 / batch.len() as f64);
            for &i in batch {
                tape.clear();
                let (loss, pred, label) = sample(&mut tape, stores, i)?;
                let value = tape.value(loss).item()?.as_f64();
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("{what}: loss at epoch {epoch} sample {i}")));
                }
                let scaled = tape.scale(loss, inv)?;
                let grads = tape.backward(scaled)?;
                for s in stores.iter_mut() {
                    tape.accumulate_into(&grads, s);
                }
                total += value;
                truth.push(label);
                preds.push(pred);
            }
            for ((s, opt), ids) in stores.iter_mut().zip(&mut opts).zip(trainable) {
                opt.step(s, ids, epoch)?;
            }
        }
        let report = MetricsReport::from_predictions(&truth, &preds, num_classes)?;
        let rec = EpochRecord {
            epoch,
            lr: opts[0].lr_at(epoch),
            loss: total / order.len() as f64,
            top1: report.top1,
            f1_macro: report.f1_macro,
        };
        log::info!(
            "{what} epoch {epoch}: lr {:.3e} loss {:.4} top1 {:.3} f1 {:.3}",
            rec.lr,
            rec.loss,
            rec.top1,
            rec.f1_macro
        );
        log.push(rec);
    }
    Ok(log)
}

/// Indices of samples whose class belongs to `region`.
pub fn region_subset<T>(data: &[PreparedSample<T>], class_region_map: &[RegionId], region: RegionId) -> Vec<usize> {
    (0..data.len())
        .filter(|&i| class_region_map.get(data[i].label) == Some(&region))
        .collect()
}

/// `LN(z)/√D`: unit-norm input to the label-embedding projection.
pub fn unit_scale<T: Real>(tape: &mut Tape<T>, z: Var) -> Result<Var> {
    let d = tape.value(z).numel();
    let n = tape.layer_norm(z, T::lit(LAYER_NORM_EPS))?;
    tape.scale(n, T::lit(1.0 / (d as f64).sqrt()))
}

/// Temporary classifier and label-embedding projection used while
/// pretraining one expert; discarded afterwards.
#[derive(Debug)]
pub struct PretrainHead<T> {
    pub store: ParamStore<T>,
    pub classifier: Linear,
    pub projection: Linear,
    /// Global class ids handled by this region, in local-label order.
    pub classes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub region: RegionId,
    pub classes: Vec<usize>,
    pub samples: usize,
    pub log: Vec<EpochRecord>,
}

/// Trains the semantic encoder and the `region` expert on that region's
/// classes with `L_cls + α·L_emb`. Every other model parameter is untouched.
pub fn pretrain_expert<T: Real>(
    model: &mut BMoEModel<T>,
    data: &[PreparedSample<T>],
    region: RegionId,
    embeddings: &LabelEmbeddingTable,
    cfg: &TrainConfig,
) -> Result<(PretrainReport, PretrainHead<T>)> {
    if model.expert(region).is_none() {
        return Err(Error::contract(format!("model has no {region} expert")));
    }
    if embeddings.vectors.len() != model.num_classes {
        return Err(Error::dim("label embeddings", &[embeddings.vectors.len()], &[model.num_classes]));
    }
    let classes: Vec<usize> = (0..model.num_classes).filter(|&c| model.class_region_map[c] == region).collect();
    if classes.is_empty() {
        return Err(Error::contract(format!("region {region} has no classes to pretrain on")));
    }
    let items = region_subset(data, &model.class_region_map, region);
    let mut local = vec![usize::MAX; model.num_classes];
    for (j, &c) in classes.iter().enumerate() {
        local[c] = j;
    }
    let d = model.cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x9e37_79b9 + region.index() as u64));
    let mut aux = ParamStore::new();
    let classifier = Linear::new(&mut aux, "classifier", d, classes.len(), Init::Scaled(1.0), &mut rng)?;
    let projection = Linear::new(&mut aux, "projection", d, embeddings.dim, Init::Zeros, &mut rng)?;
    let targets: Vec<Tensor<T>> = embeddings
        .vectors
        .iter()
        .map(|v| Tensor::from_f64(&[1, v.len()], v))
        .collect::<Result<_>>()?;

    let mut model_ids = model.semantic_params();
    model_ids.extend(model.expert_params(region));
    let aux_ids: Vec<ParamId> = aux.ids().collect();
    let trainable = vec![model_ids, aux_ids];
    let view = model.clone_structure();
    let alpha = cfg.alpha;
    let log = sgd_loop(
        &mut [&mut model.store, &mut aux],
        &trainable,
        &items,
        classes.len(),
        cfg,
        cfg.pretrain_learning_rate,
        cfg.pretrain_epochs,
        &format!("pretrain {region}"),
        |tape, stores, i| {
            let x = &data[i];
            let z = view.expert_embedding_with(tape, stores[0], x, region)?;
            let logits = classifier.forward(tape, stores[1], z)?;
            let label = local[x.label];
            let l_cls = cross_entropy(tape, logits, label)?;
            let unit = unit_scale(tape, z)?;
            let xz = projection.forward(tape, stores[1], unit)?;
            let xq = tape.constant(targets[x.label].clone());
            let l_emb = embedding_alignment_loss(tape, xz, xq)?;
            let loss = combined_loss(tape, l_cls, l_emb, alpha)?;
            let pred = argmax(tape.value(logits).data());
            Ok((loss, pred, label))
        },
    )?;
    Ok((
        PretrainReport {
            region,
            classes: classes.clone(),
            samples: items.len(),
            log,
        },
        PretrainHead {
            store: aux,
            classifier,
            projection,
            classes,
        },
    ))
}

/// Trains every parameter on classification loss under `mask`.
pub fn train_end_to_end<T: Real>(
    model: &mut BMoEModel<T>,
    data: &[PreparedSample<T>],
    mask: &AblationMask,
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    mask.validate()?;
    if let Some(x) = data.iter().find(|x| x.label >= model.num_classes) {
        return Err(Error::contract(format!("label {} out of range", x.label)));
    }
    let items: Vec<usize> = (0..data.len()).collect();
    let trainable = vec![model.store.ids().collect::<Vec<_>>()];
    let view = model.clone_structure();
    let num_classes = model.num_classes;
    sgd_loop(
        &mut [&mut model.store],
        &trainable,
        &items,
        num_classes,
        cfg,
        cfg.learning_rate,
        cfg.epochs,
        "train",
        |tape, stores, i| {
            let x = &data[i];
            let out = view.forward_with(tape, stores[0], x, mask)?;
            let loss = cross_entropy(tape, out.logits, x.label)?;
            Ok((loss, argmax(tape.value(out.logits).data()), x.label))
        },
    )
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitLog {
    pub pretrain: Vec<PretrainReport>,
    pub train: Vec<EpochRecord>,
}

/// Pretrains each enabled expert that has classes (when `embeddings` is
/// given and the semantic stream is on), then trains end to end.
pub fn fit<T: Real>(
    model: &mut BMoEModel<T>,
    data: &[PreparedSample<T>],
    embeddings: Option<&LabelEmbeddingTable>,
    mask: &AblationMask,
    cfg: &TrainConfig,
) -> Result<FitLog> {
    let mut log = FitLog::default();
    if let (Some(emb), true) = (embeddings, mask.use_semantic && cfg.pretrain_epochs > 0) {
        for r in RegionId::ALL {
            if !mask.enabled(r) || model.expert(r).is_none() {
                continue;
            }
            if !model.class_region_map.contains(&r) {
                log::warn!("skipping pretraining of {r}: no classes");
                continue;
            }
            log.pretrain.push(pretrain_expert(model, data, r, emb, cfg)?.0);
        }
    }
    log.train = train_end_to_end(model, data, mask, cfg)?;
    Ok(log)
}
