//! Evaluation, per-class expert importance and ablation studies.

use serde::{Deserialize, Serialize};

use crate::embeddings::LabelEmbeddingTable;
use crate::encoders::{RegionId, NUM_REGIONS};
use crate::error::{Error, Result};
use crate::metrics::{sig6, MetricsReport};
use crate::model::{AblationMask, BMoEModel, Inference, ModelConfig, PreparedSample};
use crate::tensor::Real;
use crate::train::{fit, FitLog, TrainConfig};

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub inferences: Vec<Inference>,
}

impl Evaluation {
    pub fn predictions(&self) -> Vec<usize> {
        self.inferences.iter().map(Inference::predicted).collect()
    }
}

pub fn prepare_all<T: Real>(model: &BMoEModel<T>, samples: &[crate::encoders::VideoSample]) -> Result<Vec<PreparedSample<T>>> {
    samples.iter().map(|s| model.prepare(s)).collect()
}

/// Runs inference on every sample and scores it. When fusion weights exist,
/// their per-class means are attached to the report.
pub fn evaluate<T: Real>(model: &BMoEModel<T>, data: &[PreparedSample<T>], mask: &AblationMask) -> Result<Evaluation> {
    let inferences = data.iter().map(|x| model.infer(x, mask)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = data.iter().map(|x| x.label).collect();
    let preds: Vec<usize> = inferences.iter().map(Inference::predicted).collect();
    let mut report = MetricsReport::from_predictions(&labels, &preds, model.num_classes)?;
    if inferences.iter().all(|i| i.weights.is_some()) {
        let map = expert_importance_heatmap(&inferences, &labels, model.num_classes)?;
        report.attention = Some(map.rows.iter().map(|r| r.to_vec()).collect());
    }
    Ok(Evaluation { report, inferences })
}

/// Mean fusion weight per class and region. Rows of classes without
/// samples are NaN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertHeatmap {
    pub rows: Vec<[f64; NUM_REGIONS]>,
    pub counts: Vec<usize>,
}

pub fn expert_importance_heatmap(inferences: &[Inference], labels: &[usize], num_classes: usize) -> Result<ExpertHeatmap> {
    if inferences.len() != labels.len() {
        return Err(Error::dim("expert_importance_heatmap", &[inferences.len()], &[labels.len()]));
    }
    let mut sums = vec![[0.0; NUM_REGIONS]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (inf, &y) in inferences.iter().zip(labels) {
        if y >= num_classes {
            return Err(Error::contract(format!("label {y} out of range")));
        }
        let w = inf
            .weights
            .ok_or_else(|| Error::contract("heatmap needs fusion weights; the model has no routing"))?;
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(w) {
            *s += v;
        }
    }
    let rows = sums
        .iter()
        .zip(&counts)
        .enumerate()
        .map(|(c, (s, &n))| {
            if n == 0 {
                log::warn!("class {c} has no samples; its heatmap row is NaN");
                [f64::NAN; NUM_REGIONS]
            } else {
                s.map(|v| v / n as f64)
            }
        })
        .collect();
    Ok(ExpertHeatmap { rows, counts })
}

impl ExpertHeatmap {
    /// Regions ordered by weight for class `c`, heaviest first.
    pub fn dominant(&self, c: usize) -> Option<RegionId> {
        let row = self.rows.get(c)?;
        if row.iter().any(|v| v.is_nan()) {
            return None;
        }
        RegionId::from_index(crate::nn::argmax(row))
    }

    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut s = String::from("class_id,class_name");
        for r in RegionId::ALL {
            s.push(',');
            s.push_str(r.name());
        }
        s.push('\n');
        for (c, row) in self.rows.iter().enumerate() {
            let name = class_names.get(c).map(String::as_str).unwrap_or("");
            s.push_str(&format!("{c},{name}"));
            for v in row {
                s.push(',');
                s.push_str(&sig6(*v));
            }
            s.push('\n');
        }
        s
    }
}

/// Stream ablation rows: semantic only, motion only, both.
pub fn stream_masks() -> Vec<AblationMask> {
    vec![AblationMask::semantic_only(), AblationMask::motion_only(), AblationMask::all_on()]
}

/// Expert ablation rows: all experts, then each one dropped.
pub fn expert_masks() -> Vec<AblationMask> {
    let mut v = vec![AblationMask::all_on()];
    v.extend(RegionId::ALL.map(AblationMask::without_expert));
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Evaluate one trained model with parts switched off.
    Masking,
    /// Train a fresh model for each configuration.
    Retrain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub mask: AblationMask,
    pub report: MetricsReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitLog>,
}

pub fn run_ablation_masking<T: Real>(
    model: &BMoEModel<T>,
    test: &[PreparedSample<T>],
    masks: &[AblationMask],
) -> Result<Vec<AblationRow>> {
    masks
        .iter()
        .map(|m| {
            Ok(AblationRow {
                label: m.label(),
                mask: *m,
                report: evaluate(model, test, m)?.report,
                fit: None,
            })
        })
        .collect()
}

/// Trains and evaluates a fresh model per mask, with the mask applied in
/// both phases. Samples must have been prepared with `model_cfg`.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation_retrain<T: Real>(
    model_cfg: &ModelConfig,
    class_region_map: &[RegionId],
    channels: usize,
    train: &[PreparedSample<T>],
    test: &[PreparedSample<T>],
    masks: &[AblationMask],
    train_cfg: &TrainConfig,
    embeddings: Option<&LabelEmbeddingTable>,
) -> Result<Vec<AblationRow>> {
    masks
        .iter()
        .map(|m| {
            let mut model = BMoEModel::<T>::new(model_cfg.clone(), class_region_map.to_vec(), channels)?;
            let log = fit(&mut model, train, embeddings, m, train_cfg)?;
            Ok(AblationRow {
                label: m.label(),
                mask: *m,
                report: evaluate(&model, test, m)?.report,
                fit: Some(log),
            })
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("configuration,top1,f1_macro\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.label, sig6(r.report.top1), sig6(r.report.f1_macro)));
    }
    s
}
