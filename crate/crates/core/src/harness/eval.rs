use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::train::stack;
use crate::blocks::Model;
use crate::data::{five_crop_eval, full_view, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{metrics_report, MetricsReport, Protocol, ScoreMatrix};
use crate::tensor::{kernels, Tensor};

/// Samples per inference batch.
const EVAL_BATCH: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Mean of the combined logits over the five fixed crops.
    Crops,
    /// The whole image resized to the network input.
    Full,
}

impl EvalMode {
    pub const BOTH: [EvalMode; 2] = [EvalMode::Crops, EvalMode::Full];
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crops" => Ok(EvalMode::Crops),
            "full" => Ok(EvalMode::Full),
            _ => Err(Error::Config(format!("unknown eval mode {s:?} (expected crops or full)"))),
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Crops => "crops",
            EvalMode::Full => "full",
        })
    }
}

/// The evaluation pipeline matching a model's input size: resize by
/// 256/224, crop back to the input size.
pub fn eval_augmentation(model: &Model<f32>) -> AugmentConfig {
    let c = model.config();
    let scale = |v: usize| (v as f64 * 256.0 / 224.0).round() as usize;
    AugmentConfig {
        resize: (scale(c.input_h), scale(c.input_w)),
        crop_sizes: vec![scale(c.input_w)],
        final_size: (c.input_h, c.input_w),
        flip_prob: 0.0,
        jitter: 0.0,
    }
}

/// Combined logits `[N, C]` (row-major) for every sample, in dataset order.
pub fn predict_logits(model: &Model<f32>, data: &Dataset, mode: EvalMode, aug: &AugmentConfig) -> Result<Vec<f32>> {
    let c = model.config().num_attributes;
    if data.attributes != c {
        return Err(Error::Config(format!(
            "checkpoint predicts {c} attributes but the dataset has {}",
            data.attributes
        )));
    }
    let mut out = Vec::with_capacity(data.len() * c);
    for chunk in data.samples.chunks(EVAL_BATCH) {
        match mode {
            EvalMode::Full => {
                let views: Vec<Tensor<f32>> = chunk.iter().map(|s| full_view(&s.image, aug)).collect();
                let (g, o) = model.predict(stack(&views)?)?;
                out.extend_from_slice(g.value(o.combined_logits).data());
            }
            EvalMode::Crops => {
                let crops: Vec<[Tensor<f32>; 5]> = chunk.iter().map(|s| five_crop_eval(&s.image, aug)).collect();
                let mut sum = vec![0f32; chunk.len() * c];
                for k in 0..5 {
                    let views: Vec<Tensor<f32>> = crops.iter().map(|cs| cs[k].clone()).collect();
                    let (g, o) = model.predict(stack(&views)?)?;
                    sum.iter_mut().zip(g.value(o.combined_logits).data()).for_each(|(s, &v)| *s += v);
                }
                out.extend(sum.into_iter().map(|s| s / 5.0));
            }
        }
    }
    Ok(out)
}

pub fn score_matrix(model: &Model<f32>, data: &Dataset, mode: EvalMode, aug: &AugmentConfig) -> Result<ScoreMatrix> {
    let logits = predict_logits(model, data, mode, aug)?;
    let scores = logits.iter().map(|&z| kernels::sigmoid(z as f64)).collect();
    ScoreMatrix::new(scores, data.labels())
}

pub fn evaluate(model: &Model<f32>, data: &Dataset, mode: EvalMode, protocol: Protocol) -> Result<MetricsReport> {
    let m = score_matrix(model, data, mode, &eval_augmentation(model))?;
    metrics_report(&m, protocol)
}

/// Report text with the evaluation mode in its header.
pub fn report_text(report: &MetricsReport, mode: EvalMode) -> String {
    format!("mode={mode}\ncrop_logits=averaged before sigmoid\n{}", report.to_text())
}

pub fn evaluate_checkpoint(ckpt: &Path, data: &Dataset, mode: EvalMode, protocol: Protocol) -> Result<MetricsReport> {
    let model = Model::<f32>::load(ckpt)?;
    evaluate(&model, data, mode, protocol)
}
