use std::path::{Path, PathBuf};

use super::eval::eval_augmentation;
use crate::blocks::{median_binarize, Model};
use crate::data::{full_view, resize_chw, write_pgm, Dataset, SyntheticSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Upsamples a `[1, 1, h, w]` map to `[1, H, W]`.
fn to_plane(map: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let [b, c, mh, mw] = map.dims4()?;
    if b != 1 || c != 1 {
        return Err(Error::Shape(format!("expected a single-map tensor, got {:?}", map.shape())));
    }
    let plane = Tensor::new(&[1, mh, mw], map.data().to_vec())?;
    Ok(resize_chw(&plane, h, w))
}

/// Per-sample maps at input resolution: self-mask saliency maps in stage
/// order, the attention gate, the median-binarized middle fusion tap, and
/// the ground-truth mask.
pub struct InspectMaps {
    pub saliency: Vec<Tensor<f32>>,
    /// All zeros when the model has no mask branch.
    pub gate: Tensor<f32>,
    pub median: Tensor<f32>,
    pub gt_mask: Tensor<f32>,
}

pub fn inspect_maps(model: &Model<f32>, sample: &SyntheticSample) -> Result<InspectMaps> {
    let aug = eval_augmentation(model);
    let (h, w) = aug.final_size;
    let input = full_view(&sample.image, &aug);
    let (g, out) = model.predict(input.reshape(&[1, 3, h, w])?)?;
    let saliency = out
        .saliency_maps
        .iter()
        .map(|&m| to_plane(g.value(m), h, w))
        .collect::<Result<_>>()?;
    let gate = match out.gate {
        Some(v) => to_plane(g.value(v), h, w)?,
        None => Tensor::zeros(&[1, h, w]),
    };
    let tap = model.config().fusion_tap_stages[1];
    let median = to_plane(&median_binarize(g.value(out.stage_features[tap]))?, h, w)?;
    let gt_mask = resize_chw(&sample.mask, h, w);
    Ok(InspectMaps {
        saliency,
        gate,
        median,
        gt_mask,
    })
}

/// Writes `saliency_<k>.pgm` per self-mask block, `gate.pgm`, `median.pgm`
/// and `gt_mask.pgm`; values in (0, 1) map linearly onto 0..255.
pub fn inspect(model: &Model<f32>, sample: &SyntheticSample, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let maps = inspect_maps(model, sample)?;
    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    let mut emit = |name: String, t: &Tensor<f32>| -> Result<()> {
        let p = out_dir.join(name);
        write_pgm(&p, t)?;
        files.push(p);
        Ok(())
    };
    for (k, s) in maps.saliency.iter().enumerate() {
        emit(format!("saliency_{k}.pgm"), s)?;
    }
    emit("gate.pgm".into(), &maps.gate)?;
    emit("median.pgm".into(), &maps.median)?;
    emit("gt_mask.pgm".into(), &maps.gt_mask)?;
    Ok(files)
}

/// Mean gate value inside and outside the ground-truth mask (binarized at
/// 0.5), each averaged over samples.
pub fn gate_localization(model: &Model<f32>, data: &Dataset) -> Result<(f64, f64)> {
    if !model.has_attention_gate() {
        return Err(Error::Config("model has no attention gate".into()));
    }
    let (mut inside, mut outside, mut n) = (0.0, 0.0, 0usize);
    for s in &data.samples {
        let maps = inspect_maps(model, s)?;
        let (mut si, mut ci, mut so, mut co) = (0.0, 0usize, 0.0, 0usize);
        for (&g, &m) in maps.gate.data().iter().zip(maps.gt_mask.data()) {
            if m >= 0.5 {
                si += g as f64;
                ci += 1;
            } else {
                so += g as f64;
                co += 1;
            }
        }
        if ci > 0 && co > 0 {
            inside += si / ci as f64;
            outside += so / co as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Config("no sample has both mask and background pixels".into()));
    }
    Ok((inside / n as f64, outside / n as f64))
}
