use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{loss_kind_needs_omega, TrainConfig};
use crate::blocks::{Model, Param};
use crate::data::{augment_train, full_view, resize_chw, Dataset};
use crate::error::{Error, Result};
use crate::losses::{positive_ratios, total_loss, AttributeLabels, LossBreakdown, OmegaVector};
use crate::tensor::{BnMode, Graph, Tensor};

/// SGD with classic momentum; weight decay is added to the gradient:
/// `v ← μ·v + (g + λ·p)`, `p ← p − η·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Updates every parameter that has a gradient; `grads[i]` belongs to
    /// `params[i]`.
    pub fn step(&mut self, lr: f64, params: &mut [Param<f32>], grads: &[Option<&[f32]>]) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        }
        let (mu, wd, lr) = (self.momentum as f32, self.weight_decay as f32, lr as f32);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let Some(g) = g else { continue };
            for ((w, &gi), vi) in p.value.data_mut().iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vi = mu * *vi + gi + wd * *w;
                *w -= lr * *vi;
            }
        }
    }
}

/// Stacks per-sample `[C, H, W]` tensors into `[B, C, H, W]`.
pub fn stack(items: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = items.first().ok_or_else(|| Error::Shape("cannot stack an empty batch".into()))?;
    let inner = first.shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * first.numel());
    for t in items {
        if t.shape() != inner.as_slice() {
            return Err(Error::Shape(format!("batch mixes shapes {:?} and {:?}", inner, t.shape())));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend(inner);
    Tensor::new(&shape, data)
}

/// Append-only text log. Lines are mirrored to `run.log` when the run has an
/// output directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    lines: Vec<String>,
    path: Option<PathBuf>,
}

impl RunLog {
    fn create(path: Option<PathBuf>) -> Result<Self> {
        if let Some(p) = &path {
            fs::write(p, b"")?;
        }
        Ok(RunLog { lines: Vec::new(), path })
    }

    fn push(&mut self, line: String) -> Result<()> {
        if let Some(p) = &self.path {
            let mut f = fs::OpenOptions::new().append(true).open(p)?;
            writeln!(f, "{line}")?;
        }
        self.lines.push(line);
        Ok(())
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn text(&self) -> String {
        self.lines.iter().map(|l| format!("{l}\n")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub mean: LossBreakdown,
    pub wall_ms: u128,
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub log: RunLog,
    pub epochs: Vec<EpochSummary>,
    pub steps: usize,
    /// `latest.ckpt` in the output directory, when there is one.
    pub checkpoint: Option<PathBuf>,
}

/// Network inputs for a batch of samples: images, masks (both at the model
/// input size) and labels.
pub struct Batch {
    pub images: Tensor<f32>,
    pub masks: Tensor<f32>,
    pub labels: Vec<AttributeLabels>,
}

pub fn make_batch(data: &Dataset, indices: &[usize], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let (fh, fw) = cfg.augmentation.final_size;
    let mut images = Vec::with_capacity(indices.len());
    let mut masks = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = &data.samples[i];
        if cfg.augment {
            let a = augment_train(s, &cfg.augmentation, rng);
            images.push(a.image);
            masks.push(a.mask);
        } else {
            images.push(full_view(&s.image, &cfg.augmentation));
            masks.push(resize_chw(&s.mask, fh, fw));
        }
        labels.push(s.labels.clone());
    }
    Ok(Batch {
        images: stack(&images)?,
        masks: stack(&masks)?,
        labels,
    })
}

/// One forward/backward/update on a batch; returns the loss components
/// measured before the update.
pub fn sgd_step(
    model: &mut Model<f32>,
    opt: &mut Sgd,
    batch: &Batch,
    omega: Option<&OmegaVector>,
    cfg: &TrainConfig,
    lr: f64,
    step: usize,
) -> Result<LossBreakdown> {
    let mut g = Graph::<f32>::new().with_nan_guard(false);
    let x = g.constant(batch.images.clone());
    let (out, bindings) = {
        let mut ctx = model.context(&mut g, BnMode::Train, true);
        let out = model.forward(&mut ctx, x)?;
        (out, ctx.finish())
    };
    let (loss, parts) = total_loss(&mut g, &out, &batch.labels, Some(&batch.masks), omega, &cfg.loss)?;
    if !parts.total.is_finite() {
        return Err(Error::Diverged { step });
    }
    g.backward(loss)?;
    let grads: Vec<Option<&[f32]>> = bindings.bound.iter().map(|v| v.and_then(|v| g.grad(v))).collect();
    opt.step(lr, model.store_mut().params_mut(), &grads);
    bindings.apply_stats(model.store_mut());
    Ok(parts)
}

fn fmt_parts(p: &LossBreakdown) -> String {
    format!("loss={:.6} main={:.6} side={:.6} mask={:.6}", p.total, p.main, p.side, p.mask)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Trains with [`TrainConfig`] on `data`. With an output directory, writes
/// `epoch_NNN.ckpt` after every epoch, a `latest.ckpt` copy, and `run.log`.
/// A non-finite loss aborts the run, leaving the last good checkpoint.
pub fn train(cfg: &TrainConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    train_with(cfg, data, out_dir, &mut |_| {})
}

pub fn train_with(
    cfg: &TrainConfig,
    data: &Dataset,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochSummary),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if data.attributes != cfg.model.num_attributes {
        return Err(Error::Config(format!(
            "dataset has {} attributes but num_attributes={}",
            data.attributes, cfg.model.num_attributes
        )));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut log = RunLog::create(out_dir.map(|d| d.join("run.log")))?;
    log.push("# dahar training run".into())?;
    for line in cfg.to_text().lines() {
        log.push(format!("# {line}"))?;
    }
    let ms: Vec<String> = cfg.milestones().iter().map(|m| m.to_string()).collect();
    log.push(format!("# schedule=lr x{} at epochs {}", cfg.lr_gamma, ms.join(",")))?;
    log.push("# eval_crops=five fixed crops, logits averaged before the sigmoid".into())?;
    log.push(format!("# samples={}", data.len()))?;

    let omega = if loss_kind_needs_omega(cfg.loss.kind) {
        let o = positive_ratios(&data.labels())?;
        let s: Vec<String> = o.values().iter().map(|w| format!("{w:.6}")).collect();
        log.push(format!("# omega={}", s.join(",")))?;
        Some(o)
    } else {
        None
    };

    let mut model = Model::<f32>::build_seeded(&cfg.model, cfg.seed)?;
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0usize;
    let mut summaries = Vec::new();
    let mut checkpoint = None;

    'epochs: for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut steps = 0usize;
        let mut stop = false;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                stop = true;
                break;
            }
            let batch = make_batch(data, chunk, cfg, &mut rng)?;
            let parts = match sgd_step(&mut model, &mut opt, &batch, omega.as_ref(), cfg, lr, step + 1) {
                Ok(p) => p,
                Err(e @ Error::Diverged { .. }) => {
                    log.push(format!("diverged step={} epoch={epoch}", step + 1))?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            step += 1;
            steps += 1;
            log.push(format!("step={step} epoch={epoch} lr={lr:.6e} {}", fmt_parts(&parts)))?;
            sum.main += parts.main;
            sum.side += parts.side;
            sum.mask += parts.mask;
            sum.total += parts.total;
        }
        if steps == 0 {
            break;
        }
        if model.store().params().iter().any(|p| !p.value.is_finite()) {
            log.push(format!("diverged step={step} epoch={epoch} non-finite parameters"))?;
            return Err(Error::Diverged { step });
        }
        let n = steps as f64;
        let mean = LossBreakdown {
            main: sum.main / n,
            side: sum.side / n,
            mask: sum.mask / n,
            total: sum.total / n,
            all_ignored: false,
        };
        let wall_ms = if cfg.deterministic { 0 } else { started.elapsed().as_millis() };
        let summary = EpochSummary {
            epoch,
            steps,
            lr,
            mean,
            wall_ms,
        };
        log.push(format!("epoch={epoch} steps={steps} lr={lr:.6e} mean_{} wall_ms={wall_ms}", fmt_parts(&mean)))?;
        if let Some(dir) = out_dir {
            let bytes = model.to_checkpoint_bytes();
            write_atomic(&dir.join(format!("epoch_{epoch:03}.ckpt")), &bytes)?;
            let latest = dir.join("latest.ckpt");
            write_atomic(&latest, &bytes)?;
            checkpoint = Some(latest);
        }
        on_epoch(&summary);
        summaries.push(summary);
        if stop {
            break 'epochs;
        }
    }
    log.push(format!("done steps={step}"))?;
    Ok(TrainOutcome {
        model,
        log,
        epochs: summaries,
        steps: step,
        checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::Param;

    #[test]
    fn weight_decay_only_step() {
        let mut params = vec![Param {
            name: "p".into(),
            value: Tensor::new(&[1], vec![2.0f32]).unwrap(),
        }];
        let mut opt = Sgd::new(0.9, 0.0005);
        let zero = [0.0f32];
        opt.step(0.003, &mut params, &[Some(&zero)]);
        let expected = 2.0f32 * (1.0 - 0.003 * 0.0005);
        assert!((params[0].value.data()[0] - expected).abs() < 1e-7);
    }

    #[test]
    fn momentum_accumulates() {
        let mut params = vec![Param {
            name: "p".into(),
            value: Tensor::new(&[1], vec![0.0f32]).unwrap(),
        }];
        let mut opt = Sgd::new(0.5, 0.0);
        let g = [1.0f32];
        opt.step(1.0, &mut params, &[Some(&g)]);
        opt.step(1.0, &mut params, &[Some(&g)]);
        // v1 = 1, v2 = 1.5
        assert_eq!(params[0].value.data()[0], -2.5);
    }
}
