//! Shared fixtures: gradient-check cases for every op, block, loss and the
//! whole model, plus small deterministic data builders.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dahar::blocks::{
    Fusion, ForwardCtx, Init, MaskBranch, MaskedAttention, Model, ModelConfig, ParamBuilder, ParamStore, ResidualBlock,
    ResidualBlockSpec, ResidualStack, SelfMask,
};
use dahar::data::{generate_samples, Dataset, SceneSpec};
use dahar::losses::{
    bce_loss, mask_loss, mixed_loss, total_loss, weighted_bce_loss, AttributeLabels, Label, LossConfig, OmegaVector,
};
use dahar::tensor::{grad_check, grad_check_sampled, BnMode, Graph, RunningStats, Tensor, Var};
use dahar::Result;

pub const EPS: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero so relu kinks sit far from the probes.
pub fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

pub fn random_labels(rng: &mut ChaCha8Rng, b: usize, c: usize, unknown: f64) -> Vec<AttributeLabels> {
    (0..b)
        .map(|_| {
            AttributeLabels(
                (0..c)
                    .map(|_| {
                        if rng.gen_bool(unknown) {
                            Label::Unknown
                        } else if rng.gen_bool(0.5) {
                            Label::Positive
                        } else {
                            Label::Negative
                        }
                    })
                    .collect(),
            )
        })
        .collect()
}

/// Reduces any output to a scalar through a fixed random projection so
/// every output coordinate carries a distinct weight.
pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut r = rng(seed ^ 0x5eed);
    let w = g.constant(uniform(&mut r, &shape, -1.0, 1.0));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// Grad-checks a parameterised block. Data inputs come first, then every
/// parameter of the block in registration order.
pub fn block_check<B>(
    seed: u64,
    build: impl FnOnce(&mut ParamBuilder<'_, f64>) -> B,
    data: Vec<Tensor<f64>>,
    forward: impl Fn(&B, &mut ForwardCtx<'_, f64>, &[Var]) -> Result<Var>,
    per_input: usize,
) -> Result<f64> {
    let mut store = ParamStore::<f64>::default();
    let mut r = rng(seed);
    let block = {
        let mut pb = ParamBuilder::new(&mut store, &mut r);
        build(&mut pb)
    };
    // Nudge batch-norm affine terms off their identity init.
    let mut jitter = rng(seed ^ 0xb17);
    for p in store.params_mut() {
        if p.name.ends_with(".gamma") || p.name.ends_with(".beta") || p.name.ends_with(".bias") {
            for v in p.value.data_mut() {
                *v += jitter.gen_range(-0.3..0.3);
            }
        }
    }
    let n_data = data.len();
    let mut inputs = data;
    inputs.extend(store.params().iter().map(|p| p.value.clone()));
    let f = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
        let out = {
            let mut ctx = ForwardCtx::with_bindings(g, &store, BnMode::Train, &v[n_data..])?;
            forward(&block, &mut ctx, &v[..n_data])?
        };
        project(g, out, seed)
    };
    grad_check_sampled(f, &inputs, EPS, per_input, seed)
}

pub type GradCase = (&'static str, fn(u64) -> Result<f64>);

fn op_conv(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let stride = 1 + (seed % 2) as usize;
    let inputs = [uniform(&mut r, &[2, 3, 5, 5], -1.0, 1.0), uniform(&mut r, &[4, 3, 3, 3], -0.5, 0.5), uniform(&mut r, &[4], -0.5, 0.5)];
    grad_check(
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, 1)?;
            project(g, y, seed)
        },
        &inputs,
        EPS,
    )
}

fn op_conv_pointwise(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, &[2, 4, 3, 4], -1.0, 1.0), uniform(&mut r, &[3, 4, 1, 1], -0.5, 0.5)];
    grad_check(
        |g, v| {
            let y = g.conv2d(v[0], v[1], None, 1, 0)?;
            project(g, y, seed)
        },
        &inputs,
        EPS,
    )
}

fn op_batch_norm(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, &[3, 2, 3, 3], -2.0, 2.0), uniform(&mut r, &[2], 0.5, 1.5), uniform(&mut r, &[2], -0.5, 0.5)];
    let stats = RunningStats::new(2);
    grad_check(
        |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], &stats, BnMode::Train, 1e-5)?;
            project(g, y, seed)
        },
        &inputs,
        EPS,
    )
}

fn op_batch_norm_eval(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, &[2, 3, 2, 2], -2.0, 2.0), uniform(&mut r, &[3], 0.5, 1.5), uniform(&mut r, &[3], -0.5, 0.5)];
    let stats = RunningStats {
        mean: vec![0.1, -0.2, 0.3],
        var: vec![0.5, 1.5, 2.0],
    };
    grad_check(
        |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], &stats, BnMode::Eval, 1e-5)?;
            project(g, y, seed)
        },
        &inputs,
        EPS,
    )
}

fn op_relu(seed: u64) -> Result<f64> {
    let inputs = [off_zero(&mut rng(seed), &[2, 3, 4])];
    grad_check(
        |g, v| {
            let y = g.relu(v[0]);
            project(g, y, seed)
        },
        &inputs,
        EPS,
    )
}

fn op_sigmoid(seed: u64) -> Result<f64> {
    let inputs = [uniform(&mut rng(seed), &[2, 7], -6.0, 6.0)];
    grad_check(
        |g, v| {
            let y = g.sigmoid(v[0]);
            project(g, y, seed)
        },
        &inputs,
        EPS,
    )
}

fn op_add_mul_scale(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, &[2, 3, 2, 2], -1.0, 1.0), uniform(&mut r, &[2, 3, 2, 2], -1.0, 1.0)];
    grad_check(
        |g, v| {
            let s = g.add(v[0], v[1])?;
            let m = g.mul(s, v[0])?;
            let y = g.scale(m, -1.7);
            project(g, y, seed)
        },
        &inputs,
        EPS,
    )
}

fn op_gate(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, &[2, 3, 3, 2], -1.0, 1.0), uniform(&mut r, &[2, 1, 3, 2], 0.0, 1.0)];
    grad_check(
        |g, v| {
            let y = g.gate(v[0], v[1])?;
            project(g, y, seed)
        },
        &inputs,
        EPS,
    )
}

fn op_sum_mean(seed: u64) -> Result<f64> {
    let inputs = [uniform(&mut rng(seed), &[3, 4], -1.0, 1.0)];
    grad_check(
        |g, v| {
            let sq = g.mul(v[0], v[0])?;
            let s = g.sum(sq);
            let m = g.mean(v[0]);
            let m2 = g.mul(m, m)?;
            let t = g.add(s, m2)?;
            Ok(t)
        },
        &inputs,
        EPS,
    )
}

fn op_resize(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let (h, w) = (r.gen_range(2..7), r.gen_range(2..7));
    let (oh, ow) = (r.gen_range(1..9), r.gen_range(1..9));
    let inputs = [uniform(&mut r, &[2, 2, h, w], -1.0, 1.0)];
    grad_check(
        |g, v| {
            let y = g.resize_bilinear(v[0], oh, ow)?;
            project(g, y, seed)
        },
        &inputs,
        EPS,
    )
}

fn op_global_avg_pool(seed: u64) -> Result<f64> {
    let inputs = [uniform(&mut rng(seed), &[2, 3, 3, 5], -1.0, 1.0)];
    grad_check(
        |g, v| {
            let y = g.global_avg_pool(v[0])?;
            project(g, y, seed)
        },
        &inputs,
        EPS,
    )
}

fn op_linear(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, &[3, 5], -1.0, 1.0), uniform(&mut r, &[4, 5], -1.0, 1.0), uniform(&mut r, &[4], -1.0, 1.0)];
    grad_check(
        |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            project(g, y, seed)
        },
        &inputs,
        EPS,
    )
}

fn op_confidence_pool(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, &[2, 3, 3, 3], -3.0, 3.0), uniform(&mut r, &[2, 4, 3, 3], -1.0, 1.0)];
    grad_check(
        |g, v| {
            let w = g.sigmoid(v[0]);
            let y = g.confidence_pool(w, v[1], 1e-8)?;
            project(g, y, seed)
        },
        &inputs,
        EPS,
    )
}

fn op_attribute_linear(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, &[2, 3, 4], -1.0, 1.0), uniform(&mut r, &[3, 4], -1.0, 1.0), uniform(&mut r, &[3], -1.0, 1.0)];
    grad_check(
        |g, v| {
            let y = g.attribute_linear(v[0], v[1], v[2])?;
            project(g, y, seed)
        },
        &inputs,
        EPS,
    )
}

fn op_bce_with_logits(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let n = 12;
    let inputs = [uniform(&mut r, &[3, 4], -5.0, 5.0)];
    let targets: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
    let pos: Vec<f64> = (0..n).map(|i| if i % 5 == 0 { 0.0 } else { r.gen_range(0.1..3.0) }).collect();
    let neg: Vec<f64> = (0..n).map(|i| if i % 5 == 0 { 0.0 } else { r.gen_range(0.1..3.0) }).collect();
    grad_check(|g, v| g.bce_with_logits(v[0], targets.clone(), pos.clone(), neg.clone(), 3.0), &inputs, EPS)
}

fn block_residual(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let stride = 1 + (seed % 2) as usize;
    let spec = ResidualBlockSpec::bottleneck(4, 8, stride);
    block_check(
        seed,
        |pb| ResidualBlock::build(pb, "res", spec, Init::KaimingFanIn),
        vec![off_zero(&mut r, &[2, 4, 5, 5])],
        |b, ctx, x| b.forward(ctx, x[0]),
        12,
    )
}

fn block_residual_stack(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    block_check(
        seed,
        |pb| ResidualStack::build(pb, "stack", 4, 2, Init::KaimingFanIn),
        vec![off_zero(&mut r, &[2, 4, 3, 3])],
        |b, ctx, x| b.forward(ctx, x[0]),
        8,
    )
}

fn block_self_mask(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    block_check(
        seed,
        |pb| SelfMask::build(pb, "sm", 8, Init::Gaussian(0.5)),
        vec![uniform(&mut r, &[2, 8, 3, 3], -1.0, 1.0)],
        |b, ctx, x| Ok(b.forward(ctx, x[0])?.0),
        16,
    )
}

fn block_fusion(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let taps = vec![
        uniform(&mut r, &[2, 2, 8, 8], -1.0, 1.0),
        uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0),
        uniform(&mut r, &[2, 4, 2, 2], -1.0, 1.0),
    ];
    block_check(
        seed,
        |pb| Fusion::build(pb, "fusion", [2, 3, 4], 4, Init::Gaussian(0.5)),
        taps,
        |b, ctx, x| b.forward(ctx, x),
        8,
    )
}

fn block_mask_branch(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    block_check(
        seed,
        |pb| MaskBranch::build(pb, "mask", 6, 4, Init::Gaussian(0.5)),
        vec![uniform(&mut r, &[2, 6, 3, 3], -1.0, 1.0)],
        |b, ctx, x| b.forward(ctx, x[0]),
        8,
    )
}

fn block_masked_attention(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let with_mask = seed % 4 != 3;
    block_check(
        seed,
        |pb| MaskedAttention::build(pb, "att", 6, 4, 3, with_mask, Init::Gaussian(0.5)),
        vec![uniform(&mut r, &[2, 6, 3, 3], -1.0, 1.0)],
        |b, ctx, x| {
            let out = b.forward(ctx, x[0])?;
            // Exercise both heads of the branch.
            let side = project(ctx.graph, out.side_logits, seed)?;
            match out.seg_logits {
                Some(seg) => {
                    let s = project(ctx.graph, seg, seed + 1)?;
                    ctx.graph.add(side, s)
                }
                None => Ok(side),
            }
        },
        8,
    )
}

fn loss_attribute(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let (b, c) = (3, 5);
    let labels = random_labels(&mut r, b, c, 0.2);
    let omega = OmegaVector::new((0..c).map(|_| r.gen_range(0.05..0.95)).collect())?;
    let ignore = seed % 2 == 0;
    let inputs = [uniform(&mut r, &[b, c], -4.0, 4.0)];
    grad_check(
        |g, v| {
            let a = bce_loss(g, v[0], &labels, ignore)?.loss;
            let w = weighted_bce_loss(g, v[0], &labels, &omega, ignore)?.loss;
            let m = mixed_loss(g, v[0], &labels, &omega, ignore)?.loss;
            let s = g.add(a, w)?;
            g.add(s, m)
        },
        &inputs,
        EPS,
    )
}

fn loss_mask(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let gt = Tensor::from_fn(&[2, 1, 7, 6], |_| if r.gen_bool(0.4) { 1.0 } else { 0.0 });
    let inputs = [uniform(&mut r, &[2, 1, 3, 4], -3.0, 3.0)];
    grad_check(|g, v| mask_loss(g, v[0], &gt), &inputs, EPS)
}

/// A reduced Da-HAR network: every block present, small enough to probe
/// many coordinates.
pub fn small_model_config(attributes: usize) -> ModelConfig {
    let mut cfg = ModelConfig::toy(attributes);
    cfg.stage_blocks = vec![1, 1, 1];
    cfg.stage_widths = vec![4, 8, 8];
    cfg.stem_width = 4;
    cfg.fusion_width = 4;
    cfg.attention_hidden = 4;
    cfg.input_h = 12;
    cfg.input_w = 12;
    cfg
}

/// Total loss of a whole model, checked over images and a random subset of
/// every parameter tensor.
pub fn model_check(cfg: &ModelConfig, seed: u64, batch: usize, per_input: usize) -> Result<f64> {
    let mut r = rng(seed);
    let model = Model::<f64>::build(cfg, &mut r)?;
    let c = cfg.num_attributes;
    let labels = random_labels(&mut r, batch, c, 0.15);
    let gt = Tensor::from_fn(&[batch, 1, cfg.input_h, cfg.input_w], |_| if r.gen_bool(0.3) { 1.0 } else { 0.0 });
    let omega = OmegaVector::new((0..c).map(|_| r.gen_range(0.1..0.9)).collect())?;
    let loss_cfg = LossConfig {
        kind: ["bce", "wbce", "mixed"][(seed % 3) as usize].parse()?,
        ignore_unknown: seed % 2 == 0,
        mask_weight: 0.7,
    };
    let mut inputs = vec![uniform(&mut r, &[batch, 3, cfg.input_h, cfg.input_w], 0.0, 1.0)];
    // Move weights off their init so classifier and gate gradients are not
    // vanishingly small.
    let mut jitter = rng(seed ^ 0x70da1);
    inputs.extend(model.store().params().iter().map(|p| {
        let mut t = p.value.clone();
        for v in t.data_mut() {
            *v += jitter.gen_range(-0.2..0.2);
        }
        t
    }));
    let f = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
        let out = {
            let mut ctx = ForwardCtx::with_bindings(g, model.store(), BnMode::Train, &v[1..])?;
            model.forward(&mut ctx, v[0])?
        };
        Ok(total_loss(g, &out, &labels, Some(&gt), Some(&omega), &loss_cfg)?.0)
    };
    grad_check_sampled(f, &inputs, EPS, per_input, seed)
}

fn model_small(seed: u64) -> Result<f64> {
    let cfg = small_model_config(4);
    model_check(&cfg, seed, 2, 3)
}

fn model_toy(seed: u64) -> Result<f64> {
    let cfg = ModelConfig::toy(14);
    model_check(&cfg, seed, 2, 1)
}

pub const GRAD_CASES: &[GradCase] = &[
    ("op conv2d 3x3", op_conv),
    ("op conv2d 1x1", op_conv_pointwise),
    ("op batch_norm train", op_batch_norm),
    ("op batch_norm eval", op_batch_norm_eval),
    ("op relu", op_relu),
    ("op sigmoid", op_sigmoid),
    ("op add/mul/scale", op_add_mul_scale),
    ("op gate", op_gate),
    ("op sum/mean", op_sum_mean),
    ("op resize_bilinear", op_resize),
    ("op global_avg_pool", op_global_avg_pool),
    ("op linear", op_linear),
    ("op confidence_pool", op_confidence_pool),
    ("op attribute_linear", op_attribute_linear),
    ("op bce_with_logits", op_bce_with_logits),
    ("block residual", block_residual),
    ("block residual stack", block_residual_stack),
    ("block self-mask", block_self_mask),
    ("block fusion", block_fusion),
    ("block mask branch", block_mask_branch),
    ("block masked attention", block_masked_attention),
    ("loss attribute (bce/wbce/mixed)", loss_attribute),
    ("loss mask", loss_mask),
    ("model small Da-HAR + total loss", model_small),
    ("model toy Da-HAR + total loss", model_toy),
];

/// A benchmark-style dataset small enough for unit-speed tests.
pub fn tiny_dataset(count: usize, seed: u64) -> Dataset {
    let spec = SceneSpec::benchmark(4);
    Dataset::from_samples(Some(spec.clone()), generate_samples(&spec, count, seed).unwrap()).unwrap()
}
