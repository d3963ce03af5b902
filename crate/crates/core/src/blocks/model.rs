use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention::MaskedAttention;
use super::config::ModelConfig;
use super::fusion::Fusion;
use super::params::{ConvBn, ForwardCtx, Init, Linear, ParamBuilder, ParamStore};
use super::residual::{ResidualBlock, ResidualBlockSpec};
use super::self_mask::SelfMask;
use crate::error::{Error, Result};
use crate::tensor::{read_all, BnMode, Graph, Real, RecordReader, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"DAHAR01";

/// Standard deviation for the distraction-aware blocks and classifier heads.
pub const NOVEL_INIT_STD: f64 = 0.01;

/// Backbone with optional self-mask gates, a global-pool main head, and a
/// side branch (optional multi-level fusion feeding the masked attention
/// head).
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    stem: ConvBn,
    stages: Vec<Vec<ResidualBlock>>,
    self_masks: Vec<Option<SelfMask>>,
    fusion: Option<Fusion>,
    side: Option<MaskedAttention>,
    main_head: Linear,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub main_logits: Var,
    pub side_logits: Option<Var>,
    /// `(main + side) / 2`, or `main` when the side branch is disabled.
    pub combined_logits: Var,
    pub seg_logits: Option<Var>,
    /// `sigmoid(seg_logits)`, the gate applied before attention.
    pub gate: Option<Var>,
    /// One saliency map per self-mask block, in stage order.
    pub saliency_maps: Vec<Var>,
    /// Output of every backbone stage (after its self-mask, if any).
    pub stage_features: Vec<Var>,
}

impl<T: Real> Model<T> {
    pub fn build(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::default();
        let mut pb = ParamBuilder::new(&mut store, rng);
        let backbone = Init::KaimingFanIn;
        let novel = Init::Gaussian(NOVEL_INIT_STD);

        let stem = ConvBn::build(&mut pb, "backbone.stem", 3, cfg.stem_width, cfg.stem_kernel, 2, true, backbone);
        let mut stages = Vec::new();
        let mut cin = cfg.stem_width;
        for (s, (&blocks, &width)) in cfg.stage_blocks.iter().zip(&cfg.stage_widths).enumerate() {
            let mut stage = Vec::new();
            for b in 0..blocks {
                let stride = if b == 0 && s > 0 { 2 } else { 1 };
                let spec = ResidualBlockSpec::bottleneck(cin, width, stride);
                stage.push(ResidualBlock::build(&mut pb, &format!("backbone.stage{s}.block{b}"), spec, backbone));
                cin = width;
            }
            stages.push(stage);
        }

        let self_masks = (0..cfg.num_stages())
            .map(|s| {
                (cfg.enable_self_mask && cfg.self_mask_stages.contains(&s))
                    .then(|| SelfMask::build(&mut pb, &format!("self_mask.stage{s}"), cfg.stage_widths[s], novel))
            })
            .collect();

        let last_width = *cfg.stage_widths.last().expect("validated non-empty");
        let fusion = (cfg.enable_side_branch && cfg.enable_fusion_multilevel).then(|| {
            let taps = cfg.fusion_tap_stages.map(|s| cfg.stage_widths[s]);
            Fusion::build(&mut pb, "fusion", taps, cfg.fusion_width, novel)
        });
        let side_width = if fusion.is_some() { cfg.fusion_width } else { last_width };
        let side = cfg.enable_side_branch.then(|| {
            MaskedAttention::build(
                &mut pb,
                "masked_attention",
                side_width,
                cfg.attention_hidden,
                cfg.num_attributes,
                cfg.enable_masked_attention,
                novel,
            )
        });
        let main_head = pb.linear("main_head", last_width, cfg.num_attributes, novel);

        Ok(Model {
            cfg: cfg.clone(),
            store,
            stem,
            stages,
            self_masks,
            fusion,
            side,
            main_head,
        })
    }

    pub fn build_seeded(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn self_mask_count(&self) -> usize {
        self.self_masks.iter().flatten().count()
    }

    pub fn has_fusion(&self) -> bool {
        self.fusion.is_some()
    }

    pub fn has_attention_gate(&self) -> bool {
        self.side.as_ref().is_some_and(|s| s.mask.is_some())
    }

    pub fn side_branch(&self) -> Option<&MaskedAttention> {
        self.side.as_ref()
    }

    pub fn self_mask(&self, stage: usize) -> Option<&SelfMask> {
        self.self_masks.get(stage).and_then(Option::as_ref)
    }

    /// Exact number of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.store.scalar_count()
    }

    /// Trainable scalars per top-level module (`backbone`, `self_mask`,
    /// `fusion`, `masked_attention`, `main_head`).
    pub fn parameter_breakdown(&self) -> BTreeMap<String, usize> {
        self.store.breakdown()
    }

    pub fn context<'a>(&'a self, graph: &'a mut Graph<T>, mode: BnMode, trainable: bool) -> ForwardCtx<'a, T> {
        ForwardCtx::new(graph, &self.store, mode, trainable)
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<'_, T>, images: Var) -> Result<ModelOutput> {
        let shape = ctx.graph.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != self.cfg.input_h || shape[3] != self.cfg.input_w {
            return Err(Error::Shape(format!(
                "model expects [B, 3, {}, {}] images, got {shape:?}",
                self.cfg.input_h, self.cfg.input_w
            )));
        }
        let mut x = self.stem.forward(ctx, images)?;
        let mut saliency_maps = Vec::new();
        let mut stage_features = Vec::new();
        for (stage, mask) in self.stages.iter().zip(&self.self_masks) {
            for block in stage {
                x = block.forward(ctx, x)?;
            }
            if let Some(sm) = mask {
                let (gated, m) = sm.forward(ctx, x)?;
                x = gated;
                saliency_maps.push(m);
            }
            stage_features.push(x);
        }

        let pooled = ctx.graph.global_avg_pool(x)?;
        let main_logits = self.main_head.forward(ctx, pooled)?;

        let (side_logits, seg_logits, gate) = match &self.side {
            Some(side) => {
                let fused = match &self.fusion {
                    Some(f) => {
                        let taps = self.cfg.fusion_tap_stages.map(|s| stage_features[s]);
                        f.forward(ctx, &taps)?
                    }
                    None => x,
                };
                let out = side.forward(ctx, fused)?;
                (Some(out.side_logits), out.seg_logits, out.gate)
            }
            None => (None, None, None),
        };
        let combined_logits = match side_logits {
            Some(s) => {
                let sum = ctx.graph.add(main_logits, s)?;
                ctx.graph.scale(sum, 0.5)
            }
            None => main_logits,
        };
        Ok(ModelOutput {
            main_logits,
            side_logits,
            combined_logits,
            seg_logits,
            gate,
            saliency_maps,
            stage_features,
        })
    }

    /// Convenience inference pass in eval mode without gradient tracking.
    pub fn predict(&self, images: Tensor<T>) -> Result<(Graph<T>, ModelOutput)> {
        let mut graph = Graph::new();
        let x = graph.constant(images);
        let out = {
            let mut ctx = self.context(&mut graph, BnMode::Eval, false);
            self.forward(&mut ctx, x)?
        };
        Ok((graph, out))
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let text = self.cfg.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let tensors = self.store.named_tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            t.write_record(name, &mut out).expect("writing to a Vec cannot fail");
        }
        out
    }

    pub fn from_checkpoint_bytes(file: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = RecordReader::new(file, bytes);
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::parse(file, 0, "missing DAHAR01 magic"));
        }
        let len = r.u32()? as usize;
        let text_at = r.position();
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::parse(file, text_at, "config is not UTF-8"))?;
        let cfg = ModelConfig::from_text(text).map_err(|e| Error::parse(file, text_at, e.to_string()))?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let at = r.position();
            let (name, t) = Tensor::<T>::read_record(&mut r)?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::parse(file, at, format!("duplicate tensor {name}")));
            }
        }
        if !r.is_empty() {
            return Err(r.error("trailing bytes after the last tensor record"));
        }
        let mut model = Model::build_seeded(&cfg, 0)?;
        model.store.assign(tensors).map_err(|e| Error::parse(file, r.position(), e.to_string()))?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_all(path)?;
        Self::from_checkpoint_bytes(path, &bytes)
    }
}
