//! Network building blocks: the bottleneck backbone, the self-mask gate, the
//! multi-level fusion block, the masked attention head, and model assembly.

mod attention;
mod config;
mod fusion;
mod model;
mod params;
mod probe;
mod residual;
mod self_mask;

pub use attention::{AttentionOutput, MaskBranch, MaskedAttention, ATTENTION_EPS};
pub use config::{parse_key_values, ModelConfig};
pub use fusion::Fusion;
pub use model::{Model, ModelOutput, CHECKPOINT_MAGIC, NOVEL_INIT_STD};
pub use params::{
    BatchNorm2d, Bindings, Conv2d, ConvBn, ForwardCtx, Init, Linear, Param, ParamBuilder, ParamId, ParamStore, StatsId,
    BN_EPS,
};
pub use probe::median_binarize;
pub use residual::{ResidualBlock, ResidualBlockSpec, ResidualStack};
pub use self_mask::SelfMask;
