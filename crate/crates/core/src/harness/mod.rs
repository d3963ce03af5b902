//! Training, evaluation, the ablation matrix and mask inspection.

mod ablate;
mod config;
mod eval;
mod inspect;
mod train;

pub use ablate::{ablate, ablate_rows, sha256_hex, AblationCell, AblationRow, AblationTable, ABLATION_ROWS};
pub use config::{TrainConfig, CONFIG_KEYS_HELP, DETERMINISTIC_ENV};
pub use eval::{eval_augmentation, evaluate, evaluate_checkpoint, predict_logits, report_text, score_matrix, EvalMode};
pub use inspect::{gate_localization, inspect, inspect_maps, InspectMaps};
pub use train::{make_batch, sgd_step, stack, train, train_with, Batch, EpochSummary, RunLog, Sgd, TrainOutcome};
