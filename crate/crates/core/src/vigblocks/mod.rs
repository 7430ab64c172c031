//! LogViG building blocks, model assembly and cost accounting.

pub mod blocks;
pub mod config;
pub mod model;
pub mod mrconv;

pub use config::{GrapherKind, ModelConfig, RelativeSign, StageDepth, Variant};
pub use model::{count_gmacs, param_grad_check, summarize, ForwardOutput, Model, ModelSummary, Stage};
pub use mrconv::{fold_tensor, lsgc_schedule, max_relative, mrconv, mrconv_lsgc, mrconv_svga, svga_schedule, MrConvOutput};
