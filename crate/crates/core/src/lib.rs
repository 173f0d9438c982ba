//! Stop-gradient attention for reference-based line-art colorization.
//!
//! The crate bundles a small tape-based autodiff engine, the attention
//! modules, a gradient-conflict measurement toolkit, the training-triple
//! pipeline, the colorization GAN and its evaluation metrics.

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;

pub use attention::{BaselineAttentionParams, Branch, BranchTapHandles, SgaBlockParams, SgaOptions};
pub use autodiff::{BackwardOptions, Graph, Var};
pub use data::{ImageTriple, TpsParams, XDoGParams};
pub use diagnostics::{BranchGradientReport, SpectrumReport};
pub use error::{Error, Result};
pub use model::{TrainingConfig, Variant};
pub use params::{Binding, Ctx, ParamId, ParamStore};
pub use tensor::Tensor;
