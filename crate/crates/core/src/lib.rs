pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod image;
pub mod mae;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use params::{ParamId, ParamKind, ParamStore};
pub use tensor::{Graph, Tensor, Var};
pub use config::ExperimentConfig;
pub use mae::{MaeConfig, MaeModel, MaskingPlan};
pub use vit::{Preset, VitConfig, VitModel};
