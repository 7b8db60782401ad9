//! Desk-scale unified multimodal model built on selective state-space blocks:
//! chunked and recurrent SSD execution, task-routed LoRA adapters, decoupled
//! text and image vocabularies, staged training and a matched attention
//! baseline.

pub mod attention;
pub mod autograd;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod infer;
pub mod lora;
pub mod model;
pub mod params;
pub mod real;
pub mod runconfig;
pub mod sequence;
pub mod ssm;
pub mod tensor;
pub mod toy;
pub mod train;
pub mod vocab;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use infer::{DecodeSession, EvalReport};
pub use lora::TaskRoute;
pub use model::{ExecMode, Model};
pub use params::{FreezeGroup, ParamStore};
pub use runconfig::RunConfig;
pub use ssm::LayerState;
pub use tensor::Mat;
pub use train::{Stage, StageConfig};
pub use vocab::{GenerationConfig, HeadKind, SampleMode, SpecialToken, Token};
