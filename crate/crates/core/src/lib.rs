pub mod autodiff;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod region_encoder;
pub mod semantic_query;
pub mod rng;
pub mod su_bank;
pub mod tensor;
pub mod text_embed;
pub mod train;
pub mod video_decoder;

pub use autodiff::{AttnMask, Tape, Var};
pub use error::{AsuError, Result};
pub use tensor::{ParamStore, Parameter, Real, Tensor};
