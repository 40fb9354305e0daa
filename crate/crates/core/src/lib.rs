pub mod error;
pub mod tensor;

pub mod layers;
pub mod tokenizer;
pub mod backbone;
pub mod timeflow;
pub mod model;
pub mod data;
pub mod fmt;
pub mod eval;
pub mod checkpoint;
pub mod reference;
pub mod training;

pub use error::{Error, Result};
pub use model::SundialModel;
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/tokenizer.md")]
    mod tokenizer {}
    #[doc = include_str!("../../../book/src/backbone.md")]
    mod backbone {}
    #[doc = include_str!("../../../book/src/flow_matching.md")]
    mod flow_matching {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    mod checkpoints {}
}
