//! Multi-modal, multi-view collaborative recommendation.
//!
//! Items are embedded from two modalities: a semantic path over item text and
//! a structural path of two graph attention layers over an item graph built
//! from shared knowledge-graph entities. Each user is represented by two
//! self-attention views, one over liked and one over disliked items, and a
//! click is scored as `w1·⟨c, u_prefer⟩ + w2·⟨c, u_dislike⟩`.
//!
//! Everything differentiable runs on the small reverse-mode engine in
//! [`autodiff`].

pub mod aggregate;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kg;
pub mod matrix_io;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod seed;
pub mod semantic;
pub mod structural;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod user;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/item-graph.md")]
    mod item_graph {}
    #[doc = include_str!("../../../book/src/structural.md")]
    mod structural {}
    #[doc = include_str!("../../../book/src/semantic.md")]
    mod semantic {}
    #[doc = include_str!("../../../book/src/users.md")]
    mod users {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/ablation.md")]
    mod ablation {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
