//! Dirichlet prior networks at desk scale.
//!
//! A small, dependency-light toolkit for training Dirichlet prior networks
//! and plain softmax classifiers with KL-divergence and likelihood losses,
//! generating gradient-based adversarial examples (FGSM/FGM/BIM/MIM and a
//! soft-constraint variant), running adversarial training, and scoring
//! attack/OOD detection with closed-form uncertainty measures.
//!
//! Everything runs on an in-crate reverse-mode autodiff engine over dense
//! f64 tensors ([`graph::Graph`]), and every closed-form quantity is paired
//! with an independent numerical oracle (Monte-Carlo estimators in
//! [`oracle`], central finite differences in [`graph::finite_diff_check`]).

pub mod attacks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod detect;
pub mod dirichlet;
pub mod error;
pub mod graph;
pub mod oracle;
pub mod priornet;
pub mod special;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
