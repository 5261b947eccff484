//! Desk-scale news recommendation with domain-specific post-training and
//! two-stage multi-teacher knowledge distillation.
//!
//! Pipeline: a transformer news encoder is post-trained on a title–body
//! matching task, distilled into a shallow student on the same task, then a
//! set of finetuned teachers jointly guides the student's finetuning on click
//! prediction.

pub mod data;
pub mod distill;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod par;
pub mod posttrain;
pub mod recipes;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
