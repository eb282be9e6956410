//! Multimodal simultaneous neural machine translation at desk scale:
//! a wait-k prefix-to-prefix GRU encoder-decoder with hierarchical
//! text+image attention fusion, trained with Adam, plus the
//! evaluation apparatus (BLEU, Average Lagging, paired bootstrap
//! significance, congruent/incongruent image evaluation, and
//! entity-before-input analysis).

pub mod data;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod policy;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use policy::Policy;
pub use tensor::{Precision, Real, Tape, Tensor, Var};
