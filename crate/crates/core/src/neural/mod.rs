//! Numerical substrate: tokenizer, transformer encoder with exact
//! gradients, Adam, token masking, checkpoints and gradient checking.

pub mod adam;
pub mod checkpoint;
pub mod encoder;
pub mod gradcheck;
pub mod linalg;
pub mod masking;
mod params;
mod scalar;
pub mod tokenizer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use encoder::{Encoded, EncoderConfig, EncoderModel};
pub use masking::{mask_sequence, mask_tokens, MaskedSeq, IGNORE_LABEL};
pub use params::{Grads, Param, ParamId, ParamStore};
pub use scalar::Real;
pub use tokenizer::{encode_history, encode_pair, tokenize, EncodedSeq, Vocab};

/// The crate's single random generator type.
pub type Rng = rand_chacha::ChaCha8Rng;
