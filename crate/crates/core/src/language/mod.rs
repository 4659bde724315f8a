//! Tokenization, the pseudo-self-attention decoder, text-space embedders and
//! the sentence-level losses.

pub mod decoder;
pub mod loss;
pub mod text;
pub mod vocab;

pub use decoder::{pseudo_self_attention, Decoder, PsaParams};
pub use loss::{llm_alignment_loss, sentence_ce_loss};
pub use text::{MeanEmbeddingEncoder, TextEncoder, TextSpace};
pub use vocab::{detokenize, normalize, tokenize, TokenSequence, Vocabulary, BOS, EOS, PAD, UNK};
