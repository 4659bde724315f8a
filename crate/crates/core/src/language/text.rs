use candle_core::{Device, Tensor, Var};

use super::vocab::{TokenSequence, EOS};
use crate::error::{Error, Result};
use crate::nn::{Init, Linear, ParamStore};

/// Sentence encoder `E_T`: one feature vector per token sequence.
pub trait TextEncoder: Send + Sync {
    fn width(&self) -> usize;
    /// `(N, width)` for `N` sequences.
    fn encode(&self, sequences: &[TokenSequence]) -> Result<Tensor>;
}

/// Mean of token embeddings over the words of a sentence (the end-of-sentence
/// embedding alone for an empty sentence).
#[derive(Clone, Debug)]
pub struct MeanEmbeddingEncoder {
    pub table: Var,
}

impl MeanEmbeddingEncoder {
    pub fn new(store: &mut ParamStore, vocab_size: usize, width: usize) -> Result<Self> {
        Ok(MeanEmbeddingEncoder { table: store.get_or_init("text.encoder.embedding", &[vocab_size, width], Init::Normal(1.0))? })
    }
}

impl TextEncoder for MeanEmbeddingEncoder {
    fn width(&self) -> usize {
        self.table.dims()[1]
    }

    fn encode(&self, sequences: &[TokenSequence]) -> Result<Tensor> {
        let vocab = self.table.dims()[0];
        let mut pool = vec![0f64; sequences.len() * vocab];
        for (i, s) in sequences.iter().enumerate() {
            let words = s.words();
            let ids: &[u32] = if words.is_empty() { &[EOS] } else { words };
            for &id in ids {
                if id as usize >= vocab {
                    return Err(Error::shape(format!("token id {id} outside a vocabulary of {vocab}")));
                }
                pool[i * vocab + id as usize] += 1.0 / ids.len() as f64;
            }
        }
        let pool = Tensor::from_vec(pool, (sequences.len(), vocab), &Device::Cpu)?.to_dtype(self.table.dtype())?;
        Ok(pool.matmul(self.table.as_tensor())?)
    }
}

/// `E_I2T` and `E_T2T`, both into the shared text space of width `d_t`.
#[derive(Clone, Debug)]
pub struct TextSpace {
    pub image_to_text: Linear,
    pub text_to_text: Linear,
}

impl TextSpace {
    pub fn new(store: &mut ParamStore, embed_width: usize, encoder_width: usize, text_width: usize) -> Result<Self> {
        Ok(TextSpace {
            image_to_text: Linear::new(store, "text.i2t", embed_width, text_width, true)?,
            text_to_text: Linear::new(store, "text.t2t", encoder_width, text_width, true)?,
        })
    }

    pub fn width(&self) -> usize {
        self.image_to_text.out_dim()
    }

    /// `v_T = E_I2T(v_I)`.
    pub fn image_features(&self, v_i: &Tensor) -> Result<Tensor> {
        self.image_to_text.forward(v_i)
    }

    /// `u_T = E_T2T(E_T(x_T))`, `(N, d_t)`.
    pub fn text_encode(&self, encoder: &dyn TextEncoder, sequences: &[TokenSequence]) -> Result<Tensor> {
        self.text_to_text.forward(&encoder.encode(sequences)?)
    }
}
