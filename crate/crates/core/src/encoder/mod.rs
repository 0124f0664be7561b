//! FT-Transformer feature tokenizer and encoder. Each named input value
//! becomes one token; a shared transformer stack reads the tokens and the
//! final `[CLS]` state is the row representation.

mod registry;
mod transformer;

pub use registry::{
    CategoricalEmbedding, EmbeddingRegistry, EntryKind, NumericEmbedding, RegistryVars, TokenBatch,
};
pub use transformer::{EncoderConfig, EncoderParams, EncoderVars, LayerParams, Mode};

