//! Prompt embeddings and the text-conditioning cross-attention.

mod embedding;
mod tcm;

pub use embedding::{
    embed_prompts, fnv1a64, load_embeddings, read_prompt_file, test_embedder, write_embeddings,
    EmbeddingSet, TextEmbedding, DEFAULT_PROMPTS,
};
pub use tcm::{tcm_forward, TcmOutput, TcmParams};
