//! Core engine for few-shot micrograph identification: dataset handling,
//! a patch-token encoder trained with a contrastive objective, hard-example
//! mining, embedding retrieval, prompt assembly, a pluggable model gateway,
//! human curation of generated artifacts, and evaluation.

pub mod autodiff;
pub mod blob;
pub mod curation;
pub mod encoder;
pub mod eval;
pub mod gateway;
pub mod index;
pub mod io;
pub mod mining;
pub mod prompts;
pub mod tensor;
pub mod train;
