//! Preference fine-tuning of a tiny multimodal policy against textual and
//! noise-triggered hallucinations, on a synthetic object-grid world.

pub mod checkpoint;
pub mod dispref;
pub mod error;
pub mod evalsuite;
pub mod lexicon;
pub mod noiser;
pub mod objective;
pub mod pipeline;
pub mod policy;
pub mod rng;
pub mod scenegen;
pub mod tensor;
pub mod trainer;
