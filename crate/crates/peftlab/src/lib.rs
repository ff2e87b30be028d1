//! peftlab: a desk-scale lab for parameter-efficient fine-tuning.
//!
//! Two pipelines share one substrate:
//!
//! * a frozen-vision-encoder VQA model trained with token-level
//!   cross-entropy ([`vqa`]), and
//! * a conditional denoising-diffusion generator adapted through
//!   low-rank adapters only ([`diffusion`] + [`lora`]),
//!
//! both evaluated with the metric suite in [`metrics`] (BLEU, ROUGE-1,
//! ROUGE-L, METEOR for text; Fréchet feature distance, fidelity,
//! agreement, diversity for images). Everything runs on the small
//! reverse-mode tensor engine in [`tensor`]; no GPU, no external
//! weights.

pub mod archive;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod lora;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod testing;
pub mod vqa;

pub use error::{Error, Result};
