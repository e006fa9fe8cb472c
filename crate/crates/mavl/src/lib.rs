//! Masked-autoencoder vision-language pre-training at desk scale.
//!
//! The crate bundles everything needed to train and probe the model on a
//! synthetic paired dataset:
//!
//! - [`tensor`]: f64 tensors with reverse-mode autodiff (Wengert tape);
//! - [`data`]: synthetic scene/caption pairs, patchifying, region masks,
//!   token corruption, dataset splits and manifests;
//! - [`model`]: the four sub-networks (masked image encoder, text encoder,
//!   image decoder, fusion learner), projection heads, temperature, and the
//!   momentum (EMA) shadow copies;
//! - [`losses`]: the five training objectives and their unweighted sum;
//! - [`train`]: AdamW, warmup+cosine schedule, the training loop,
//!   checkpointing and metrics;
//! - [`eval`]: retrieval recall, attention statistics, analytic MACs
//!   accounting, and plot-data emission.

pub mod data;
pub mod eval;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod train;
