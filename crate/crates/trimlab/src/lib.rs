//! trimlab — a self-contained structured-pruning laboratory.
//!
//! The crate trains small 1-D convolutional audio networks, then repeatedly
//! shrinks them with train → rank → prune → rewind cycles. Three pruning
//! strategies are implemented:
//!
//! * **trim** — structured pruning: whole units (dense rows / conv channels)
//!   are physically deleted, together with their biases, batch-norm
//!   parameters, and downstream input columns, so the model actually gets
//!   smaller and faster;
//! * **mask** — unstructured pruning: individual weights are zeroed and
//!   frozen through a binary mask, leaving shapes unchanged;
//! * **finetune** — classical magnitude pruning: masking without rewinding,
//!   continuing from the trained weights.
//!
//! After each pruning step the surviving weights are rewound to the values
//! they had early in training (the recorded epoch-k snapshot) and the network
//! is retrained from there, which is what lets aggressively pruned networks
//! keep their accuracy.
//!
//! Everything needed to run experiments end to end lives here: a minimal
//! reverse-mode autodiff tape over `f32` tensors ([`tensor`]), sequential
//! model graphs with cost accounting ([`graph`]), a checkpoint codec
//! ([`checkpoint`]), Adam + plateau-scheduled training ([`train`]), the
//! pruning engine ([`lottery`]), three synthetic audio tasks ([`tasks`]),
//! and a sweep harness with CSV reporting ([`sweep`]). [`verify`] bundles
//! the oracle-backed self-checks the CLI exposes as `trimlab verify`.

pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod lottery;
pub mod sweep;
pub mod tasks;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
