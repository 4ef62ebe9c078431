//! Self-supervised learning of split invariant/equivariant image
//! representations, with a cross-attention decoder that reconstructs the
//! second augmented view from both views' equivariant embeddings.

pub mod dataset;
pub mod eval;
pub mod gradcore;
pub mod imageops;
pub mod losses;
pub mod model;
pub mod train;
pub mod views;
