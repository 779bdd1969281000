//! Variational partial domain adaptation at desk scale.

pub mod data;
pub mod engine;
pub mod eval;
pub mod gradcheck;
pub mod labeling;
pub mod losses;
pub mod math;
pub mod networks;
pub mod tape;
pub mod tensors;
