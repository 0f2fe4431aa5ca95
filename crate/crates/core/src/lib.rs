//! Feed-forward multi-view geometry estimation with query-based 3D instance
//! segmentation, trained on procedurally generated scenes.

pub mod assign;
pub mod eval;
pub mod fada;
pub mod model;
pub mod numerics;
pub mod recon;
pub mod scenegen;
pub mod train;
