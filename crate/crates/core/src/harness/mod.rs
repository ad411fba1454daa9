//! End-to-end runners: gradient checks, the toy trainer, ablations, the
//! pipeline behind `mova fuse` and the executable property suite.

pub mod gradcheck;
pub mod train;
pub mod ablation;
pub mod pipeline;
pub mod properties;
