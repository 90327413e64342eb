//! Continuous interactive knowledge learning engine: a growing triple store,
//! an online DistMult model, per-symbol performance and threshold buffers,
//! and a dialogue session that asks users for supporting facts when the
//! query involves unknown or poorly learned symbols.

pub mod checkpoint;
pub mod decision;
pub mod eval;
pub mod kb;
pub mod model;
pub mod par;
pub mod session;
pub mod sim;
pub mod wordnet;
