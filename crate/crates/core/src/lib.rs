//! Actors, parallel iterators over actors, and reinforcement learning
//! dataflows built from them.

pub mod actor;
pub mod pariter;
pub mod toy_rl;
pub mod metrics;
pub mod ops;
pub mod algorithms;
pub mod oracle;
pub mod bench;
