pub mod bench;
pub mod eval;
pub mod fixture;
pub mod manifest;
pub mod metrics;
