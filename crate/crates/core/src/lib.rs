pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod ctc;
pub mod data;
pub mod diffgraph;
pub mod encoder;
pub mod metrics;
pub mod oracle;
pub mod rng;
pub mod trainer;
