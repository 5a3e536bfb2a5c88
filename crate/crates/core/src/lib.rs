pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod evaluate;
pub mod experiments;
pub mod losses;
pub mod membank;
pub mod metrics;
pub mod mining;
pub mod numkernel;
pub mod real;
pub mod train;
