pub mod attack;
pub mod channel;
pub mod defense;
mod ckpt;
pub mod codec;
pub mod metrics;
pub mod nn;
pub mod seed;
pub mod types;
