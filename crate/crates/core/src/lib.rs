pub mod command;
pub mod crypto;
pub mod engine;
pub mod erasure;
pub mod gf256;
pub mod harness;
pub mod metadata;
pub mod network;
pub mod planner;
pub mod types;
