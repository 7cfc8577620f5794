//! Label-free user adaptation for gaze estimation.

pub mod adapt;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod engine;
pub mod error;
pub mod jigsaw;
pub mod losses;
pub mod network;
pub mod seed;
pub mod synthworld;
pub mod tensor;
