pub mod catalog;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod loss;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod train;
pub mod vision;
