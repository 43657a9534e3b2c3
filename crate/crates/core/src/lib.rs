pub mod config;
pub mod distributions;
pub mod encoders;
pub mod envs;
pub mod meta;
pub mod nn;
pub mod sac;
pub mod special;
