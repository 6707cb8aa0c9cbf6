pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod finetune;
pub mod image;
pub mod losses;
pub mod meta;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod seed;
pub mod synth;
