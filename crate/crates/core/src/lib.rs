pub mod autodiff;
pub mod encoders;
pub mod evalkit;
pub mod losses;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod synthdata;
