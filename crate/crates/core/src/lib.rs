pub mod autodiff;
pub mod encoders;
pub mod graphs;
pub mod harness;
pub mod objective;
pub mod peeling;
pub mod rng;
pub mod stats;
pub mod theory;
pub mod trainer;
