pub mod cost;
pub mod error;
pub mod exec;
pub mod fdp;
pub mod partition;
pub mod ps;
pub mod rng;
pub mod scenario;
pub mod sig;
pub mod sim;
pub mod workload;
