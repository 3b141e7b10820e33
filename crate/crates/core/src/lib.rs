pub mod embedding;
pub mod error;
pub mod numeric;
pub mod pca;
pub mod rng;
pub mod scaling;
pub mod task;
pub mod learners;
pub mod optim;
pub mod glmm;
pub mod choice;
pub mod policy;
pub mod rsa;
pub mod stats;
pub mod simulator;
