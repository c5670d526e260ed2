pub mod data;
pub mod error;
pub mod estimate;
pub mod forest;
pub mod rng;
pub mod stats;
pub mod theory;
pub mod regress;
pub mod sim;
pub(crate) mod par;
