//! Physics-informed prediction of shoulder and elbow angles from EMG
//! envelopes, regularized by the two-link equation of motion.

pub mod autodiff;
pub mod data;
pub mod dynamics;
pub mod eval;
pub mod gradcheck;
pub mod network;
pub mod signals;
pub mod training;
