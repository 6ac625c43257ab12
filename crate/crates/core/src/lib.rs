//! Coverage laboratory: a relational-network actor-critic that steers
//! rectangular sensor views so as to capture as many moving bounding-box
//! objects as possible, together with the simulator, baselines, trainer and
//! attribution tools around it.

pub mod agent;
pub mod analysis;
pub mod baselines;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod nn;
pub mod observation;
pub mod parallel;
pub mod render;
pub mod replay;
pub mod sim;
pub mod trace;
pub mod trainer;

pub use error::{Error, Result};
