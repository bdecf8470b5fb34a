//! Trajectory planning, pose filtering and receding-horizon navigation inside
//! volumetric radiance fields.

pub mod autodiff;
pub mod baselines;
pub mod estimator;
pub mod experiments;
pub mod exec;
pub mod field;
pub mod dynamics;
pub mod geom;
pub mod planner;
pub mod plot;
pub mod render;
pub mod scenes;
pub mod seed;
pub mod sim;

pub use exec::ExecPolicy;
