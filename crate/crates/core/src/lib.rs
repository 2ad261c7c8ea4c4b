//! Physics-informed estimation of a time-varying suppression rate in a
//! tumour / T-cell / MDSC / gemcitabine model.
//!
//! Two small networks are trained jointly: one maps time to the four
//! state variables, the other maps time to the MDSC suppression rate
//! `s_MT(t)`. Training balances an ODE residual, a total-volume data fit,
//! an initial-composition anchor and histology anchors with learned
//! homoscedastic weights.

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod interp;
pub mod io;
pub mod losses;
pub mod neural;
pub mod ode;
pub mod trainer;

pub use error::{Error, Result};
pub use interp::{augment, fit_spline, normalize, DataPoint, Normalizer, ObservationSet, SplineCurve};
pub use losses::{BcScaling, ConstraintSpec, LossBreakdown};
pub use neural::{Activation, Network, NetworkConfig, TrainableScalar};
pub use ode::{
    rhs, solve_rk4, synthesize_observations, Agent, DosingSchedule, Injection, ParamSet,
    RateProfile, SystemState, Trajectory,
};
