//! The two benchmark systems and the standard regulation problem built on them.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::model::{ControlProblem, InputBox, Normalization, RegulatorFeatures};
use crate::trajectory::{double_integrator, Dynamics, InputCoupledIntegrator};

/// Horizon used throughout the benchmark.
pub const DEFAULT_HORIZON: usize = 10;

/// Input bound `|u| ≤ INPUT_BOUND`.
pub const INPUT_BOUND: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum System {
    /// Double integrator.
    Linear,
    /// Double integrator whose position coupling shrinks with `u²`.
    Nonlinear,
}

impl System {
    pub const ALL: [System; 2] = [System::Linear, System::Nonlinear];

    pub fn name(self) -> &'static str {
        match self {
            System::Linear => "linear",
            System::Nonlinear => "nonlinear",
        }
    }

    pub fn dynamics(self) -> Box<dyn Dynamics> {
        match self {
            System::Linear => Box::new(double_integrator()),
            System::Nonlinear => Box::new(InputCoupledIntegrator),
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "linear" => Ok(System::Linear),
            "nonlinear" => Ok(System::Nonlinear),
            other => Err(Error::InvalidArgument(format!("unknown system {other:?}"))),
        }
    }
}

/// Regulation features with `|u| ≤ 1` over `horizon`.
pub fn standard_problem(system: System, horizon: usize) -> ControlProblem {
    let dynamics = system.dynamics();
    let (n, m) = (dynamics.state_dim(), dynamics.input_dim());
    ControlProblem::new(
        dynamics,
        Box::new(RegulatorFeatures::new(n, m)),
        Box::new(InputBox::symmetric(m, horizon, INPUT_BOUND)),
        horizon,
    )
    .expect("standard problem is consistent")
}

/// Regulation features without input bounds.
pub fn unconstrained_problem(system: System, horizon: usize) -> ControlProblem {
    let dynamics = system.dynamics();
    let (n, m) = (dynamics.state_dim(), dynamics.input_dim());
    ControlProblem::new(
        dynamics,
        Box::new(RegulatorFeatures::new(n, m)),
        Box::new(crate::model::Unconstrained),
        horizon,
    )
    .expect("unconstrained problem is consistent")
}

/// The weights that generate demonstrations: all ones.
pub fn true_theta() -> DVector<f64> {
    DVector::from_element(4, 1.0)
}

/// Pins the input-energy weight to one.
pub fn default_normalization() -> Normalization {
    Normalization::FixedComponent(3)
}
