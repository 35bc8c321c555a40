//! Noisy demonstrations of the optimal controller.
//!
//! A demonstration draws `z0 ~ N(0, I)`, solves the controller for the true
//! inputs `V*`, and observes `U ~ N(V*, σ_u² I)` and `x0 ~ N(z0, σ₀² I)`.
//! Randomness comes from ChaCha8 seeded with the 64-bit seed, so a seed
//! reproduces the same demonstration on every platform.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{solve_forward, SolverOptions};
use crate::model::ControlProblem;
use crate::systems::{standard_problem, System};

pub(crate) mod dvec {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

/// What an estimator is allowed to see.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    #[serde(with = "dvec")]
    pub inputs: DVector<f64>,
    #[serde(with = "dvec")]
    pub x0: DVector<f64>,
}

/// Hidden ground truth, kept for evaluation only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    #[serde(with = "dvec")]
    pub z0: DVector<f64>,
    #[serde(with = "dvec")]
    pub inputs: DVector<f64>,
    #[serde(with = "dvec")]
    pub theta: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub system: System,
    pub horizon: usize,
    pub sigma_u: f64,
    pub sigma_0: f64,
    pub seed: u64,
    pub observation: Observation,
    pub truth: Truth,
    /// Whether the forward solve behind `truth.inputs` converged.
    pub converged: bool,
}

impl Demonstration {
    pub fn problem(&self) -> ControlProblem {
        standard_problem(self.system, self.horizon)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let demo: Self = serde_json::from_str(text)?;
        let problem = demo.problem();
        if demo.observation.inputs.len() != problem.input_len()
            || demo.truth.inputs.len() != problem.input_len()
            || demo.observation.x0.len() != problem.state_dim()
            || demo.truth.z0.len() != problem.state_dim()
            || demo.truth.theta.len() != problem.num_features()
        {
            return Err(Error::Dimension(
                "demonstration does not match its system and horizon".into(),
            ));
        }
        Ok(demo)
    }
}

fn normals(rng: &mut ChaCha8Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| StandardNormal.sample(rng))
}

/// Draws one demonstration of the standard problem for `system`.
pub fn sample_demonstration(
    system: System,
    theta: &DVector<f64>,
    sigma_u: f64,
    sigma_0: f64,
    seed: u64,
    horizon: usize,
    opts: &SolverOptions,
) -> Result<Demonstration> {
    if !(sigma_u >= 0.0 && sigma_0 >= 0.0 && sigma_u.is_finite() && sigma_0.is_finite()) {
        return Err(Error::InvalidArgument(
            "noise levels must be finite and non-negative".into(),
        ));
    }
    let problem = standard_problem(system, horizon);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z0 = normals(&mut rng, problem.state_dim());
    let solution = solve_forward(&problem, theta, &z0, opts)?;
    let input_noise = normals(&mut rng, problem.input_len());
    let state_noise = normals(&mut rng, problem.state_dim());
    Ok(Demonstration {
        system,
        horizon,
        sigma_u,
        sigma_0,
        seed,
        observation: Observation {
            inputs: &solution.inputs + input_noise * sigma_u,
            x0: &z0 + state_noise * sigma_0,
        },
        truth: Truth {
            z0,
            inputs: solution.inputs,
            theta: theta.clone(),
        },
        converged: solution.report.converged,
    })
}
