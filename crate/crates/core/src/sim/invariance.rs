//! Empirical forward-invariance check of a barrier under a hostile controller.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cbf::{
    cbf_constraint, eval_barrier, eval_with_gradient, parse_barrier, ConstraintError, EvalError, Expr, IntegratorPlant,
    Params, PlantModel,
};
use crate::safety::{validate_spec, BarrierSpec, SafetyFilter, SpecViolation};

/// Plants available to the check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlantKind {
    /// `ẋ[0..m] = u`, remaining states constant; `None` actuates every state.
    SingleIntegrator { actuated: Option<usize> },
}

impl FromStr for PlantKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (name, m) = match s.split_once(':') {
            Some((n, m)) => (n, Some(m.parse::<usize>().map_err(|_| format!("bad control dimension `{m}`"))?)),
            None => (s, None),
        };
        match (name, m) {
            ("single-integrator", Some(0)) => Err("control dimension must be positive".into()),
            ("single-integrator", actuated) => Ok(PlantKind::SingleIntegrator { actuated }),
            _ => Err(format!("unknown plant `{s}`; expected single-integrator[:M]")),
        }
    }
}

impl PlantKind {
    fn build(self, n: usize) -> Result<IntegratorPlant, InvarianceError> {
        match self {
            PlantKind::SingleIntegrator { actuated } => {
                let m = actuated.unwrap_or(n);
                if m > n {
                    return Err(InvarianceError::Plant(format!("cannot actuate {m} of {n} states")));
                }
                IntegratorPlant::actuating(n, (0..m).collect()).map_err(InvarianceError::Plant)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvarianceConfig {
    pub plant: PlantKind,
    pub trials: usize,
    /// Seconds per trial.
    pub duration: f64,
    /// Control rate in Hz.
    pub rate: f64,
    pub seed: u64,
    pub filter: bool,
    /// Magnitude of the hostile nominal command.
    pub speed: f64,
    /// Initial states are drawn from `[-box_half_width, box_half_width]^n`.
    pub box_half_width: f64,
    /// Initial states satisfy `h ≥ initial_margin`.
    pub initial_margin: f64,
    /// A trial passes iff its minimum `h` is at least this.
    pub tolerance: f64,
}

impl Default for InvarianceConfig {
    fn default() -> Self {
        InvarianceConfig {
            plant: PlantKind::SingleIntegrator { actuated: None },
            trials: 100,
            duration: 30.0,
            rate: 100.0,
            seed: 0,
            filter: true,
            speed: 1.0,
            box_half_width: 5.0,
            initial_margin: 0.1,
            tolerance: -1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub initial_state: Vec<f64>,
    pub min_h: f64,
    /// Tick at which `min_h` was reached.
    pub min_tick: u64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub barrier: String,
    pub filter: bool,
    pub trials: Vec<TrialReport>,
    pub min_h: f64,
    /// Trials whose minimum `h` went below zero.
    pub violations: usize,
    /// Every trial stayed above the tolerance.
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InvarianceError {
    #[error("invalid spec: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Spec(Vec<SpecViolation>),
    #[error("{0}")]
    Plant(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("relative-degree violation at the initial state of trial {trial}: |g(x)ᵀ∇h(x)| = {norm:e}")]
    RelativeDegree { trial: usize, norm: f64 },
    #[error("trial {trial}: {error}")]
    Constraint { trial: usize, error: ConstraintError },
    #[error("no initial state with h ≥ {margin} found in {attempts} samples")]
    Sampling { margin: f64, attempts: usize },
    #[error("trial {trial}: {error}")]
    Eval { trial: usize, error: EvalError },
}

const SAMPLE_ATTEMPTS: usize = 100_000;

/// Run `config.trials` closed-loop trials of the barrier in `spec` (with
/// `params` overriding its defaults). The nominal command
/// `u = -speed · a/‖a‖`, `a = g(x)ᵀ∇h(x)`, descends `h` as fast as possible.
pub fn check_invariance(
    spec: &BarrierSpec,
    params: &Params,
    config: &InvarianceConfig,
) -> Result<InvarianceReport, InvarianceError> {
    validate_spec(spec).map_err(InvarianceError::Spec)?;
    let positive = |v: f64| v > 0.0 && v.is_finite();
    if !positive(config.duration) || !positive(config.rate) || !(config.speed >= 0.0 && config.speed.is_finite()) {
        return Err(InvarianceError::Config("duration and rate must be positive, speed non-negative".into()));
    }
    let mut bound = spec.defaults();
    for (k, v) in params {
        if spec.param(k).is_none() {
            return Err(InvarianceError::Config(format!("parameter `{k}` is not declared by the spec")));
        }
        bound.insert(k.clone(), *v);
    }
    if let Some(p) = spec.param_schema.iter().find(|p| !bound.contains_key(&p.name)) {
        return Err(InvarianceError::Config(format!("missing parameter `{}`", p.name)));
    }
    let expr = parse_barrier(&spec.expression).expect("validated");
    let plant = config.plant.build(spec.state_dim)?;
    let filter = SafetyFilter::new(plant.control_dim(), vec![], vec![], None).expect("no barriers to check");
    let dt = 1.0 / config.rate;
    let steps = (config.duration * config.rate).round() as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut trials = Vec::with_capacity(config.trials);
    for trial in 0..config.trials {
        let x0 = sample_state(&expr, &bound, spec.state_dim, config, &mut rng)?;
        match cbf_constraint(&expr, &x0, &bound, &plant, spec.alpha_gain) {
            Err(ConstraintError::RelativeDegree { norm, .. }) => {
                return Err(InvarianceError::RelativeDegree { trial, norm })
            }
            Err(error) => return Err(InvarianceError::Constraint { trial, error }),
            Ok(_) => {}
        }
        let mut x = x0.clone();
        let mut min_h = f64::INFINITY;
        let mut min_tick = 0;
        for tick in 0..=steps {
            let h = eval_barrier(&expr, &x, &bound).map_err(|error| InvarianceError::Eval { trial, error })?;
            if h < min_h {
                min_h = h;
                min_tick = tick;
            }
            if tick == steps {
                break;
            }
            let u = step_command(&expr, &x, &bound, &plant, spec.alpha_gain, config, &filter)
                .map_err(|error| InvarianceError::Constraint { trial, error })?;
            x = plant.euler_step(&x, &u, dt);
        }
        trials.push(TrialReport { trial, initial_state: x0, min_h, min_tick, passed: min_h >= config.tolerance });
    }
    let min_h = trials.iter().map(|t| t.min_h).fold(f64::INFINITY, f64::min);
    Ok(InvarianceReport {
        barrier: spec.id(),
        filter: config.filter,
        violations: trials.iter().filter(|t| t.min_h < 0.0).count(),
        passed: trials.iter().all(|t| t.passed),
        min_h,
        trials,
    })
}

fn sample_state(
    expr: &Expr,
    params: &Params,
    n: usize,
    config: &InvarianceConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, InvarianceError> {
    let w = config.box_half_width;
    for _ in 0..SAMPLE_ATTEMPTS {
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-w..=w)).collect();
        if eval_barrier(expr, &x, params).is_ok_and(|h| h >= config.initial_margin) {
            return Ok(x);
        }
    }
    Err(InvarianceError::Sampling { margin: config.initial_margin, attempts: SAMPLE_ATTEMPTS })
}

fn step_command(
    expr: &Expr,
    x: &[f64],
    params: &Params,
    plant: &IntegratorPlant,
    gain: f64,
    config: &InvarianceConfig,
    filter: &SafetyFilter,
) -> Result<Vec<f64>, ConstraintError> {
    let m = plant.control_dim();
    let (_, grad) = eval_with_gradient(expr, x, params)?;
    let a: Vec<f64> = plant.actuated().iter().map(|&i| grad[i]).collect();
    let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let u_nom: Vec<f64> = if norm > 0.0 { a.iter().map(|v| -config.speed * v / norm).collect() } else { vec![0.0; m] };
    if !config.filter {
        return Ok(u_nom);
    }
    let constraint = match cbf_constraint(expr, x, params, plant, gain) {
        Ok(c) => c,
        // no authority over h: hold still
        Err(ConstraintError::RelativeDegree { .. }) => return Ok(vec![0.0; m]),
        Err(e) => return Err(e),
    };
    Ok(match filter.solve(&u_nom, vec![(String::new(), constraint)]) {
        Ok(out) => out.u_safe,
        Err(_) => vec![0.0; m],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::safety::builtin_spec;

    fn quick(filter: bool) -> InvarianceConfig {
        InvarianceConfig {
            plant: "single-integrator:2".parse().unwrap(),
            trials: 10,
            duration: 15.0,
            rate: 50.0,
            seed: 11,
            filter,
            ..InvarianceConfig::default()
        }
    }

    #[test]
    fn plant_names() {
        assert_eq!("single-integrator".parse::<PlantKind>(), Ok(PlantKind::SingleIntegrator { actuated: None }));
        assert!("double-integrator".parse::<PlantKind>().is_err());
        assert!("single-integrator:x".parse::<PlantKind>().is_err());
        assert!("single-integrator:0".parse::<PlantKind>().is_err());
    }

    #[test]
    fn filter_keeps_human_distance_invariant() {
        let spec = builtin_spec("human_distance").unwrap();
        let safe = check_invariance(&spec, &Params::new(), &quick(true)).unwrap();
        assert!(safe.passed, "{:?}", safe.min_h);
        assert_eq!(safe.violations, 0);
        let unsafe_ = check_invariance(&spec, &Params::new(), &quick(false)).unwrap();
        assert!(!unsafe_.passed);
        assert_eq!(unsafe_.violations, 10);
        // same initial states in both runs
        assert_eq!(safe.trials[3].initial_state, unsafe_.trials[3].initial_state);
    }

    #[test]
    fn constant_barrier_is_rejected() {
        let mut spec = builtin_spec("battery_min").unwrap();
        spec.name = "constant".into();
        spec.expression = "p.bmin + 1".into();
        let e = check_invariance(&spec, &Params::new(), &InvarianceConfig::default()).unwrap_err();
        assert!(matches!(e, InvarianceError::RelativeDegree { trial: 0, .. }));
    }

    #[test]
    fn too_many_actuated_states() {
        let spec = builtin_spec("battery_min").unwrap();
        let mut c = quick(true);
        c.plant = PlantKind::SingleIntegrator { actuated: Some(2) };
        assert!(matches!(check_invariance(&spec, &Params::new(), &c), Err(InvarianceError::Plant(_))));
    }
}
