//! Scenario documents: TOML loading, validation and the built-in catalogue.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// One simulation run with the checks to evaluate on its trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub id: String,
    /// `t_end` in seconds.
    pub horizon: f64,
    /// Fixed RK4 step in seconds.
    pub step: f64,
    /// Seed for sampled assumption checks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub plant: PlantConfig,
    pub controller: ControllerConfig,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub initial_conditions: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<CheckSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantKind {
    /// `x' = θ x² + u + ε(t)`.
    Scalar,
    /// `x' = θ1 x + θ2 x² + u` tracking `sin t`.
    Tracking,
    /// Two-stage cascade with a linear second stage.
    CascadeLinear,
    /// Two-stage cascade with a `5 tanh` second stage.
    CascadeTanh,
    /// Plant whose regressor needs an auxiliary observer.
    Embedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantConfig {
    pub kind: PlantKind,
    /// True parameter of the scalar plant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    /// Additive plant disturbance `ε(t)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disturbance: Option<SignalSpec>,
    /// Additive disturbance `δ(t)` on the adaptation law.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adaptation_disturbance: Option<SignalSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalShape {
    /// `a e^{-r t}`
    ExpDecay,
    /// `a`
    Constant,
    /// `a sin(r t)`
    Sine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalSpec {
    pub shape: SignalShape,
    pub amplitude: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
}

impl SignalSpec {
    pub fn signal(&self) -> finform::fields::Signal {
        let (a, r) = (self.amplitude, self.rate.unwrap_or(1.0));
        match self.shape {
            SignalShape::ExpDecay => finform::fields::signal(move |t| a * (-r * t).exp()),
            SignalShape::Constant => finform::fields::signal(move |_| a),
            SignalShape::Sine => finform::fields::signal(move |t| a * (r * t).sin()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Finform,
    Embedded,
    Cascade,
    BacksteppingClassic,
    BacksteppingTuning,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Linear,
    Cubic,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    AlphaIndependent,
    PsiMatched,
    Leaky,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteKind {
    ClosedForm,
    Quadrature,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObserverTargetKind {
    Unit,
    Damped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    /// Scalar adaptation gain `Γ`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Target gain `K`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetKind>,
    /// Leakage `λ`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leak: Option<f64>,
    /// Constant modulation `F`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modulation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<VariantKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route: Option<RouteKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observer_target: Option<ObserverTargetKind>,
}

impl ControllerConfig {
    pub fn new(kind: ControllerKind) -> Self {
        Self {
            kind,
            gamma: None,
            k: None,
            target: None,
            leak: None,
            modulation: None,
            variant: None,
            route: None,
            observer_target: None,
        }
    }

    fn set_keys(&self) -> Vec<&'static str> {
        let mut keys = Vec::new();
        let opts: [(&'static str, bool); 8] = [
            ("gamma", self.gamma.is_some()),
            ("k", self.k.is_some()),
            ("target", self.target.is_some()),
            ("leak", self.leak.is_some()),
            ("modulation", self.modulation.is_some()),
            ("variant", self.variant.is_some()),
            ("route", self.route.is_some()),
            ("observer_target", self.observer_target.is_some()),
        ];
        for (k, set) in opts {
            if set {
                keys.push(k);
            }
        }
        keys
    }
}

/// A metric to evaluate with its tolerance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "metric", rename_all = "snake_case", deny_unknown_fields)]
pub enum CheckSpec {
    /// Integral bounds on `φ(ψ)` and `ψ'`.
    L2Bounds { tol: f64 },
    /// Uniform bound on `|ψ|`.
    LinfBound { tol: f64 },
    /// Exponential envelope for linear targets.
    ExpEnvelope { tol: f64 },
    /// Non-increasing parameter distance.
    ParamDistance { tol: f64 },
    /// Smallest eigenvalue of the sliding Gram integral is at least `delta`.
    PersistentExcitation { window: f64, delta: f64 },
    /// `|θ̂(T) - θ*| <= ratio |θ̂(0) - θ*|`.
    ParamConvergence { ratio: f64 },
    /// `|∫u² - reference| <= rel_tol reference`.
    ControlEnergy { reference: f64, rel_tol: f64 },
    /// `|ψ(T)| <= tol`.
    FinalPsi { tol: f64 },
    /// `|ψ|` does not settle below `tol` before `after`.
    SettlesAfter { tol: f64, after: f64 },
    /// `|ψ|` settles below `tol` by `before`.
    SettlesBefore { tol: f64, before: f64 },
    /// Growth of accumulator `channel` over the final tenth of the run.
    AccumulatorGrowth { channel: String, tol: f64 },
    /// Sup of the realization-identity residual.
    Realization { tol: f64 },
    /// Sup of `|ψ|`, `|θ̂|` and `|x|` below `ceiling`.
    Bounded { ceiling: f64 },
}

impl Scenario {
    /// Parses and validates a TOML document.
    pub fn from_toml_str(src: &str) -> Result<Self, CliError> {
        let sc: Scenario = toml::from_str(src).map_err(|e| CliError::from_toml(src, &e))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Checks ranges and that every key is meaningful for the chosen plant
    /// and controller.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.id.trim().is_empty() {
            return Err(CliError::validation("id", "must not be empty"));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(CliError::validation(
                "horizon",
                format!("must be positive, got {}", self.horizon),
            ));
        }
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(CliError::validation(
                "step",
                format!("must be positive, got {}", self.step),
            ));
        }
        if self.step > self.horizon {
            return Err(CliError::validation(
                "step",
                format!("{} exceeds the horizon {}", self.step, self.horizon),
            ));
        }
        use ControllerKind as C;
        use PlantKind as P;
        let compatible = match self.plant.kind {
            P::Scalar | P::Tracking => matches!(self.controller.kind, C::Finform),
            P::CascadeLinear => !matches!(self.controller.kind, C::Embedded),
            P::CascadeTanh => matches!(self.controller.kind, C::Finform | C::Cascade),
            P::Embedding => matches!(self.controller.kind, C::Embedded),
        };
        if !compatible {
            return Err(CliError::validation(
                "controller.kind",
                format!("{:?} cannot drive plant {:?}", self.controller.kind, self.plant.kind),
            ));
        }
        let plant_keys: &[&str] = match self.plant.kind {
            P::Scalar => &["theta", "disturbance", "adaptation_disturbance"],
            _ => &[],
        };
        for (key, set) in [
            ("theta", self.plant.theta.is_some()),
            ("disturbance", self.plant.disturbance.is_some()),
            ("adaptation_disturbance", self.plant.adaptation_disturbance.is_some()),
        ] {
            if set && !plant_keys.contains(&key) {
                return Err(CliError::validation(
                    format!("plant.{key}"),
                    format!("not supported for plant {:?}", self.plant.kind),
                ));
            }
        }
        let (ctrl_keys, ic_keys) = self.allowed_keys();
        for key in self.controller.set_keys() {
            if !ctrl_keys.contains(&key) {
                return Err(CliError::validation(
                    format!("controller.{key}"),
                    format!("not supported for {:?} on {:?}", self.controller.kind, self.plant.kind),
                ));
            }
        }
        for (key, v) in &self.initial_conditions {
            if !ic_keys.contains(&key.as_str()) {
                return Err(CliError::validation(
                    format!("initial_conditions.{key}"),
                    format!("unknown for {:?} on {:?}", self.controller.kind, self.plant.kind),
                ));
            }
            if !v.is_finite() {
                return Err(CliError::validation(
                    format!("initial_conditions.{key}"),
                    "must be finite",
                ));
            }
        }
        for (key, v) in [("gamma", self.controller.gamma), ("k", self.controller.k)] {
            if let Some(v) = v {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(CliError::validation(
                        format!("controller.{key}"),
                        format!("must be positive, got {v}"),
                    ));
                }
            }
        }
        if let Some(l) = self.controller.leak {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(CliError::validation(
                    "controller.leak",
                    format!("must be non-negative, got {l}"),
                ));
            }
        }
        if self.controller.variant == Some(VariantKind::Leaky) && !(self.controller.leak.unwrap_or(0.0) > 0.0) {
            return Err(CliError::validation(
                "controller.leak",
                "the leaky variant needs leak > 0",
            ));
        }
        for (i, c) in self.checks.iter().enumerate() {
            c.validate()
                .map_err(|(key, why)| CliError::validation(format!("checks[{i}].{key}"), why))?;
        }
        Ok(())
    }

    fn allowed_keys(&self) -> (&'static [&'static str], &'static [&'static str]) {
        use ControllerKind as C;
        use PlantKind as P;
        match (self.plant.kind, self.controller.kind) {
            (P::Scalar, _) => (&["gamma", "k", "target", "leak", "modulation"], &["x", "theta_hat"]),
            (P::Tracking, _) => (&["gamma", "k"], &[]),
            (P::Embedding, _) => (&["variant", "leak"], &[]),
            (_, C::BacksteppingClassic) => (
                &[],
                &["x1", "x2", "theta_hat_1", "theta_hat_2", "theta_hat_3", "theta_hat_4"],
            ),
            (_, C::BacksteppingTuning) => (&[], &["x1", "x2", "theta_hat_1", "theta_hat_2", "theta_hat_3"]),
            _ => (
                &["gamma", "k", "route", "observer_target"],
                &["x1", "x2", "xi", "theta_hat_1", "theta_hat_2", "theta_hat_3"],
            ),
        }
    }

    /// Initial condition `key`, or `default` when absent.
    pub fn ic(&self, key: &str, default: f64) -> f64 {
        self.initial_conditions.get(key).copied().unwrap_or(default)
    }
}

impl CheckSpec {
    fn validate(&self) -> Result<(), (&'static str, String)> {
        let nonneg = |key: &'static str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err((key, format!("must be non-negative, got {v}")))
            }
        };
        match self {
            Self::L2Bounds { tol }
            | Self::LinfBound { tol }
            | Self::ExpEnvelope { tol }
            | Self::ParamDistance { tol }
            | Self::FinalPsi { tol }
            | Self::Realization { tol }
            | Self::AccumulatorGrowth { tol, .. } => nonneg("tol", *tol),
            Self::PersistentExcitation { window, delta } => {
                nonneg("delta", *delta)?;
                if *window > 0.0 {
                    Ok(())
                } else {
                    Err(("window", format!("must be positive, got {window}")))
                }
            }
            Self::ParamConvergence { ratio } => nonneg("ratio", *ratio),
            Self::ControlEnergy { reference, rel_tol } => {
                nonneg("rel_tol", *rel_tol)?;
                if *reference > 0.0 {
                    Ok(())
                } else {
                    Err(("reference", format!("must be positive, got {reference}")))
                }
            }
            Self::SettlesAfter { tol, after } => {
                nonneg("tol", *tol)?;
                nonneg("after", *after)
            }
            Self::SettlesBefore { tol, before } => {
                nonneg("tol", *tol)?;
                nonneg("before", *before)
            }
            Self::Bounded { ceiling } => nonneg("ceiling", *ceiling),
        }
    }
}

/// Reads and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario, CliError> {
    let src = std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Scenario::from_toml_str(&src)
}

/// Energy references for the two-stage benchmark, by controller.
pub const REFERENCE_ENERGY: [(&str, f64); 4] = [
    ("finform", 627.10),
    ("finform_tanh", 3186.83),
    ("backstepping_classic", 13329.28),
    ("backstepping_tuning", 263872.58),
];

fn cascade_ics(extra: &[(&str, f64)]) -> BTreeMap<String, f64> {
    let mut m: BTreeMap<String, f64> = [
        ("x1", 2.0),
        ("x2", 0.2),
        ("theta_hat_1", 3.0),
        ("theta_hat_2", -2.0),
        ("theta_hat_3", -2.0),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    m.extend(extra.iter().map(|(k, v)| (k.to_string(), *v)));
    m
}

fn scalar_ics() -> BTreeMap<String, f64> {
    [("x".to_string(), 2.0), ("theta_hat".to_string(), 1.5)]
        .into_iter()
        .collect()
}

fn scalar_plant() -> PlantConfig {
    PlantConfig {
        kind: PlantKind::Scalar,
        theta: Some(1.0),
        disturbance: None,
        adaptation_disturbance: None,
    }
}

fn bare_plant(kind: PlantKind) -> PlantConfig {
    PlantConfig {
        kind,
        theta: None,
        disturbance: None,
        adaptation_disturbance: None,
    }
}

/// Built-in scenario ids with one-line descriptions.
pub const BUILTINS: [(&str, &str); 9] = [
    (
        "cascade-linear",
        "two-stage cascade, finite-form stack, x(0) = (2, 0.2), T = 500",
    ),
    (
        "cascade-tanh",
        "two-stage cascade with 5 tanh second stage, finite-form stack, T = 500",
    ),
    (
        "backstepping-classic",
        "two-stage cascade, overparameterized backstepping, T = 500",
    ),
    (
        "backstepping-tuning",
        "two-stage cascade, tuning-functions backstepping, T = 500",
    ),
    ("scalar", "x' = θx² + u regulated to 1, bound suite"),
    ("scalar-l2-disturbance", "scalar plant with ε(t) = e^{-t}"),
    (
        "scalar-leakage",
        "scalar plant with bounded ε, δ and leakage 0.1, T = 100",
    ),
    (
        "tracking",
        "x' = θ1 x + θ2 x² + u tracking sin t, persistent excitation",
    ),
    (
        "embedding",
        "observer embedding with an alpha-independent estimator, T = 50",
    ),
];

/// Looks up a built-in scenario by id.
pub fn builtin(id: &str) -> Option<Scenario> {
    let cascade = |id: &str, kind: PlantKind, ctrl: ControllerKind, ics, checks| Scenario {
        id: id.to_string(),
        horizon: 500.0,
        step: 1e-3,
        seed: None,
        plant: bare_plant(kind),
        controller: ControllerConfig::new(ctrl),
        initial_conditions: ics,
        checks,
    };
    let energy = |name: &str| CheckSpec::ControlEnergy {
        reference: REFERENCE_ENERGY
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| *v)
            .unwrap_or(1.0),
        rel_tol: 0.15,
    };
    let embedding_checks = vec![
        CheckSpec::AccumulatorGrowth {
            channel: "obs_err".into(),
            tol: 1e-4,
        },
        CheckSpec::AccumulatorGrowth {
            channel: "u_gap".into(),
            tol: 1e-4,
        },
    ];
    let sc = match id {
        "cascade-linear" => cascade(
            id,
            PlantKind::CascadeLinear,
            ControllerKind::Finform,
            cascade_ics(&[]),
            [
                vec![energy("finform"), CheckSpec::FinalPsi { tol: 1e-2 }],
                embedding_checks,
            ]
            .concat(),
        ),
        "cascade-tanh" => cascade(
            id,
            PlantKind::CascadeTanh,
            ControllerKind::Finform,
            cascade_ics(&[]),
            [
                vec![energy("finform_tanh"), CheckSpec::FinalPsi { tol: 1e-2 }],
                embedding_checks,
            ]
            .concat(),
        ),
        "backstepping-classic" => cascade(
            id,
            PlantKind::CascadeLinear,
            ControllerKind::BacksteppingClassic,
            cascade_ics(&[("theta_hat_4", 3.0)]),
            vec![energy("backstepping_classic")],
        ),
        "backstepping-tuning" => cascade(
            id,
            PlantKind::CascadeLinear,
            ControllerKind::BacksteppingTuning,
            cascade_ics(&[]),
            vec![
                energy("backstepping_tuning"),
                CheckSpec::SettlesAfter {
                    tol: 1e-2,
                    after: 300.0,
                },
            ],
        ),
        "scalar" => Scenario {
            id: id.into(),
            horizon: 20.0,
            step: 1e-3,
            seed: None,
            plant: scalar_plant(),
            controller: ControllerConfig {
                gamma: Some(1.0),
                k: Some(1.0),
                ..ControllerConfig::new(ControllerKind::Finform)
            },
            initial_conditions: scalar_ics(),
            checks: vec![
                CheckSpec::L2Bounds { tol: 1e-6 },
                CheckSpec::LinfBound { tol: 1e-6 },
                CheckSpec::ParamDistance { tol: 1e-9 },
                CheckSpec::ExpEnvelope { tol: 1e-9 },
                CheckSpec::Realization { tol: 1e-3 },
            ],
        },
        "scalar-l2-disturbance" => Scenario {
            id: id.into(),
            horizon: 30.0,
            step: 1e-3,
            seed: None,
            plant: PlantConfig {
                disturbance: Some(SignalSpec {
                    shape: SignalShape::ExpDecay,
                    amplitude: 1.0,
                    rate: Some(1.0),
                }),
                ..scalar_plant()
            },
            controller: ControllerConfig::new(ControllerKind::Finform),
            initial_conditions: scalar_ics(),
            checks: vec![
                CheckSpec::AccumulatorGrowth {
                    channel: "psi".into(),
                    tol: 1e-4,
                },
                CheckSpec::FinalPsi { tol: 1e-2 },
                CheckSpec::ParamDistance { tol: 1e-9 },
            ],
        },
        "scalar-leakage" => Scenario {
            id: id.into(),
            horizon: 100.0,
            step: 1e-3,
            seed: None,
            plant: PlantConfig {
                disturbance: Some(SignalSpec {
                    shape: SignalShape::Sine,
                    amplitude: 0.2,
                    rate: Some(1.0),
                }),
                adaptation_disturbance: Some(SignalSpec {
                    shape: SignalShape::Constant,
                    amplitude: 0.1,
                    rate: None,
                }),
                ..scalar_plant()
            },
            controller: ControllerConfig {
                leak: Some(0.1),
                ..ControllerConfig::new(ControllerKind::Finform)
            },
            initial_conditions: scalar_ics(),
            checks: vec![
                CheckSpec::Bounded { ceiling: 10.0 },
                CheckSpec::ParamDistance { tol: 1e-9 },
            ],
        },
        "tracking" => Scenario {
            id: id.into(),
            horizon: 60.0,
            step: 1e-3,
            seed: None,
            plant: bare_plant(PlantKind::Tracking),
            controller: ControllerConfig {
                gamma: Some(5.0),
                k: Some(1.0),
                ..ControllerConfig::new(ControllerKind::Finform)
            },
            initial_conditions: BTreeMap::new(),
            checks: vec![
                CheckSpec::PersistentExcitation {
                    window: std::f64::consts::TAU,
                    delta: 1e-2,
                },
                CheckSpec::ParamConvergence { ratio: 0.05 },
                CheckSpec::ExpEnvelope { tol: 1e-9 },
            ],
        },
        "embedding" => Scenario {
            id: id.into(),
            horizon: 50.0,
            step: 1e-3,
            seed: None,
            plant: bare_plant(PlantKind::Embedding),
            controller: ControllerConfig {
                variant: Some(VariantKind::AlphaIndependent),
                ..ControllerConfig::new(ControllerKind::Embedded)
            },
            initial_conditions: BTreeMap::new(),
            checks: vec![
                CheckSpec::AccumulatorGrowth {
                    channel: "obs_err".into(),
                    tol: 1e-4,
                },
                CheckSpec::FinalPsi { tol: 1e-2 },
            ],
        },
        _ => return None,
    };
    Some(sc)
}

/// A built-in id, or else a path to a TOML file.
pub fn resolve(name: &str) -> Result<Scenario, CliError> {
    match builtin(name) {
        Some(sc) => Ok(sc),
        None => {
            let path = Path::new(name);
            if path.exists() {
                load_scenario(path)
            } else {
                Err(CliError::validation(
                    "scenario",
                    format!("`{name}` is neither a built-in id nor an existing file"),
                ))
            }
        }
    }
}
