//! Experiment configuration: one JSON document that pins everything a run
//! needs, hashed canonically so every output file can name the exact setup
//! it came from.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adjoint::{Backend, PairSelection, QMode, ThirdVariant};
use crate::{Error, Result};

/// Spike placement: the window starts at `t0` (fraction of the horizon is
/// not implied; this is absolute time) and the control is held at `beta`
/// on it. The window width comes from the eps under study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpikeConfig {
    pub t0: f64,
    pub beta: Vec<f64>,
}

/// Base control applied along the whole horizon.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LawConfig {
    /// The same value everywhere.
    Constant { u: Vec<f64> },
    /// The closed-form feedback optimum; only the LQ problem has one.
    Riccati,
}

fn default_horizon() -> f64 {
    1.0
}
fn default_x0() -> Vec<f64> {
    vec![1.0]
}
fn default_spread() -> f64 {
    0.5
}
fn default_seed() -> u64 {
    2024
}
fn default_eps_grid() -> Vec<f64> {
    vec![0.1, 0.05, 0.025]
}
fn default_order_eps_grid() -> Vec<f64> {
    vec![0.4, 0.2, 0.1, 0.04]
}
fn default_u_span() -> f64 {
    2.0
}
fn default_u_points() -> usize {
    41
}
fn default_t_points() -> usize {
    50
}
fn default_backend() -> String {
    "regression".into()
}
fn default_q_estimator() -> String {
    "dw-projection".into()
}
fn default_third_variant() -> String {
    "plain".into()
}
fn default_kappa() -> f64 {
    10.0
}
fn default_tol() -> f64 {
    1e-16
}
fn default_max_iter() -> usize {
    60
}
fn default_degree() -> usize {
    2
}
fn default_ridge() -> f64 {
    1e-8
}

/// Everything one experiment run depends on. Unknown keys are rejected so a
/// typo cannot silently fall back to a default.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Problem id, resolved through the model catalog.
    pub problem: String,
    /// Coefficient overrides for the named problem.
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    /// Particle count.
    pub n: usize,
    /// Time steps on the horizon.
    pub m_steps: usize,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_x0")]
    pub x0: Vec<f64>,
    #[serde(default = "default_spread")]
    pub x0_spread: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Spike sizes, as fractions of the horizon, largest first.
    #[serde(default = "default_eps_grid")]
    pub eps_grid: Vec<f64>,
    /// Wider ladder for the convergence-order study: at least four fractions,
    /// strictly decreasing, spanning a factor of ten.
    #[serde(default = "default_order_eps_grid")]
    pub order_eps_grid: Vec<f64>,
    /// Where report and table files land; the command line can override it.
    #[serde(default)]
    pub out_dir: Option<String>,
    pub law: LawConfig,
    pub spike: SpikeConfig,
    /// Half-width of the control sweep around the candidate control.
    #[serde(default = "default_u_span")]
    pub u_span: f64,
    #[serde(default = "default_u_points")]
    pub u_points: usize,
    #[serde(default = "default_t_points")]
    pub t_points: usize,
    /// "regression" or "deterministic".
    #[serde(default = "default_backend")]
    pub backend: String,
    /// "dw-projection" or "gradient".
    #[serde(default = "default_q_estimator")]
    pub q_estimator: String,
    /// "plain" or "symmetrized".
    #[serde(default = "default_third_variant")]
    pub third_variant: String,
    /// Pair subsample for the pair-space field; 0 keeps all n*n pairs.
    #[serde(default)]
    pub pair_count: usize,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_degree")]
    pub basis_degree: usize,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        crate::coeffs::model_by_name(&self.problem, &self.params)?;
        if self.n == 0 || self.m_steps == 0 {
            return Err(Error::Config(
                "particle count and step count must be positive".into(),
            ));
        }
        if !(self.horizon > 0.0) || !(self.x0_spread >= 0.0) {
            return Err(Error::Config(
                "horizon must be positive and the spread nonnegative".into(),
            ));
        }
        if self.eps_grid.is_empty() || self.eps_grid.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
            return Err(Error::Config(
                "eps grid entries must sit in (0, 1], as horizon fractions".into(),
            ));
        }
        if self.order_eps_grid.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
            return Err(Error::Config(
                "order-study grid entries must sit in (0, 1], as horizon fractions".into(),
            ));
        }
        if !(self.spike.t0 >= 0.0 && self.spike.t0 < self.horizon) {
            return Err(Error::Config("spike start must sit inside the horizon".into()));
        }
        let widest = self
            .eps_grid
            .iter()
            .chain(&self.order_eps_grid)
            .fold(0.0_f64, |a, &b| a.max(b));
        if self.spike.t0 + widest * self.horizon > self.horizon + 1e-12 {
            return Err(Error::Config(
                "the widest spike window does not fit between t0 and the horizon".into(),
            ));
        }
        if self.u_points == 0 || self.t_points == 0 {
            return Err(Error::Config("sweep grids need at least one point".into()));
        }
        self.backend_enum()?;
        self.q_mode_enum()?;
        self.third_variant_enum()?;
        if !(self.kappa > 0.0) || !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::Config(
                "contraction weight, tolerance, and iteration cap must be positive".into(),
            ));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::Config("ridge must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn backend_enum(&self) -> Result<Backend> {
        match self.backend.as_str() {
            "regression" => Ok(Backend::Regression),
            "deterministic" => Ok(Backend::Deterministic),
            other => Err(Error::Config(format!("unknown backend '{other}'"))),
        }
    }

    pub fn q_mode_enum(&self) -> Result<QMode> {
        match self.q_estimator.as_str() {
            "dw-projection" => Ok(QMode::DwProjection),
            "gradient" => Ok(QMode::GradientOfConditionalMean),
            other => Err(Error::Config(format!("unknown q estimator '{other}'"))),
        }
    }

    pub fn third_variant_enum(&self) -> Result<ThirdVariant> {
        match self.third_variant.as_str() {
            "plain" => Ok(ThirdVariant::Plain),
            "symmetrized" => Ok(ThirdVariant::Symmetrized),
            other => Err(Error::Config(format!("unknown pair-field variant '{other}'"))),
        }
    }

    pub fn pair_selection(&self) -> PairSelection {
        if self.pair_count == 0 {
            PairSelection::Dense
        } else {
            PairSelection::Subsample {
                count: self.pair_count,
            }
        }
    }

    /// Canonical hash of the configuration: the JSON value is re-serialized
    /// with sorted keys, so two files describing the same experiment hash
    /// identically no matter how their keys were ordered on disk.
    pub fn canonical_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canon = to_canonical(&value);
        let mut hasher = Sha256::new();
        hasher.update(canon.as_bytes());
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }
}

/// Serializes a JSON value with object keys sorted at every level.
fn to_canonical(value: &serde_json::Value) -> String {
    match value {
        serde_json::Value::Object(map) => {
            let sorted: BTreeMap<&String, &serde_json::Value> = map.iter().collect();
            let inner: Vec<String> = sorted
                .iter()
                .map(|(k, v)| {
                    format!(
                        "{}:{}",
                        serde_json::to_string(k).expect("string key"),
                        to_canonical(v)
                    )
                })
                .collect();
            format!("{{{}}}", inner.join(","))
        }
        serde_json::Value::Array(items) => {
            let inner: Vec<String> = items.iter().map(to_canonical).collect();
            format!("[{}]", inner.join(","))
        }
        leaf => serde_json::to_string(leaf).expect("scalar json"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{
            "problem": "tp1",
            "n": 64,
            "m_steps": 50,
            "law": {"kind": "constant", "u": [0.2]},
            "spike": {"t0": 0.3, "beta": [-0.5]}
        }"#
    }

    #[test]
    fn a_minimal_config_fills_defaults() {
        let cfg = ExperimentConfig::from_json(minimal()).unwrap();
        assert_eq!(cfg.horizon, 1.0);
        assert_eq!(cfg.eps_grid, vec![0.1, 0.05, 0.025]);
        assert_eq!(cfg.u_points, 41);
        assert!(matches!(cfg.backend_enum().unwrap(), Backend::Regression));
    }

    #[test]
    fn the_hash_ignores_key_order_but_not_values() {
        let a = ExperimentConfig::from_json(minimal()).unwrap();
        let reordered = r#"{
            "spike": {"beta": [-0.5], "t0": 0.3},
            "law": {"u": [0.2], "kind": "constant"},
            "m_steps": 50,
            "n": 64,
            "problem": "tp1"
        }"#;
        let b = ExperimentConfig::from_json(reordered).unwrap();
        assert_eq!(a.canonical_hash(), b.canonical_hash());
        let mut c = a.clone();
        c.seed = 2025;
        assert_ne!(a.canonical_hash(), c.canonical_hash());
    }

    #[test]
    fn bad_fields_are_named_errors() {
        for (text, needle) in [
            (r#"{"problem": "nope", "n": 8, "m_steps": 4, "law": {"kind":"constant","u":[0.0]}, "spike": {"t0":0.1,"beta":[0.0]}}"#, "model"),
            (r#"{"problem": "tp1", "n": 0, "m_steps": 4, "law": {"kind":"constant","u":[0.0]}, "spike": {"t0":0.1,"beta":[0.0]}}"#, "positive"),
            (r#"{"problem": "tp1", "n": 8, "m_steps": 4, "law": {"kind":"constant","u":[0.0]}, "spike": {"t0":2.0,"beta":[0.0]}}"#, "horizon"),
            (r#"{"problem": "tp1", "n": 8, "m_steps": 4, "backend": "magic", "law": {"kind":"constant","u":[0.0]}, "spike": {"t0":0.1,"beta":[0.0]}}"#, "backend"),
            (r#"{"problem": "tp1", "n": 8, "m_steps": 4, "surprise": 1, "law": {"kind":"constant","u":[0.0]}, "spike": {"t0":0.1,"beta":[0.0]}}"#, "unknown"),
        ] {
            let err = ExperimentConfig::from_json(text).unwrap_err();
            let msg = err.to_string().to_lowercase();
            assert!(
                msg.contains(needle),
                "error '{msg}' should mention '{needle}'"
            );
        }
    }
}
