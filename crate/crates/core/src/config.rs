//! Training configuration: defaults per algorithm and environment, loading
//! from TOML or JSON, and validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::envs::{EnvConfig, EnvName};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("`{key}` = {value} is out of range: {expected}")]
    Range {
        key: &'static str,
        value: String,
        expected: &'static str,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algo {
    Reinforce,
    Ppo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Everything a training run needs. Every field has a default, so a file
/// naming only `algo` and `env` is complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub algo: Algo,
    pub env: EnvName,
    pub max_steps: usize,
    pub reward_step: f64,
    pub reward_exit: f64,

    pub hidden: Vec<usize>,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub episodes_per_collect: usize,
    pub repeat_per_collect: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,

    /// Probability of replacing the sampled action with a uniform one.
    pub epsilon: f64,
    /// Freeze the action selection layer to a scaled simplex ETF.
    pub acpg: bool,
    pub e_w: f64,
    /// Optional cap on `||h||^2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e_h_clip: Option<f64>,
    pub seed: u64,

    /// Standardize returns per batch (REINFORCE).
    pub normalize_returns: bool,
    /// Draw update batches with this many transitions per optimal action.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub balanced_per_class: Option<usize>,

    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub kl_limit: f64,

    /// Moving-average reward that marks the stop epoch.
    pub threshold: f64,
    pub stop_window: usize,
    /// States sampled for collapse metrics when the state space is continuous.
    pub metric_samples: usize,
}

impl TrainConfig {
    pub fn defaults(algo: Algo, env: EnvName) -> Self {
        let e = EnvConfig::defaults_for(env);
        let (steps_per_epoch, threshold) = match env {
            EnvName::Cliff => (1000, 9.0),
            EnvName::Cartpole => (5000, 475.0),
        };
        let mut c = TrainConfig {
            algo,
            env,
            max_steps: e.max_steps,
            reward_step: e.reward_step,
            reward_exit: e.reward_exit,
            hidden: vec![64, 64],
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            gamma: 0.95,
            batch_size: 64,
            epochs: 100,
            steps_per_epoch,
            episodes_per_collect: 8,
            repeat_per_collect: 2,
            max_grad_norm: None,
            epsilon: 0.0,
            acpg: false,
            e_w: 1.0,
            e_h_clip: None,
            seed: 0,
            normalize_returns: true,
            balanced_per_class: None,
            gae_lambda: 0.95,
            clip_eps: 0.1,
            entropy_coef: 0.01,
            value_coef: 0.25,
            kl_limit: 0.5,
            threshold,
            stop_window: 5,
            metric_samples: 256,
        };
        if algo == Algo::Ppo {
            c.lr = 2.5e-4;
            c.gamma = 0.99;
            c.batch_size = 256;
            c.episodes_per_collect = 10;
            c.repeat_per_collect = 4;
            c.max_grad_norm = Some(0.5);
        }
        c
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            name: self.env,
            max_steps: self.max_steps,
            reward_step: self.reward_step,
            reward_exit: self.reward_exit,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn range(key: &'static str, value: impl ToString, expected: &'static str) -> ConfigError {
            ConfigError::Range {
                key,
                value: value.to_string(),
                expected,
            }
        }
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !unit(self.gamma) {
            return Err(range("gamma", self.gamma, "0 <= gamma <= 1"));
        }
        if !unit(self.epsilon) {
            return Err(range("epsilon", self.epsilon, "0 <= epsilon <= 1"));
        }
        if !positive(self.lr) {
            return Err(range("lr", self.lr, "lr > 0"));
        }
        if !positive(self.e_w) {
            return Err(range("e_w", self.e_w, "e_w > 0"));
        }
        if let Some(cap) = self.e_h_clip {
            if !positive(cap) {
                return Err(range("e_h_clip", cap, "e_h_clip > 0"));
            }
        }
        if let Some(n) = self.max_grad_norm {
            if !positive(n) {
                return Err(range("max_grad_norm", n, "max_grad_norm > 0"));
            }
        }
        if self.algo == Algo::Ppo && !positive(self.clip_eps) {
            return Err(range("clip_eps", self.clip_eps, "clip_eps > 0 for ppo"));
        }
        if !unit(self.gae_lambda) {
            return Err(range("gae_lambda", self.gae_lambda, "0 <= gae_lambda <= 1"));
        }
        if self.entropy_coef < 0.0 || self.value_coef < 0.0 {
            return Err(range("entropy_coef/value_coef", self.entropy_coef.min(self.value_coef), ">= 0"));
        }
        if !positive(self.kl_limit) {
            return Err(range("kl_limit", self.kl_limit, "kl_limit > 0"));
        }
        for (key, v) in [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("steps_per_epoch", self.steps_per_epoch),
            ("episodes_per_collect", self.episodes_per_collect),
            ("repeat_per_collect", self.repeat_per_collect),
            ("max_steps", self.max_steps),
            ("stop_window", self.stop_window),
        ] {
            if v == 0 {
                return Err(range(key, v, ">= 1"));
            }
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(range("hidden", format!("{:?}", self.hidden), "non-empty, all widths >= 1"));
        }
        if self.balanced_per_class == Some(0) {
            return Err(range("balanced_per_class", 0, ">= 1"));
        }
        if self.env == EnvName::Cartpole && self.balanced_per_class.is_some() {
            return Err(range(
                "balanced_per_class",
                "set",
                "only available where optimal actions are known (cliff)",
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable in TOML")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Fills in defaults for everything `doc` leaves out, then validates.
/// `doc` must be a table naming at least `algo` and `env`.
pub fn config_from_value(doc: Value) -> Result<TrainConfig, ConfigError> {
    let Value::Object(mut user) = doc else {
        return Err(ConfigError::Schema {
            path: ".".into(),
            message: "expected a table".into(),
        });
    };
    flatten_env_table(&mut user)?;
    let field = |key: &str| -> Result<Value, ConfigError> {
        user.get(key).cloned().ok_or_else(|| ConfigError::Schema {
            path: key.into(),
            message: "missing required key".into(),
        })
    };
    let named = |key: &str, e: serde_json::Error| ConfigError::Schema {
        path: key.into(),
        message: e.to_string(),
    };
    let algo: Algo = serde_json::from_value(field("algo")?).map_err(|e| named("algo", e))?;
    let env: EnvName = serde_json::from_value(field("env")?).map_err(|e| named("env", e))?;

    let Value::Object(mut merged) = serde_json::to_value(TrainConfig::defaults(algo, env)).expect("defaults serialize")
    else {
        unreachable!("config serializes to an object")
    };
    merged.extend(user);
    let cfg: TrainConfig = schema(Value::Object(merged))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Accepts `[env]` as a table (`name`, `max_steps`, `reward_step`,
/// `reward_exit`, `seed`) by lifting its keys to the top level.
fn flatten_env_table(user: &mut serde_json::Map<String, Value>) -> Result<(), ConfigError> {
    let Some(Value::Object(table)) = user.get("env").cloned() else {
        return Ok(());
    };
    user.remove("env");
    for (key, value) in table {
        let target = match key.as_str() {
            "name" => "env",
            "max_steps" | "reward_step" | "reward_exit" | "seed" => key.as_str(),
            _ => {
                return Err(ConfigError::Schema {
                    path: format!("env.{key}"),
                    message: "unknown environment key".into(),
                })
            }
        };
        match user.get(target) {
            Some(existing) if *existing != value => {
                return Err(ConfigError::Schema {
                    path: format!("env.{key}"),
                    message: format!("conflicts with top-level `{target}`"),
                })
            }
            _ => {
                user.insert(target.to_owned(), value);
            }
        }
    }
    Ok(())
}

fn schema<T: for<'de> Deserialize<'de>>(v: Value) -> Result<T, ConfigError> {
    serde_path_to_error::deserialize(v).map_err(|e| ConfigError::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

/// Parses TOML text.
pub fn parse_config_str(text: &str) -> Result<TrainConfig, ConfigError> {
    let doc: Value = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    config_from_value(doc)
}

/// Parses JSON text.
pub fn parse_config_json(text: &str) -> Result<TrainConfig, ConfigError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    config_from_value(doc)
}

/// Loads a config file; `.json` files are read as JSON, anything else as TOML.
pub fn parse_config(path: &Path) -> Result<TrainConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        parse_config_json(&text)
    } else {
        parse_config_str(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert_eq, proptest, Just, Strategy};

    #[test]
    fn minimal_reinforce_file_gets_defaults() {
        let c = parse_config_str("algo = \"reinforce\"\nenv = \"cliff\"\n").unwrap();
        assert_eq!(c.gamma, 0.95);
        assert_eq!(c.hidden, vec![64, 64]);
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.episodes_per_collect, 8);
        assert_eq!(c.repeat_per_collect, 2);
        assert_eq!(c.lr, 1e-3);
        assert!(c.normalize_returns);
        assert_eq!(c.env_config().max_steps, 50);
    }

    #[test]
    fn env_table_form() {
        let text = "algo = \"reinforce\"\nseed = 4\n[env]\nname = \"cliff\"\nmax_steps = 30\nreward_exit = 5.0\nseed = 4\n";
        let c = parse_config_str(text).unwrap();
        assert_eq!(c.env, EnvName::Cliff);
        assert_eq!((c.max_steps, c.reward_exit, c.seed), (30, 5.0, 4));

        let clash = parse_config_str("algo = \"reinforce\"\nseed = 1\n[env]\nname = \"cliff\"\nseed = 2\n").unwrap_err();
        assert!(matches!(&clash, ConfigError::Schema { path, .. } if path == "env.seed"), "{clash}");
        let unknown = parse_config_str("algo = \"reinforce\"\n[env]\nname = \"cliff\"\nwind = 1\n").unwrap_err();
        assert!(matches!(&unknown, ConfigError::Schema { path, .. } if path == "env.wind"), "{unknown}");
    }

    #[test]
    fn ppo_defaults() {
        let c = parse_config_json(r#"{"algo": "ppo", "env": "cart-pole"}"#).unwrap();
        assert_eq!(c.env, EnvName::Cartpole);
        assert_eq!((c.gamma, c.gae_lambda, c.clip_eps), (0.99, 0.95, 0.1));
        assert_eq!((c.value_coef, c.entropy_coef), (0.25, 0.01));
        assert_eq!(c.max_grad_norm, Some(0.5));
        assert_eq!((c.batch_size, c.repeat_per_collect, c.episodes_per_collect), (256, 4, 10));
        assert_eq!(c.threshold, 475.0);
    }

    #[test]
    fn epsilon_out_of_range() {
        let err = parse_config_str("algo = \"ppo\"\nenv = \"cliff\"\nepsilon = 1.5\n").unwrap_err();
        assert!(matches!(err, ConfigError::Range { key: "epsilon", .. }), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = parse_config_str("algo = \"ppo\"\nenv = \"cliff\"\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn type_error_names_the_key() {
        let err = parse_config_str("algo = \"ppo\"\nenv = \"cliff\"\nhidden = [64, \"x\"]\n").unwrap_err();
        match err {
            ConfigError::Schema { path, .. } => assert_eq!(path, "hidden[1]"),
            other => panic!("{other}"),
        }
        let err = parse_config_str("algo = \"a2c\"\nenv = \"cliff\"\n").unwrap_err();
        assert!(matches!(err, ConfigError::Schema { ref path, .. } if path == "algo"), "{err}");
    }

    #[test]
    fn missing_algo() {
        let err = parse_config_str("env = \"cliff\"\n").unwrap_err();
        assert!(matches!(err, ConfigError::Schema { ref path, .. } if path == "algo"));
    }

    #[test]
    fn balanced_batches_need_an_oracle() {
        let err = parse_config_str("algo = \"reinforce\"\nenv = \"cartpole\"\nbalanced_per_class = 4\n").unwrap_err();
        assert!(matches!(err, ConfigError::Range { key: "balanced_per_class", .. }));
    }

    fn arb_config() -> impl Strategy<Value = TrainConfig> {
        (
            prop::sample::select(vec![Algo::Reinforce, Algo::Ppo]),
            prop::sample::select(vec![EnvName::Cliff, EnvName::Cartpole]),
            0.0..=1.0f64,
            0.0..=1.0f64,
            1e-6..1.0f64,
            prop::collection::vec(1usize..256, 1..4),
            proptest::option::of(1e-3..100.0f64),
            proptest::bool::ANY,
            proptest::num::u64::ANY,
        )
            .prop_flat_map(|(algo, env, gamma, eps, lr, hidden, cap, acpg, seed)| {
                let mut c = TrainConfig::defaults(algo, env);
                c.gamma = gamma;
                c.epsilon = eps;
                c.lr = lr;
                c.hidden = hidden;
                c.e_h_clip = cap;
                c.acpg = acpg;
                c.seed = seed;
                Just(c)
            })
    }

    proptest! {
        #[test]
        fn toml_round_trip_is_identity(c in arb_config()) {
            let once = parse_config_str(&c.to_toml()).unwrap();
            prop_assert_eq!(&once, &c);
            let twice = parse_config_str(&once.to_toml()).unwrap();
            prop_assert_eq!(twice, once);
        }

        #[test]
        fn json_round_trip_is_identity(c in arb_config()) {
            prop_assert_eq!(parse_config_json(&c.to_json()).unwrap(), c);
        }
    }
}
