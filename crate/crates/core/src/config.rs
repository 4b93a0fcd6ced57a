//! Flat key-value run configuration with dotted section keys.
//!
//! Resolution order: CLI `--set key=value` > config file > built-in default.
//! Every key is declared in [`DEFAULTS`] with a documentation string; unknown
//! keys are configuration errors so typos cannot silently fall back.

use crate::error::{ReplanError, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// Scalar config value.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
}

impl Value {
    fn type_name(&self) -> &'static str {
        match self {
            Value::Int(_) => "integer",
            Value::Float(_) => "float",
            Value::Bool(_) => "boolean",
            Value::Str(_) => "string",
        }
    }

    fn render(&self) -> String {
        match self {
            Value::Int(v) => v.to_string(),
            Value::Float(v) => {
                if v.fract() == 0.0 && v.abs() < 1e15 {
                    format!("{v:.1}")
                } else {
                    format!("{v}")
                }
            }
            Value::Bool(v) => v.to_string(),
            Value::Str(v) => format!("{v:?}"),
        }
    }
}

macro_rules! defaults {
    ($(($key:literal, $val:expr, $doc:literal)),* $(,)?) => {
        &[$(($key, $val, $doc)),*]
    };
}

/// Every configurable key with its default and documentation.
pub const DEFAULTS: &[(&str, Value, &str)] = defaults![
    ("run.seed", Value::Int(0), "master seed for the whole workflow"),
    ("env.layout", Value::Str(String::new()), "layout name (empty = pusher1); see layout registry"),
    ("env.layout_file", Value::Str(String::new()), "optional TOML file with extra layout definitions"),
    ("env.resolution", Value::Int(64), "render resolution (32, 64 or 128)"),
    ("env.t_max", Value::Int(200), "max environment steps per episode"),
    ("env.max_step", Value::Float(0.03), "effector displacement per unit action, workspace units"),
    ("data.episodes", Value::Int(10), "episodes exported by gen-data"),
    ("encoder", Value::Str(String::new()), "scene encoder kind (empty = drm); one of: drm, vae"),
    ("drm.grid", Value::Int(4), "object grid side length H = W"),
    ("drm.glimpse", Value::Int(16), "object glimpse resolution"),
    ("drm.z_what", Value::Int(16), "object appearance latent width"),
    ("drm.z_bg", Value::Int(8), "background latent width"),
    ("drm.z_ro_m", Value::Int(8), "robot mask latent width"),
    ("drm.z_ro_rgb", Value::Int(16), "robot appearance latent width"),
    ("drm.sigma_bg", Value::Float(0.15), "fixed background RGB sigma"),
    ("drm.sigma_ro", Value::Float(0.10), "fixed robot RGB sigma"),
    ("drm.sigma_obj", Value::Float(0.10), "fixed object RGB sigma"),
    ("drm.alpha_inter", Value::Float(10.0), "weight of the inter-branch entropy loss"),
    ("drm.alpha_intra", Value::Float(1.0), "weight of the intra-branch entropy loss"),
    ("drm.pres_prior", Value::Float(0.01), "Bernoulli prior probability of cell presence"),
    ("drm.temp_start", Value::Float(2.0), "Gumbel temperature at step 0"),
    ("drm.temp_end", Value::Float(0.5), "Gumbel temperature after the anneal window"),
    ("drm.steps", Value::Int(6000), "training steps"),
    ("drm.batch", Value::Int(8), "minibatch size"),
    ("drm.lr", Value::Float(1e-3), "Adam learning rate"),
    ("drm.holdout", Value::Int(200), "frames reserved for held-out metrics"),
    ("drm.min_frames", Value::Int(1000), "minimum dataset size accepted for training"),
    ("vae.z_dim", Value::Int(72), "baseline VAE latent width"),
    ("vae.sigma", Value::Float(0.1), "baseline VAE reconstruction sigma"),
    ("vae.steps", Value::Int(4000), "baseline VAE training steps"),
    ("vae.batch", Value::Int(8), "baseline VAE minibatch size"),
    ("vae.lr", Value::Float(1e-3), "baseline VAE Adam learning rate"),
    ("rem.k_ratio", Value::Float(0.16), "reachability threshold as a fraction of t_max"),
    ("rem.hidden", Value::Int(128), "hidden width of the 3-layer reachability MLP"),
    ("rem.lr", Value::Float(1e-3), "Adam learning rate"),
    ("rem.batch", Value::Int(64), "pair minibatch size"),
    ("rem.steps_per_train", Value::Int(200), "minibatch steps per train_rem call"),
    ("rem.pairs_per_traj", Value::Int(40), "pairs sampled per trajectory"),
    ("rem.min_trajectories", Value::Int(5), "buffer trajectories required before training"),
    ("curiosity.enabled", Value::Bool(true), "apply the intrinsic bonus"),
    ("curiosity.beta", Value::Float(0.2), "bonus offset beta"),
    ("curiosity.alpha", Value::Float(0.8), "bonus reachability weight alpha"),
    ("curiosity.capacity", Value::Int(64), "episodic memory capacity M"),
    ("curiosity.replace_prob", Value::Float(0.5), "replacement probability when memory is full"),
    ("curiosity.persistent", Value::Bool(false), "keep memory across episodes"),
    ("planner.n", Value::Int(3), "number of subgoals N"),
    ("planner.population", Value::Int(256), "CEM population size"),
    ("planner.elites", Value::Int(32), "CEM elite count"),
    ("planner.iterations", Value::Int(10), "CEM iterations"),
    ("planner.aggregator", Value::Str(String::new()), "plan objective aggregator (empty = sum); one of: sum, l2, min"),
    ("planner.edge_scorer", Value::Str(String::new()), "edge scorer (empty = rem); one of: rem, latent_l2"),
    ("planner.warm_start", Value::Bool(false), "warm-start CEM from the previous plan when replanning"),
    ("policy.hidden", Value::Int(256), "actor/critic hidden width"),
    ("policy.gamma", Value::Float(0.98), "discount factor"),
    ("policy.tau", Value::Float(0.005), "Polyak averaging rate"),
    ("policy.delay", Value::Int(2), "actor update period d"),
    ("policy.smooth_sigma", Value::Float(0.2), "target policy smoothing noise sigma"),
    ("policy.smooth_clip", Value::Float(0.5), "target policy smoothing noise clip"),
    ("policy.explore_sigma", Value::Float(0.2), "exploration noise sigma during rollouts"),
    ("policy.lr", Value::Float(3e-4), "Adam learning rate for actor and critics"),
    ("policy.batch", Value::Int(128), "TD3 minibatch size"),
    ("policy.buffer_capacity", Value::Int(100000), "replay buffer capacity in transitions"),
    ("policy.random_steps", Value::Int(1000), "uniform-random warmup actions before the actor is used"),
    ("her.strategy", Value::Str(String::new()), "relabel strategy (empty = mixed); one of: future, generated, mixed"),
    ("her.ratio", Value::Float(0.8), "fraction of transitions given a relabeled copy"),
    ("her.future_frac", Value::Float(0.8), "future share inside the mixed strategy"),
    ("her.recompute_bonus", Value::Bool(false), "recompute intrinsic bonuses on relabeled copies"),
    ("trainer.episodes", Value::Int(300), "outer training episodes E"),
    ("trainer.pretrain_episodes", Value::Int(200), "random-exploration episodes for encoder pretraining"),
    ("trainer.checkpoint_every", Value::Int(50), "episodes between checkpoint flushes"),
    ("trainer.updates_per_step", Value::Float(1.0), "TD3 updates per collected environment step"),
    ("trainer.use_rem", Value::Bool(true), "score plan edges with the reachability model"),
    ("trainer.use_cm", Value::Bool(true), "apply the curiosity bonus"),
    ("trainer.use_drm", Value::Bool(true), "use the disentangled encoder (false = baseline VAE)"),
    ("eval.goals", Value::Int(30), "evaluation goals per seed"),
    ("eval.seeds", Value::Int(5), "evaluation seeds"),
    ("eval.threshold", Value::Float(0.03), "success threshold in workspace units"),
];

fn default_for(key: &str) -> Option<&'static Value> {
    DEFAULTS.iter().find(|(k, _, _)| *k == key).map(|(_, v, _)| v)
}

/// Layered configuration. Holds only overrides; reads fall back to defaults.
#[derive(Debug, Clone, Default)]
pub struct Config {
    values: BTreeMap<String, Value>,
}

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parse a flat TOML file (dotted keys or nested sections).
    pub fn load_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            ReplanError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let table: toml::Table = text.parse().map_err(|e| {
            ReplanError::Config(format!("cannot parse config {}: {e}", path.display()))
        })?;
        let mut cfg = Config::new();
        flatten_into(&mut cfg, "", &table)?;
        Ok(cfg)
    }

    /// Apply `key=value` overrides (CLI layer); later entries win.
    pub fn apply_overrides(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.set_str(k, v)?;
        }
        Ok(())
    }

    /// Overlay all explicit values from `other` onto `self`.
    pub fn merge_from(&mut self, other: &Config) {
        for (k, v) in &other.values {
            self.values.insert(k.clone(), v.clone());
        }
    }

    /// Set one key from a string, coercing to the declared type.
    pub fn set_str(&mut self, key: &str, raw: &str) -> Result<()> {
        let default = default_for(key)
            .ok_or_else(|| ReplanError::Config(format!("unknown config key `{key}`")))?;
        let value = match default {
            Value::Int(_) => Value::Int(raw.parse::<i64>().map_err(|_| {
                ReplanError::Config(format!("key `{key}` expects an integer, got `{raw}`"))
            })?),
            Value::Float(_) => Value::Float(raw.parse::<f64>().map_err(|_| {
                ReplanError::Config(format!("key `{key}` expects a float, got `{raw}`"))
            })?),
            Value::Bool(_) => Value::Bool(raw.parse::<bool>().map_err(|_| {
                ReplanError::Config(format!("key `{key}` expects true/false, got `{raw}`"))
            })?),
            Value::Str(_) => Value::Str(raw.trim_matches('"').to_string()),
        };
        self.values.insert(key.to_string(), value);
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        let default = default_for(key)
            .ok_or_else(|| ReplanError::Config(format!("unknown config key `{key}`")))?;
        let value = match (default, value) {
            (Value::Float(_), Value::Int(i)) => Value::Float(i as f64),
            (d, v) if d.type_name() == v.type_name() => v,
            (d, v) => {
                return Err(ReplanError::Config(format!(
                    "key `{key}` expects {}, got {}",
                    d.type_name(),
                    v.type_name()
                )))
            }
        };
        self.values.insert(key.to_string(), value);
        Ok(())
    }

    fn lookup(&self, key: &str) -> &Value {
        self.values.get(key).unwrap_or_else(|| {
            default_for(key).unwrap_or_else(|| panic!("undeclared config key `{key}`"))
        })
    }

    pub fn i64(&self, key: &str) -> i64 {
        match self.lookup(key) {
            Value::Int(v) => *v,
            v => panic!("key `{key}` is {} not integer", v.type_name()),
        }
    }

    pub fn usize(&self, key: &str) -> usize {
        let v = self.i64(key);
        assert!(v >= 0, "key `{key}` must be non-negative, got {v}");
        v as usize
    }

    pub fn f64(&self, key: &str) -> f64 {
        match self.lookup(key) {
            Value::Float(v) => *v,
            Value::Int(v) => *v as f64,
            v => panic!("key `{key}` is {} not float", v.type_name()),
        }
    }

    pub fn bool(&self, key: &str) -> bool {
        match self.lookup(key) {
            Value::Bool(v) => *v,
            v => panic!("key `{key}` is {} not boolean", v.type_name()),
        }
    }

    pub fn str(&self, key: &str) -> String {
        match self.lookup(key) {
            Value::Str(v) => v.clone(),
            v => panic!("key `{key}` is {} not string", v.type_name()),
        }
    }

    /// String key with an empty-string default standing in for `fallback`.
    pub fn str_or(&self, key: &str, fallback: &str) -> String {
        let v = self.str(key);
        if v.is_empty() {
            fallback.to_string()
        } else {
            v
        }
    }

    /// Render the fully resolved configuration, one dotted key per line.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for (key, _, doc) in DEFAULTS {
            let v = self.lookup(key);
            let _ = writeln!(out, "{key} = {:<16} # {doc}", v.render());
        }
        out
    }

    /// Write the resolved config into a run directory.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.resolved.toml"), self.resolved())?;
        Ok(())
    }

    /// Documented key table for `--help`.
    pub fn help_table() -> String {
        let mut out = String::new();
        for (key, val, doc) in DEFAULTS {
            let _ = writeln!(out, "  {key} (default {}): {doc}", val.render());
        }
        out
    }
}

fn flatten_into(cfg: &mut Config, prefix: &str, table: &toml::Table) -> Result<()> {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten_into(cfg, &key, t)?,
            toml::Value::Integer(i) => cfg.set(&key, Value::Int(*i))?,
            toml::Value::Float(f) => cfg.set(&key, Value::Float(*f))?,
            toml::Value::Boolean(b) => cfg.set(&key, Value::Bool(*b))?,
            toml::Value::String(s) => cfg.set(&key, Value::Str(s.clone()))?,
            other => {
                return Err(ReplanError::Config(format!(
                    "key `{key}`: unsupported value type {}",
                    other.type_str()
                )))
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_and_render() {
        let cfg = Config::new();
        assert_eq!(cfg.usize("env.resolution"), 64);
        assert_eq!(cfg.f64("curiosity.beta"), 0.2);
        assert_eq!(cfg.str_or("planner.aggregator", "sum"), "sum");
        let text = cfg.resolved();
        assert!(text.contains("rem.k_ratio"));
    }

    #[test]
    fn unknown_key_is_config_error() {
        let mut cfg = Config::new();
        let err = cfg.set_str("rem.k_thresholdd", "12").unwrap_err();
        assert!(err.is_config());
        assert!(format!("{err}").contains("rem.k_thresholdd"));
    }

    #[test]
    fn overrides_beat_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "rem.batch = 32\n[drm]\nsteps = 10\n").unwrap();
        let mut cfg = Config::load_file(&path).unwrap();
        assert_eq!(cfg.usize("rem.batch"), 32);
        assert_eq!(cfg.usize("drm.steps"), 10);
        cfg.apply_overrides(&[("rem.batch".into(), "16".into())]).unwrap();
        assert_eq!(cfg.usize("rem.batch"), 16);
    }

    #[test]
    fn int_literal_accepted_for_float_key() {
        let mut cfg = Config::new();
        cfg.set("curiosity.beta", Value::Int(1)).unwrap();
        assert_eq!(cfg.f64("curiosity.beta"), 1.0);
    }
}
