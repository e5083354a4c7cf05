//! Effective settings: command-line flags over `APA_*` environment variables
//! over a JSON config file over built-in defaults.

use apa_core::boost::{BoostParams, Weighting};
use apa_core::eval::EvalConfig;
use apa_core::features::{FeatureConfig, NoiseSetting, RegistrationMode};
use apa_core::register::{MetricKind, RegistrationConfig, SimilarityMetric};
use apa_core::tree::TreeParams;
use apa_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const ENV_PREFIX: &str = "APA_";
/// Environment variables under the prefix that are not settings.
pub const ENV_RESERVED: &[&str] = &["APA_LOG"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseChoice {
    Identity,
    Ar1,
    Estimate,
}

/// Every tunable the pipeline reads. Thread count is deliberately absent:
/// it must not change any output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub seed: u64,
    pub max_depth: usize,
    pub min_leaf_fraction: f64,
    pub weighting: Weighting,
    pub normalize: bool,
    pub noise: NoiseChoice,
    /// AR(1) coefficient used when `noise` is `ar1`
    pub rho: f64,
    pub window: usize,
    pub hrf_duration_s: f64,
    pub registration: RegistrationMode,
    pub metric: MetricKind,
    pub bins: usize,
    pub levels: Vec<usize>,
    pub max_sweeps: usize,
    pub tolerance: f64,
    pub threshold: f64,
}

impl Default for Settings {
    fn default() -> Self {
        let reg = RegistrationConfig::default();
        let features = FeatureConfig::default();
        Self {
            seed: 42,
            max_depth: TreeParams::default().max_depth,
            min_leaf_fraction: TreeParams::default().min_leaf_fraction,
            weighting: Weighting::default(),
            normalize: EvalConfig::default().normalize,
            noise: NoiseChoice::Estimate,
            rho: 0.0,
            window: features.window,
            hrf_duration_s: features.hrf_duration_s,
            registration: features.registration,
            metric: reg.metric.kind,
            bins: reg.metric.bins,
            levels: reg.levels,
            max_sweeps: reg.max_sweeps,
            tolerance: reg.tolerance,
            threshold: 0.5,
        }
    }
}

impl Settings {
    pub fn keys() -> Vec<String> {
        match serde_json::to_value(Settings::default()) {
            Ok(Value::Object(m)) => m.keys().cloned().collect(),
            _ => unreachable!("settings serialise to an object"),
        }
    }

    pub fn boost(&self) -> BoostParams {
        BoostParams {
            tree: TreeParams {
                max_depth: self.max_depth,
                min_leaf_fraction: self.min_leaf_fraction,
            },
            weighting: self.weighting,
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            boost: self.boost(),
            normalize: self.normalize,
        }
    }

    pub fn noise_setting(&self) -> NoiseSetting {
        match self.noise {
            NoiseChoice::Identity => NoiseSetting::Identity,
            NoiseChoice::Ar1 => NoiseSetting::Ar1 { rho: self.rho },
            NoiseChoice::Estimate => NoiseSetting::Estimate,
        }
    }

    pub fn registration(&self) -> Result<RegistrationConfig> {
        Ok(RegistrationConfig {
            metric: SimilarityMetric::new(self.metric, self.bins)?,
            levels: self.levels.clone(),
            max_sweeps: self.max_sweeps,
            tolerance: self.tolerance,
        })
    }

    pub fn features(&self) -> Result<FeatureConfig> {
        Ok(FeatureConfig {
            noise: self.noise_setting(),
            window: self.window,
            hrf_duration_s: self.hrf_duration_s,
            registration: self.registration,
            register: self.registration()?,
            keep_voxels: false,
        })
    }
}

/// Settings key behind an environment variable, e.g. `APA_MAX_DEPTH` ->
/// `max_depth`. `None` for variables outside the prefix or reserved ones.
pub fn env_key(var: &str) -> Option<String> {
    if ENV_RESERVED.contains(&var) {
        return None;
    }
    var.strip_prefix(ENV_PREFIX).map(|k| k.to_ascii_lowercase())
}

/// Environment values are JSON when they parse as JSON, bare strings
/// otherwise, so `APA_METRIC=cr` and `APA_LEVELS=[2,1]` both work.
pub fn env_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn check_keys<'a>(keys: impl IntoIterator<Item = &'a String>, known: &[String]) -> Result<()> {
    for k in keys {
        if !known.contains(k) {
            return Err(Error::UnknownKey(k.clone()));
        }
    }
    Ok(())
}

/// Merge the layers, lowest precedence first. `env` holds raw
/// `(variable, value)` pairs; variables outside the prefix are ignored.
pub fn resolve(file: Option<&Map<String, Value>>, env: &[(String, String)], flags: &Map<String, Value>) -> Result<Settings> {
    let known = Settings::keys();
    let Value::Object(mut merged) = serde_json::to_value(Settings::default()).expect("settings serialise") else {
        unreachable!("settings serialise to an object");
    };
    if let Some(file) = file {
        check_keys(file.keys(), &known)?;
        merged.extend(file.clone());
    }
    let mut env_layer = Map::new();
    for (var, raw) in env {
        if let Some(key) = env_key(var) {
            env_layer.insert(key, env_value(raw));
        }
    }
    check_keys(env_layer.keys(), &known)?;
    merged.extend(env_layer);
    check_keys(flags.keys(), &known)?;
    merged.extend(flags.clone());
    serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Invalid(format!("configuration: {e}")))
}

pub fn parse_config_file(text: &str, origin: &str) -> Result<Map<String, Value>> {
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(Error::malformed(origin, "config file must hold a JSON object")),
        Err(e) => Err(Error::malformed(origin, e.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn obj(v: Value) -> Map<String, Value> {
        match v {
            Value::Object(m) => m,
            _ => panic!("not an object"),
        }
    }

    #[test]
    fn no_inputs_gives_defaults() {
        assert_eq!(resolve(None, &[], &Map::new()).unwrap(), Settings::default());
        let d = Settings::default();
        assert_eq!(d.seed, 42);
        assert_eq!(d.max_depth, 8);
        assert_eq!(d.metric, MetricKind::Nmi);
        assert_eq!(d.bins, 64);
        assert_eq!(d.levels, vec![4, 2, 1]);
    }

    #[test]
    fn flag_beats_file() {
        let file = obj(json!({"max_depth": 3, "metric": "cr"}));
        let flags = obj(json!({"max_depth": 5}));
        let s = resolve(Some(&file), &[], &flags).unwrap();
        assert_eq!(s.max_depth, 5);
        assert_eq!(s.metric, MetricKind::Cr);
    }

    #[test]
    fn unknown_keys_rejected_in_every_layer() {
        let bad = obj(json!({"depth": 3}));
        assert!(matches!(resolve(Some(&bad), &[], &Map::new()), Err(Error::UnknownKey(k)) if k == "depth"));
        assert!(matches!(resolve(None, &[], &bad), Err(Error::UnknownKey(_))));
        let env = vec![("APA_DEPTH".to_string(), "3".to_string())];
        assert!(matches!(resolve(None, &env, &Map::new()), Err(Error::UnknownKey(_))));
        // unrelated and reserved variables pass through
        let env = vec![("HOME".into(), "/x".into()), ("APA_LOG".into(), "debug".into())];
        assert!(resolve(None, &env, &Map::new()).is_ok());
    }

    #[test]
    fn env_values_parse_as_json_or_string() {
        let env = vec![
            ("APA_LEVELS".to_string(), "[2,1]".to_string()),
            ("APA_METRIC".to_string(), "woods".to_string()),
            ("APA_NORMALIZE".to_string(), "true".to_string()),
        ];
        let s = resolve(None, &env, &Map::new()).unwrap();
        assert_eq!(s.levels, vec![2, 1]);
        assert_eq!(s.metric, MetricKind::Woods);
        assert!(s.normalize);
    }

    #[test]
    fn wrong_types_are_invalid() {
        let flags = obj(json!({"seed": "many"}));
        assert!(matches!(resolve(None, &[], &flags), Err(Error::Invalid(_))));
    }

    /// Candidate values per key for random scenarios.
    fn samples() -> Vec<(&'static str, Vec<Value>)> {
        vec![
            ("seed", vec![json!(1), json!(7), json!(99)]),
            ("max_depth", vec![json!(2), json!(4), json!(6)]),
            ("metric", vec![json!("mi"), json!("cr"), json!("je")]),
            ("normalize", vec![json!(true), json!(false)]),
            ("levels", vec![json!([2, 1]), json!([1]), json!([8, 4, 2, 1])]),
            ("threshold", vec![json!(0.25), json!(0.75)]),
            ("noise", vec![json!("identity"), json!("ar1")]),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        /// Per-key lookup in precedence order agrees with the layered merge.
        #[test]
        fn precedence_matches_per_key_lookup(choice in proptest::collection::vec((0u8..16, 0usize..3, 0usize..3, 0usize..3), 7)) {
            let mut file = Map::new();
            let mut env = Vec::new();
            let mut flags = Map::new();
            for ((key, values), (mask, a, b, c)) in samples().into_iter().zip(&choice) {
                if mask & 1 != 0 { file.insert(key.into(), values[a % values.len()].clone()); }
                if mask & 2 != 0 {
                    let v = &values[b % values.len()];
                    let raw = match v { Value::String(s) => s.clone(), other => other.to_string() };
                    env.push((format!("APA_{}", key.to_ascii_uppercase()), raw));
                }
                if mask & 4 != 0 { flags.insert(key.into(), values[c % values.len()].clone()); }
            }
            let got = serde_json::to_value(resolve(Some(&file), &env, &flags).unwrap()).unwrap();
            let defaults = serde_json::to_value(Settings::default()).unwrap();
            for key in Settings::keys() {
                let env_hit = env
                    .iter()
                    .rev()
                    .find(|(k, _)| k == &format!("APA_{}", key.to_ascii_uppercase()))
                    .map(|(_, raw)| serde_json::from_str::<Value>(raw).unwrap_or(Value::String(raw.clone())));
                let want = flags
                    .get(&key)
                    .cloned()
                    .or(env_hit)
                    .or_else(|| file.get(&key).cloned())
                    .unwrap_or_else(|| defaults[&key].clone());
                prop_assert_eq!(&got[&key], &want, "key {}", key);
            }
        }
    }
}
