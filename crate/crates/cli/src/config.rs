use std::fmt;
use std::path::{Path, PathBuf};

use serde_json::Value;
use spoofshield_core::attack::AttackSchedule;
use spoofshield_core::detect::DetectorKind;
use spoofshield_core::pipeline::{ExperimentConfig, ScenarioRef};

/// Bad input from the user: exits with code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectorChoice {
    One(DetectorKind),
    All,
}

impl std::str::FromStr for DetectorChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "all" {
            Ok(DetectorChoice::All)
        } else {
            s.parse().map(DetectorChoice::One).map_err(|_| format!("expected lstm, cusum, iforest or all, got {s:?}"))
        }
    }
}

/// Command-line adjustments applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub set: Vec<String>,
    pub seed: Option<u64>,
    pub mitigation: Option<bool>,
    pub detector: Option<DetectorChoice>,
    /// `none`, or a JSON file holding an attack list.
    pub attack: Option<String>,
}

/// A loaded config with every scenario path resolved.
pub struct Loaded {
    pub config: ExperimentConfig,
    pub base: PathBuf,
}

/// Sets `value` at the dotted `path`, creating objects as needed.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), String> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(format!("bad key {path:?}"));
    }
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        let obj = node.as_object_mut().ok_or_else(|| format!("{path}: {key} is inside a non-object"))?;
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node.as_object_mut().ok_or_else(|| format!("{path}: parent is not an object"))?;
    obj.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// `K=V` with V parsed as JSON, or taken as a string if it is not JSON.
fn parse_assignment(s: &str) -> Result<(String, Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("--set expects KEY=VALUE, got {s:?}"))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

pub fn load(path: &Path, ov: &Overrides) -> anyhow::Result<Loaded> {
    let text = std::fs::read_to_string(path).map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let parsed = if ov.set.is_empty() {
        serde_json::from_str::<ExperimentConfig>(&text)
    } else {
        let mut value: Value =
            serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        for s in &ov.set {
            let (k, v) = parse_assignment(s).map_err(config_error)?;
            set_path(&mut value, &k, v).map_err(config_error)?;
        }
        serde_json::from_value(value)
    };
    let mut config = parsed.map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    match ov.attack.as_deref() {
        Some("none") => config.attack = AttackSchedule::default(),
        Some(file) => {
            let text = std::fs::read_to_string(file).map_err(|e| config_error(format!("cannot read attack file {file}: {e}")))?;
            config.attack = serde_json::from_str(&text).map_err(|e| config_error(format!("{file}: {e}")))?;
        }
        None => {}
    }

    let mut scenario = config.scenario.resolve(&base).map_err(|e| config_error(e.to_string()))?;
    let mut calibration = Vec::new();
    for s in &config.calibration.scenarios {
        calibration.push(ScenarioRef::Inline(Box::new(s.resolve(&base).map_err(|e| config_error(e.to_string()))?)));
    }
    config.calibration.scenarios = calibration;
    if let Some(seed) = ov.seed {
        scenario.seed = seed;
        config.campaign.seed = seed;
        config.calibration.settings.seed = seed;
    }
    config.scenario = ScenarioRef::Inline(Box::new(scenario));
    if let Some(m) = ov.mitigation {
        config.fusion.mitigation = m;
    }
    match ov.detector {
        Some(DetectorChoice::One(k)) => {
            config.detectors.enabled = vec![k];
            config.fusion.primary = k;
        }
        Some(DetectorChoice::All) => config.detectors.enabled = DetectorKind::ALL.to_vec(),
        None => {}
    }
    config.validate().map_err(|e| config_error(e.to_string()))?;
    Ok(Loaded { config, base })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn set_creates_nested_keys() {
        let mut v = json!({"a": {"b": 1}});
        set_path(&mut v, "a.c.d", json!(true)).unwrap();
        set_path(&mut v, "a.b", json!(2)).unwrap();
        assert_eq!(v, json!({"a": {"b": 2, "c": {"d": true}}}));
        assert!(set_path(&mut v, "a.b.x", json!(0)).is_err());
    }

    #[test]
    fn assignment_values() {
        assert_eq!(parse_assignment("x.y=3").unwrap(), ("x.y".into(), json!(3)));
        assert_eq!(parse_assignment("k=cusum").unwrap(), ("k".into(), json!("cusum")));
        assert_eq!(parse_assignment("k=[1, 2]").unwrap(), ("k".into(), json!([1, 2])));
        assert!(parse_assignment("novalue").is_err());
    }
}
