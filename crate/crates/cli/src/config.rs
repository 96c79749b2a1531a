//! `key = value` config files mapped onto serde structs.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn to_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies overrides to `base`. Keys must already exist on the struct;
/// values are read as JSON where possible and as strings otherwise.
pub fn apply<T: Serialize + DeserializeOwned>(base: &T, pairs: &[(String, String)]) -> Result<T, CliError> {
    let mut obj: Map<String, Value> = match serde_json::to_value(base) {
        Ok(Value::Object(m)) => m,
        _ => return Err(CliError::Runtime("config type is not a struct".into())),
    };
    for (k, v) in pairs {
        let key = k.replace('-', "_");
        if !obj.contains_key(&key) {
            return Err(CliError::Usage(format!("unknown config key `{k}`")));
        }
        obj.insert(key, to_value(v));
    }
    serde_json::from_value(Value::Object(obj)).map_err(|e| CliError::Usage(format!("bad config value: {e}")))
}

/// Pairs from an optional config file, with later flag pairs winning.
pub fn load_pairs(path: Option<&Path>, flags: Vec<(String, String)>) -> Result<Vec<(String, String)>, CliError> {
    let mut pairs = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            parse_kv(&text)?
        }
        None => Vec::new(),
    };
    pairs.extend(flags);
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rewardmatch::training::{ObjectiveKind, TrainConfig};

    #[test]
    fn overrides_and_unknown_keys() {
        let pairs = parse_kv("# desk\nbatch_size = 64\nlr=0.002\nobjective = surrogate_entropy\nwork_budget = 10\n").unwrap();
        let c: TrainConfig = apply(&TrainConfig::default(), &pairs).unwrap();
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.lr, 0.002);
        assert_eq!(c.objective, ObjectiveKind::SurrogateEntropy);
        assert_eq!(c.work_budget, Some(10));
        let bad = apply(&TrainConfig::default(), &[("bogus".into(), "1".into())]);
        assert!(matches!(bad, Err(CliError::Usage(_))));
        assert!(parse_kv("no equals sign").is_err());
    }
}
