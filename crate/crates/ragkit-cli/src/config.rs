//! Shared run configuration: a JSON config file provides defaults, flags
//! override it, and unknown or out-of-range keys are rejected with every
//! offending key listed.

use std::collections::BTreeSet;
use std::path::Path;

use serde::Deserialize;

use ragkit_core::retrieval::Strategy;
use ragkit_core::trainprep::PercentileScope;

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub k_coarse: Option<usize>,
    pub k_fine: Option<usize>,
    pub lambda: Option<f64>,
    pub strategy: Option<Strategy>,
    pub text_pool_depth: Option<usize>,
    pub percentile: Option<f64>,
    pub p_oracle: Option<f64>,
    pub k_rag_max: Option<usize>,
    pub percentile_scope: Option<PercentileScope>,
    pub k: Option<usize>,
}

const KNOWN_KEYS: [&str; 12] = [
    "seed",
    "threads",
    "k_coarse",
    "k_fine",
    "lambda",
    "strategy",
    "text_pool_depth",
    "percentile",
    "p_oracle",
    "k_rag_max",
    "percentile_scope",
    "k",
];

/// Parse and validate a config file, listing every offending key at once.
pub fn load_config(path: &Path) -> Result<ConfigFile, String> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&raw).map_err(|e| format!("config is not valid JSON: {e}"))?;
    let obj = value
        .as_object()
        .ok_or_else(|| "config must be a JSON object".to_string())?;

    let known: BTreeSet<&str> = KNOWN_KEYS.into_iter().collect();
    let mut problems: Vec<String> = obj
        .keys()
        .filter(|k| !known.contains(k.as_str()))
        .map(|k| format!("unknown key {k:?}"))
        .collect();

    let cfg: ConfigFile = match serde_json::from_value(value.clone()) {
        Ok(cfg) => cfg,
        Err(e) => {
            if problems.is_empty() {
                problems.push(format!("bad value: {e}"));
            }
            ConfigFile::default()
        }
    };

    if let Some(l) = cfg.lambda {
        if !(0.0..=1.0).contains(&l) {
            problems.push(format!("lambda {l} outside [0,1]"));
        }
    }
    if let Some(p) = cfg.percentile {
        if !(0.0 < p && p < 100.0) {
            problems.push(format!("percentile {p} outside (0,100)"));
        }
    }
    if let Some(p) = cfg.p_oracle {
        if !(0.0..=1.0).contains(&p) {
            problems.push(format!("p_oracle {p} outside [0,1]"));
        }
    }
    if let Some(k) = cfg.k_fine {
        if k == 0 {
            problems.push("k_fine must be >= 1".into());
        }
    }

    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(format!("invalid config: {}", problems.join("; ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unknown_keys_listing_all() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 1, "bogus": 2, "wrong": 3}"#).unwrap();
        let err = load_config(&path).unwrap_err();
        assert!(err.contains("bogus"), "{err}");
        assert!(err.contains("wrong"), "{err}");
    }

    #[test]
    fn collects_range_violations() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"lambda": 1.5, "p_oracle": -0.1}"#).unwrap();
        let err = load_config(&path).unwrap_err();
        assert!(err.contains("lambda"), "{err}");
        assert!(err.contains("p_oracle"), "{err}");
    }

    #[test]
    fn accepts_valid_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"seed": 7, "lambda": 0.5, "strategy": "text2text", "percentile_scope": "per-report"}"#,
        )
        .unwrap();
        let cfg = load_config(&path).unwrap();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.strategy, Some(Strategy::Text2Text));
    }
}
