//! `key = value` run-configuration files.
//!
//! One assignment per line; `#` starts a comment; keys use the flag names
//! with underscores (`max_iters = 500`).  Values read exactly like their
//! command-line counterparts.  Precedence is built-in defaults, then the
//! file, then environment variables and explicit flags.

use std::collections::BTreeMap;
use std::path::Path;

/// Parsed file contents, key → raw value string.
pub type ConfigMap = BTreeMap<String, String>;

/// Keys any command may set from a file.  Unknown keys are usage errors so
/// typos cannot silently revert a run to defaults.
const KNOWN_KEYS: &[&str] = &[
    "model",
    "models",
    "subset",
    "fractions",
    "seed",
    "max_iters",
    "batch_size",
    "eval_every",
    "mc_samples",
    "eval_modes",
    "base_lr",
    "gamma",
    "power",
    "momentum",
    "weight_decay",
    "mode",
    "t",
    "t_grid",
    "repeats",
    "data_dir",
    "out",
    "run_id",
];

/// Reads and validates a configuration file.  Returns a usage-style error
/// message on malformed lines or unknown keys.
pub fn load_config(path: &Path) -> Result<ConfigMap, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let mut map = ConfigMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!(
                "{}:{}: expected `key = value`, got {raw:?}",
                path.display(),
                lineno + 1
            ));
        };
        let key = key.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(format!(
                "{}:{}: unknown config key {key:?}",
                path.display(),
                lineno + 1
            ));
        }
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(format!(
                "{}:{}: duplicate config key {key:?}",
                path.display(),
                lineno + 1
            ));
        }
    }
    Ok(map)
}
