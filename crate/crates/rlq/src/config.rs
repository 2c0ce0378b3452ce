//! Layered configuration: defaults, then a JSON file, then `key=value`
//! overrides. Keys are checked against the defaults, so a misspelt key is
//! an error rather than silently ignored.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Rejects any key of `given` that does not exist in `defaults`.
fn check_keys(defaults: &Value, given: &Value, prefix: &str) -> Result<()> {
    let (Value::Object(d), Value::Object(g)) = (defaults, given) else {
        return Ok(());
    };
    for (k, v) in g {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match d.get(k) {
            None => return Err(Error::validation(path, "unknown configuration key")),
            Some(dv) => check_keys(dv, v, &path)?,
        }
    }
    Ok(())
}

fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Parses `a.b=value` into a nested object. The value is read as JSON when
/// it parses, otherwise as a plain string.
pub fn parse_override(s: &str) -> Result<Value> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::validation(s, "override must look like key=value"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::validation("set", "override has an empty key"));
    }
    let mut v =
        serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    for part in key.rsplit('.') {
        let mut m = Map::new();
        m.insert(part.to_string(), v);
        v = Value::Object(m);
    }
    Ok(v)
}

/// Finds the top-level key responsible for a deserialization failure by
/// resetting one key at a time to its default.
fn blame<T: DeserializeOwned>(merged: &Value, defaults: &Value) -> String {
    if let (Value::Object(m), Value::Object(d)) = (merged, defaults) {
        for k in m.keys() {
            let mut trial = merged.clone();
            trial[k] = d.get(k).cloned().unwrap_or(Value::Null);
            if serde_json::from_value::<T>(trial).is_ok() {
                return k.clone();
            }
        }
    }
    "config".into()
}

/// Defaults ⊕ file ⊕ overrides, returned typed and as the merged JSON.
pub fn resolve<T>(defaults: &T, file: Option<&Path>, overrides: &[String]) -> Result<(T, Value)>
where
    T: Serialize + DeserializeOwned,
{
    let base = serde_json::to_value(defaults)?;
    let mut merged = base.clone();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::validation("config", format!("{}: {e}", path.display())))?;
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| Error::validation("config", format!("{}: {e}", path.display())))?;
        if !v.is_object() {
            return Err(Error::validation(
                "config",
                "config file must hold a JSON object",
            ));
        }
        check_keys(&base, &v, "")?;
        merge(&mut merged, v);
    }
    for o in overrides {
        let v = parse_override(o)?;
        check_keys(&base, &v, "")?;
        merge(&mut merged, v);
    }
    match serde_json::from_value::<T>(merged.clone()) {
        Ok(t) => {
            // Round-trip so the record shows every field in canonical form.
            let canon = serde_json::to_value(&t)?;
            Ok((t, canon))
        }
        Err(e) => Err(Error::validation(blame::<T>(&merged, &base), e.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rlq_core::trainer::{ExperimentConfig, TadVariant};

    fn write(dir: &Path, text: &str) -> std::path::PathBuf {
        let p = dir.join("c.json");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn layers_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            r#"{"epochs": 7, "seed": 3, "tad_variant": "ss_mse_nt"}"#,
        );
        let (cfg, _) = resolve(&ExperimentConfig::default(), Some(&p), &["seed=9".into()]).unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.tad_variant, TadVariant::SsMseNt);
        assert_eq!(cfg.batch_size, ExperimentConfig::default().batch_size);
    }

    #[test]
    fn unknown_keys_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), r#"{"epochz": 7}"#);
        match resolve(&ExperimentConfig::default(), Some(&p), &[]) {
            Err(Error::Validation { key, .. }) => assert_eq!(key, "epochz"),
            other => panic!("{other:?}"),
        }
        match resolve(
            &ExperimentConfig::default(),
            None,
            &["lq_policy.foo=1".into()],
        ) {
            Err(Error::Validation { key, .. }) => assert_eq!(key, "lq_policy.foo"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_values_name_their_key() {
        match resolve(
            &ExperimentConfig::default(),
            None,
            &["batch_size=\"many\"".into()],
        ) {
            Err(Error::Validation { key, .. }) => assert_eq!(key, "batch_size"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn nested_override_keeps_siblings() {
        let (cfg, _) = resolve(
            &ExperimentConfig::default(),
            None,
            &["lq_policy.apply_probability=0.25".into()],
        )
        .unwrap();
        assert_eq!(cfg.lq_policy.apply_probability, 0.25);
        assert_eq!(cfg.lq_policy.enabled.len(), 3);
    }
}
