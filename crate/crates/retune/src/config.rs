//! JSON config loading with path-attributed errors and `--set` overrides.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::Value as Json;

use crate::error::{Error, Result};

/// Read a JSON file into an untyped tree.
pub fn load_value(path: &Path) -> Result<Json> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config {
        path: path.display().to_string(),
        reason: format!("invalid JSON: {e}"),
    })
}

/// Deserialize a tree into a typed config, reporting the dotted path of the
/// first offending field.
pub fn from_value<C: DeserializeOwned>(value: Json) -> Result<C> {
    let mut track = serde_path_to_error::Track::new();
    let de = serde_path_to_error::Deserializer::new(value, &mut track);
    C::deserialize(de).map_err(|e| Error::Config {
        path: track.path().to_string(),
        reason: e.to_string(),
    })
}

/// Apply `key.path=value` overrides in order. Values parse as JSON when they
/// can, otherwise they are taken as strings, so `steps=40` is a number and
/// `name=ft` is a string without extra quoting.
pub fn apply_overrides(root: &mut Json, sets: &[String]) -> Result<()> {
    for set in sets {
        let (key, raw) = set.split_once('=').ok_or_else(|| Error::Config {
            path: set.clone(),
            reason: "override must look like key.path=value".into(),
        })?;
        if key.is_empty() {
            return Err(Error::Config {
                path: set.clone(),
                reason: "override key is empty".into(),
            });
        }
        let value: Json =
            serde_json::from_str(raw).unwrap_or_else(|_| Json::String(raw.to_string()));
        let mut cursor = &mut *root;
        let segments: Vec<&str> = key.split('.').collect();
        for (i, segment) in segments.iter().enumerate() {
            let last = i + 1 == segments.len();
            match cursor {
                Json::Object(map) => {
                    if last {
                        map.insert(segment.to_string(), value);
                        break;
                    }
                    cursor = map
                        .entry(segment.to_string())
                        .or_insert_with(|| Json::Object(Default::default()));
                }
                Json::Array(items) => {
                    let idx: usize = segment.parse().map_err(|_| Error::Config {
                        path: key.to_string(),
                        reason: format!("`{segment}` is not an array index"),
                    })?;
                    let slot = items.get_mut(idx).ok_or_else(|| Error::Config {
                        path: key.to_string(),
                        reason: format!("index {idx} out of bounds ({} elements)", idx),
                    })?;
                    if last {
                        *slot = value;
                        break;
                    }
                    cursor = slot;
                }
                other => {
                    return Err(Error::Config {
                        path: key.to_string(),
                        reason: format!(
                            "cannot descend into `{segment}`: parent is {}",
                            kind(other)
                        ),
                    });
                }
            }
        }
    }
    Ok(())
}

fn kind(v: &Json) -> &'static str {
    match v {
        Json::Null => "null",
        Json::Bool(_) => "a bool",
        Json::Number(_) => "a number",
        Json::String(_) => "a string",
        Json::Array(_) => "an array",
        Json::Object(_) => "an object",
    }
}

/// Load a config file, apply overrides, and deserialize.
pub fn load<C: DeserializeOwned>(path: &Path, sets: &[String]) -> Result<C> {
    let mut value = load_value(path)?;
    apply_overrides(&mut value, sets)?;
    from_value(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{PipelineConfig, StageConfig};
    use serde_json::json;
    use std::io::Write;
    use tempfile::NamedTempFile;

    fn stage_json() -> Json {
        json!({
            "name": "ft",
            "objective": "finetune",
            "init": {"checkpoint": {"path": "pre.w2vs", "surgery": ["attach_head:12"]}},
            "manifests": ["train.jsonl"],
            "steps": 40
        })
    }

    #[test]
    fn stage_config_round_trips_with_defaults() {
        let cfg: StageConfig = from_value(stage_json()).unwrap();
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.eval_every, 25);
        assert!(cfg.seed.is_none());
        assert_eq!(cfg.mask.span, 10);
    }

    #[test]
    fn type_errors_name_the_offending_path() {
        let mut v = stage_json();
        v["optimizer"] = json!({"peak_lr": "fast"});
        let err = from_value::<StageConfig>(v).unwrap_err();
        match err {
            Error::Config { path, .. } => assert_eq!(path, "optimizer.peak_lr"),
            other => panic!("unexpected error {other}"),
        }
        let mut v = stage_json();
        v["objective"] = json!("pretraining");
        let err = from_value::<StageConfig>(v).unwrap_err();
        match err {
            Error::Config { path, .. } => assert_eq!(path, "objective"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v = stage_json();
        v["stps"] = json!(40);
        assert!(from_value::<StageConfig>(v).is_err());
    }

    #[test]
    fn overrides_reach_nested_fields_and_array_elements() {
        let mut v = json!({
            "seed": 1,
            "stages": [stage_json()]
        });
        apply_overrides(
            &mut v,
            &[
                "seed=99".into(),
                "stages.0.steps=7".into(),
                "stages.0.optimizer.peak_lr=0.01".into(),
                "stages.0.name=renamed".into(),
            ],
        )
        .unwrap();
        let cfg: PipelineConfig = from_value(v).unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.stages[0].steps, 7);
        assert_eq!(cfg.stages[0].optimizer.peak_lr, 0.01);
        assert_eq!(cfg.stages[0].name, "renamed");
    }

    #[test]
    fn malformed_overrides_are_attributed() {
        let mut v = stage_json();
        assert!(apply_overrides(&mut v, &["steps".into()]).is_err());
        assert!(apply_overrides(&mut v, &["manifests.x=3".into()]).is_err());
        assert!(apply_overrides(&mut v, &["manifests.4=3".into()]).is_err());
        assert!(apply_overrides(&mut v, &["name.deep=3".into()]).is_err());
    }

    #[test]
    fn load_reads_overrides_and_deserializes() {
        let mut file = NamedTempFile::new().unwrap();
        write!(file, "{}", stage_json()).unwrap();
        let cfg: StageConfig = load(file.path(), &["steps=3".into()]).unwrap();
        assert_eq!(cfg.steps, 3);
        let err = load::<StageConfig>(Path::new("/nonexistent.json"), &[]).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }
}
