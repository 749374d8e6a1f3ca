//! Parsing and serialization of job spec documents.
//!
//! The document is JSON with top-level keys `name`, `roles`, `channels`,
//! `datasetGroups` and `hyperparams`. Role and channel attribute names are
//! `replica`, `isDataConsumer`, `groupAssociation`, `program`, `pair`,
//! `groupBy`, `funcTags`, `backend` and `bandwidthShape`. A machine-readable
//! schema ships in `docs/jobspec.schema.json`.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use serde_json::{Map, Value};
use thiserror::Error;

use super::{BackendKind, ChannelSpec, HyperValue, JobSpec, RoleSpec, DEFAULT_GROUP};

#[derive(Debug, Error)]
pub enum SpecError {
    /// Document is not well-formed JSON.
    #[error("parse error: {0}")]
    Parse(String),
    /// Document is well-formed but violates the schema at `path`.
    #[error("schema error at {path}: {reason}")]
    Schema { path: String, reason: String },
}

fn schema_err<T>(path: impl Into<String>, reason: impl Into<String>) -> Result<T, SpecError> {
    Err(SpecError::Schema {
        path: path.into(),
        reason: reason.into(),
    })
}

/// Parses a job spec document, filling defaults: `replica` 1, backend
/// `brokersim`, `groupBy` `["default"]`.
pub fn parse_job_spec(text: &str) -> Result<JobSpec, SpecError> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| SpecError::Parse(e.to_string()))?;
    let root = as_object(&value, "$")?;

    let job_name = req_str(root, "name", "$")?;
    let mut roles = Vec::new();
    for (i, v) in req_array(root, "roles", "$")?.iter().enumerate() {
        roles.push(parse_role(v, &format!("roles[{i}]"))?);
    }
    let mut channels = Vec::new();
    for (i, v) in req_array(root, "channels", "$")?.iter().enumerate() {
        channels.push(parse_channel(v, &format!("channels[{i}]"))?);
    }

    let mut dataset_groups = IndexMap::new();
    if let Some(v) = root.get("datasetGroups") {
        let obj = as_object(v, "datasetGroups")?;
        for (label, ids) in obj {
            let path = format!("datasetGroups.{label}");
            let arr = as_array(ids, &path)?;
            let mut list = Vec::new();
            for (i, id) in arr.iter().enumerate() {
                list.push(as_str(id, &format!("{path}[{i}]"))?);
            }
            dataset_groups.insert(label.clone(), list);
        }
    }

    let mut hyperparams = IndexMap::new();
    if let Some(v) = root.get("hyperparams") {
        let obj = as_object(v, "hyperparams")?;
        for (key, val) in obj {
            let path = format!("hyperparams.{key}");
            let hv = match val {
                Value::Number(n) => {
                    if let Some(i) = n.as_i64() {
                        HyperValue::Int(i)
                    } else if let Some(f) = n.as_f64() {
                        HyperValue::Float(f)
                    } else {
                        return schema_err(path, "unsupported number");
                    }
                }
                Value::Bool(b) => HyperValue::Bool(*b),
                Value::String(s) => HyperValue::Str(s.clone()),
                _ => return schema_err(path, "expected scalar"),
            };
            hyperparams.insert(key.clone(), hv);
        }
    }

    let mut spec = JobSpec {
        job_name,
        roles,
        channels,
        dataset_groups,
        hyperparams,
    };
    spec.fill_defaults();
    Ok(spec)
}

fn parse_role(value: &Value, path: &str) -> Result<RoleSpec, SpecError> {
    let obj = as_object(value, path)?;
    let name = req_str(obj, "name", path)?;
    let replica = match obj.get("replica") {
        None => 1,
        Some(v) => {
            let p = format!("{path}.replica");
            let n = v
                .as_u64()
                .ok_or(())
                .or_else(|_| schema_err::<u64>(&p, "expected positive integer"))?;
            if n == 0 || n > u32::MAX as u64 {
                return schema_err(p, "replica must be a positive integer");
            }
            n as u32
        }
    };
    let is_data_consumer = opt_bool(obj, "isDataConsumer", path)?.unwrap_or(false);
    let mut group_association = Vec::new();
    if let Some(v) = obj.get("groupAssociation") {
        let arr = as_array(v, &format!("{path}.groupAssociation"))?;
        for (i, entry) in arr.iter().enumerate() {
            let p = format!("{path}.groupAssociation[{i}]");
            let entry_obj = as_object(entry, &p)?;
            let mut map = BTreeMap::new();
            for (ch, group) in entry_obj {
                map.insert(ch.clone(), as_str(group, &format!("{p}.{ch}"))?);
            }
            group_association.push(map);
        }
    }
    let program = match obj.get("program") {
        Some(v) => as_str(v, &format!("{path}.program"))?,
        None => name.clone(),
    };
    Ok(RoleSpec {
        name,
        replica,
        is_data_consumer,
        group_association,
        program,
    })
}

fn parse_channel(value: &Value, path: &str) -> Result<ChannelSpec, SpecError> {
    let obj = as_object(value, path)?;
    let name = req_str(obj, "name", path)?;
    let pair_path = format!("{path}.pair");
    let pair_arr = req_array(obj, "pair", path)?;
    if pair_arr.len() != 2 {
        return schema_err(pair_path, "pair must name exactly two roles");
    }
    let pair = (
        as_str(&pair_arr[0], &format!("{pair_path}[0]"))?,
        as_str(&pair_arr[1], &format!("{pair_path}[1]"))?,
    );

    let mut group_by = Vec::new();
    if let Some(v) = obj.get("groupBy") {
        let arr = as_array(v, &format!("{path}.groupBy"))?;
        for (i, g) in arr.iter().enumerate() {
            group_by.push(as_str(g, &format!("{path}.groupBy[{i}]"))?);
        }
    }
    if group_by.is_empty() {
        group_by.push(DEFAULT_GROUP.to_string());
    }

    let mut func_tags = BTreeMap::new();
    if let Some(v) = obj.get("funcTags") {
        let map = as_object(v, &format!("{path}.funcTags"))?;
        for (role, tags) in map {
            let p = format!("{path}.funcTags.{role}");
            let arr = as_array(tags, &p)?;
            let mut list = Vec::new();
            for (i, t) in arr.iter().enumerate() {
                list.push(as_str(t, &format!("{p}[{i}]"))?);
            }
            func_tags.insert(role.clone(), list);
        }
    }

    let backend = match obj.get("backend") {
        None => BackendKind::default(),
        Some(v) => {
            let p = format!("{path}.backend");
            match as_str(v, &p)?.to_ascii_lowercase().as_str() {
                "brokersim" | "broker" => BackendKind::BrokerSim,
                "p2p" | "pointtopoint" => BackendKind::PointToPoint,
                other => {
                    return schema_err(p, format!("unknown backend '{other}'"));
                }
            }
        }
    };

    let mut bandwidth_shape = BTreeMap::new();
    if let Some(v) = obj.get("bandwidthShape") {
        let map = as_object(v, &format!("{path}.bandwidthShape"))?;
        for (pattern, bps) in map {
            let p = format!("{path}.bandwidthShape.{pattern}");
            let n = bps
                .as_u64()
                .ok_or(())
                .or_else(|_| schema_err::<u64>(&p, "expected bits-per-second integer"))?;
            bandwidth_shape.insert(pattern.clone(), n);
        }
    }

    Ok(ChannelSpec {
        name,
        pair,
        group_by,
        func_tags,
        backend,
        bandwidth_shape,
    })
}

impl JobSpec {
    /// Renders the spec back into its document form. `parse_job_spec` of the
    /// serialized text reproduces the spec structurally.
    pub fn to_document(&self) -> Value {
        let mut root = Map::new();
        root.insert("name".into(), Value::String(self.job_name.clone()));

        let roles: Vec<Value> = self
            .roles
            .iter()
            .map(|r| {
                let mut o = Map::new();
                o.insert("name".into(), Value::String(r.name.clone()));
                o.insert("replica".into(), Value::from(r.replica));
                o.insert("isDataConsumer".into(), Value::Bool(r.is_data_consumer));
                let assoc: Vec<Value> = r
                    .group_association
                    .iter()
                    .map(|entry| {
                        Value::Object(
                            entry
                                .iter()
                                .map(|(k, v)| (k.clone(), Value::String(v.clone())))
                                .collect(),
                        )
                    })
                    .collect();
                o.insert("groupAssociation".into(), Value::Array(assoc));
                o.insert("program".into(), Value::String(r.program.clone()));
                Value::Object(o)
            })
            .collect();
        root.insert("roles".into(), Value::Array(roles));

        let channels: Vec<Value> = self
            .channels
            .iter()
            .map(|c| {
                let mut o = Map::new();
                o.insert("name".into(), Value::String(c.name.clone()));
                o.insert(
                    "pair".into(),
                    Value::Array(vec![
                        Value::String(c.pair.0.clone()),
                        Value::String(c.pair.1.clone()),
                    ]),
                );
                o.insert(
                    "groupBy".into(),
                    Value::Array(c.group_by.iter().cloned().map(Value::String).collect()),
                );
                if !c.func_tags.is_empty() {
                    o.insert(
                        "funcTags".into(),
                        Value::Object(
                            c.func_tags
                                .iter()
                                .map(|(role, tags)| {
                                    (
                                        role.clone(),
                                        Value::Array(
                                            tags.iter().cloned().map(Value::String).collect(),
                                        ),
                                    )
                                })
                                .collect(),
                        ),
                    );
                }
                o.insert("backend".into(), Value::String(c.backend.as_str().into()));
                if !c.bandwidth_shape.is_empty() {
                    o.insert(
                        "bandwidthShape".into(),
                        Value::Object(
                            c.bandwidth_shape
                                .iter()
                                .map(|(k, v)| (k.clone(), Value::from(*v)))
                                .collect(),
                        ),
                    );
                }
                Value::Object(o)
            })
            .collect();
        root.insert("channels".into(), Value::Array(channels));

        let mut groups = Map::new();
        for (label, ids) in &self.dataset_groups {
            groups.insert(
                label.clone(),
                Value::Array(ids.iter().cloned().map(Value::String).collect()),
            );
        }
        root.insert("datasetGroups".into(), Value::Object(groups));

        let mut hp = Map::new();
        for (key, val) in &self.hyperparams {
            let v = match val {
                HyperValue::Int(i) => Value::from(*i),
                HyperValue::Float(f) => Value::from(*f),
                HyperValue::Bool(b) => Value::Bool(*b),
                HyperValue::Str(s) => Value::String(s.clone()),
            };
            hp.insert(key.clone(), v);
        }
        root.insert("hyperparams".into(), Value::Object(hp));

        Value::Object(root)
    }

    pub fn to_document_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("spec serializes")
    }
}

fn as_object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>, SpecError> {
    v.as_object()
        .ok_or(())
        .or_else(|_| schema_err(path, "expected object"))
}

fn as_array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>, SpecError> {
    v.as_array()
        .ok_or(())
        .or_else(|_| schema_err(path, "expected array"))
}

fn as_str(v: &Value, path: &str) -> Result<String, SpecError> {
    v.as_str()
        .map(str::to_string)
        .ok_or(())
        .or_else(|_| schema_err(path, "expected string"))
}

fn req_str(obj: &Map<String, Value>, key: &str, path: &str) -> Result<String, SpecError> {
    match obj.get(key) {
        Some(v) => as_str(v, &format!("{path}.{key}")),
        None => schema_err(format!("{path}.{key}"), "missing required field"),
    }
}

fn req_array<'a>(
    obj: &'a Map<String, Value>,
    key: &str,
    path: &str,
) -> Result<&'a Vec<Value>, SpecError> {
    match obj.get(key) {
        Some(v) => as_array(v, &format!("{path}.{key}")),
        None => schema_err(format!("{path}.{key}"), "missing required field"),
    }
}

fn opt_bool(obj: &Map<String, Value>, key: &str, path: &str) -> Result<Option<bool>, SpecError> {
    match obj.get(key) {
        None => Ok(None),
        Some(v) => v
            .as_bool()
            .map(Some)
            .ok_or(())
            .or_else(|_| schema_err(format!("{path}.{key}"), "expected boolean")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::test_docs::{cfl_minimal_doc, hfl_fig_doc};

    #[test]
    fn parses_hfl_document() {
        let spec = parse_job_spec(&hfl_fig_doc()).unwrap();
        assert_eq!(spec.job_name, "hfl-example");
        assert_eq!(spec.roles.len(), 3);
        assert_eq!(spec.channels.len(), 2);
        assert_eq!(spec.dataset_groups.len(), 2);
        assert_eq!(spec.dataset_groups["west"], vec!["dataset-a", "dataset-b"]);
        assert_eq!(spec.dataset_groups["east"], vec!["dataset-c", "dataset-d"]);
        let trainer = spec.role("trainer").unwrap();
        assert!(trainer.is_data_consumer);
        assert_eq!(trainer.group_association.len(), 2);
    }

    #[test]
    fn parses_minimal_document_with_defaults() {
        let spec = parse_job_spec(&cfl_minimal_doc()).unwrap();
        let trainer = spec.role("trainer").unwrap();
        assert_eq!(trainer.replica, 1);
        let ch = spec.channel("param-channel").unwrap();
        assert_eq!(ch.backend, BackendKind::BrokerSim);
        assert_eq!(ch.group_by, vec!["default"]);
        assert!(ch.bandwidth_shape.is_empty());
    }

    #[test]
    fn omitted_replica_defaults_to_one() {
        let spec = parse_job_spec(&hfl_fig_doc()).unwrap();
        assert_eq!(spec.role("aggregator").unwrap().replica, 1);
    }

    #[test]
    fn malformed_document_is_a_parse_error() {
        let err = parse_job_spec("{not json").unwrap_err();
        assert!(matches!(err, SpecError::Parse(_)));
    }

    #[test]
    fn schema_errors_name_the_offending_path() {
        let err = parse_job_spec(r#"{"name": "x", "roles": [{"replica": 1}], "channels": []}"#)
            .unwrap_err();
        match err {
            SpecError::Schema { path, .. } => assert_eq!(path, "roles[0].name"),
            other => panic!("expected schema error, got {other:?}"),
        }

        let err = parse_job_spec(
            r#"{"name": "x", "roles": [{"name": "t", "replica": 0}], "channels": []}"#,
        )
        .unwrap_err();
        match err {
            SpecError::Schema { path, .. } => assert_eq!(path, "roles[0].replica"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn round_trips_through_document_form() {
        let spec = parse_job_spec(&hfl_fig_doc()).unwrap();
        let reparsed = parse_job_spec(&spec.to_document_string()).unwrap();
        assert_eq!(spec, reparsed);
    }

    #[test]
    fn fill_defaults_is_idempotent() {
        let mut spec = parse_job_spec(&cfl_minimal_doc()).unwrap();
        let once = spec.clone();
        spec.fill_defaults();
        assert_eq!(spec, once);
    }
}
