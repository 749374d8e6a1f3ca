//! Job specification model: roles, channels, dataset groups and the
//! structural checks that gate topology expansion.

mod parse;

pub use parse::{parse_job_spec, SpecError};

use std::collections::BTreeMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

/// Group label that is implicitly a member of every channel's `groupBy` set.
pub const DEFAULT_GROUP: &str = "default";

/// A declarative job specification: the logical graph of roles and channels
/// plus dataset grouping and job-level hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct JobSpec {
    pub job_name: String,
    pub roles: Vec<RoleSpec>,
    pub channels: Vec<ChannelSpec>,
    /// Group label -> dataset ids, in declaration order.
    pub dataset_groups: IndexMap<String, Vec<String>>,
    pub hyperparams: IndexMap<String, HyperValue>,
}

/// A vertex of the job graph: one executable worker type.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleSpec {
    pub name: String,
    pub replica: u32,
    pub is_data_consumer: bool,
    /// Each entry maps incident channel name -> group label and yields one
    /// worker (times `replica`) for non-data-consumer roles.
    pub group_association: Vec<BTreeMap<String, String>>,
    /// Id of a built-in or registered role program, resolved at deployment.
    pub program: String,
}

/// An undirected edge between two roles (or a role and itself).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSpec {
    pub name: String,
    pub pair: (String, String),
    pub group_by: Vec<String>,
    /// Role name -> function tags bound to that endpoint.
    pub func_tags: BTreeMap<String, Vec<String>>,
    pub backend: BackendKind,
    /// Sender end-pattern -> bits per second. Empty means unshaped.
    pub bandwidth_shape: BTreeMap<String, u64>,
}

/// Communication backend selection for a channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendKind {
    /// In-process broker with MQTT-style topic semantics.
    BrokerSim,
    /// Direct connection between ends.
    PointToPoint,
}

impl BackendKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BackendKind::BrokerSim => "brokersim",
            BackendKind::PointToPoint => "p2p",
        }
    }
}

impl Default for BackendKind {
    fn default() -> Self {
        BackendKind::BrokerSim
    }
}

/// A job-level hyperparameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HyperValue {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
}

impl HyperValue {
    pub fn as_i64(&self) -> Option<i64> {
        match self {
            HyperValue::Int(v) => Some(*v),
            HyperValue::Float(v) if v.fract() == 0.0 => Some(*v as i64),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            HyperValue::Int(v) => Some(*v as f64),
            HyperValue::Float(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            HyperValue::Str(s) => Some(s),
            _ => None,
        }
    }
}

impl JobSpec {
    pub fn role(&self, name: &str) -> Option<&RoleSpec> {
        self.roles.iter().find(|r| r.name == name)
    }

    pub fn channel(&self, name: &str) -> Option<&ChannelSpec> {
        self.channels.iter().find(|c| c.name == name)
    }

    /// Channels that have `role` as an endpoint, in declaration order.
    pub fn channels_incident(&self, role: &str) -> Vec<&ChannelSpec> {
        self.channels
            .iter()
            .filter(|c| c.pair.0 == role || c.pair.1 == role)
            .collect()
    }

    pub fn data_consumer(&self) -> Option<&RoleSpec> {
        self.roles.iter().find(|r| r.is_data_consumer)
    }

    /// All dataset ids across groups, in declaration order.
    pub fn dataset_ids(&self) -> Vec<&str> {
        self.dataset_groups
            .values()
            .flat_map(|ds| ds.iter().map(String::as_str))
            .collect()
    }

    pub fn hyperparam(&self, key: &str) -> Option<&HyperValue> {
        self.hyperparams.get(key)
    }

    /// Fills unset attributes with their documented defaults. Idempotent.
    pub fn fill_defaults(&mut self) {
        for role in &mut self.roles {
            if role.replica == 0 {
                role.replica = 1;
            }
        }
        for ch in &mut self.channels {
            if ch.group_by.is_empty() {
                ch.group_by.push(DEFAULT_GROUP.to_string());
            }
        }
    }
}

impl ChannelSpec {
    pub fn is_self_channel(&self) -> bool {
        self.pair.0 == self.pair.1
    }

    pub fn has_endpoint(&self, role: &str) -> bool {
        self.pair.0 == role || self.pair.1 == role
    }

    /// The role on the other side of `role`, which is `role` itself for a
    /// self-channel.
    pub fn peer_role(&self, role: &str) -> Option<&str> {
        if self.pair.0 == role {
            Some(&self.pair.1)
        } else if self.pair.1 == role {
            Some(&self.pair.0)
        } else {
            None
        }
    }

    /// Whether `group` is a legal label on this channel. The "default"
    /// label is always legal.
    pub fn allows_group(&self, group: &str) -> bool {
        group == DEFAULT_GROUP || self.group_by.iter().any(|g| g == group)
    }

    pub fn my_func_tag(&self, role: &str) -> Option<&str> {
        self.func_tags
            .get(role)
            .and_then(|tags| tags.first())
            .map(String::as_str)
    }
}

/// One structural violation found by a pre- or post-check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub code: String,
    pub subject: String,
    pub detail: String,
}

/// Outcome of a structural check. Empty means valid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn push(&mut self, code: &str, subject: impl Into<String>, detail: impl Into<String>) {
        self.violations.push(Violation {
            code: code.to_string(),
            subject: subject.into(),
            detail: detail.into(),
        });
    }

    pub fn codes(&self) -> Vec<&str> {
        self.violations.iter().map(|v| v.code.as_str()).collect()
    }

    pub fn has_code(&self, code: &str) -> bool {
        self.violations.iter().any(|v| v.code == code)
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "ok");
        }
        for v in &self.violations {
            writeln!(f, "{} {}: {}", v.code, v.subject, v.detail)?;
        }
        Ok(())
    }
}

/// Violation codes emitted by [`pre_check`] and the expansion post-check.
pub mod codes {
    pub const DUPLICATE_ROLE: &str = "DUPLICATE_ROLE";
    pub const DUPLICATE_CHANNEL: &str = "DUPLICATE_CHANNEL";
    pub const UNKNOWN_ROLE: &str = "UNKNOWN_ROLE";
    pub const GROUP_NOT_IN_GROUPBY: &str = "GROUP_NOT_IN_GROUPBY";
    pub const GROUP_ASSOC_UNKNOWN_CHANNEL: &str = "GROUP_ASSOC_UNKNOWN_CHANNEL";
    pub const EMPTY_GROUP_ASSOCIATION: &str = "EMPTY_GROUP_ASSOCIATION";
    pub const MULTIPLE_DATA_CONSUMERS: &str = "MULTIPLE_DATA_CONSUMERS";
    pub const NO_DATA_CONSUMER: &str = "NO_DATA_CONSUMER";
    pub const REPLICA_ON_DATA_CONSUMER: &str = "REPLICA_ON_DATA_CONSUMER";
    pub const FUNC_TAG_UNKNOWN_ROLE: &str = "FUNC_TAG_UNKNOWN_ROLE";
    pub const BAD_BANDWIDTH: &str = "BAD_BANDWIDTH";

    pub const DUPLICATE_WORKER_ID: &str = "DUPLICATE_WORKER_ID";
    pub const BINDING_MISMATCH: &str = "BINDING_MISMATCH";
    pub const DATASET_REF_MISMATCH: &str = "DATASET_REF_MISMATCH";
    pub const WORKER_COUNT_MISMATCH: &str = "WORKER_COUNT_MISMATCH";
    pub const EMPTY_CHANNEL_SIDE: &str = "EMPTY_CHANNEL_SIDE";
    pub const EDGE_GROUP_NOT_IN_GROUPBY: &str = "EDGE_GROUP_NOT_IN_GROUPBY";
}

/// Validates the structural invariants of a parsed spec. Violations are
/// returned as data; an empty report means the spec is expandable.
pub fn pre_check(spec: &JobSpec) -> ValidationReport {
    let mut report = ValidationReport::default();

    let mut seen_roles = std::collections::HashSet::new();
    for role in &spec.roles {
        if !seen_roles.insert(role.name.as_str()) {
            report.push(
                codes::DUPLICATE_ROLE,
                &role.name,
                "role name declared more than once",
            );
        }
    }
    let mut seen_channels = std::collections::HashSet::new();
    for ch in &spec.channels {
        if !seen_channels.insert(ch.name.as_str()) {
            report.push(
                codes::DUPLICATE_CHANNEL,
                &ch.name,
                "channel name declared more than once",
            );
        }
    }

    for ch in &spec.channels {
        for endpoint in [&ch.pair.0, &ch.pair.1] {
            if spec.role(endpoint).is_none() {
                report.push(
                    codes::UNKNOWN_ROLE,
                    &ch.name,
                    format!("channel endpoint '{endpoint}' does not match any role"),
                );
            }
        }
        for tagged_role in ch.func_tags.keys() {
            if !ch.has_endpoint(tagged_role) {
                report.push(
                    codes::FUNC_TAG_UNKNOWN_ROLE,
                    &ch.name,
                    format!("funcTags key '{tagged_role}' is not an endpoint of this channel"),
                );
            }
        }
        for (pattern, bps) in &ch.bandwidth_shape {
            if *bps == 0 {
                report.push(
                    codes::BAD_BANDWIDTH,
                    &ch.name,
                    format!("bandwidth for pattern '{pattern}' must be > 0"),
                );
            }
        }
    }

    let consumers: Vec<&RoleSpec> = spec.roles.iter().filter(|r| r.is_data_consumer).collect();
    if consumers.len() > 1 {
        let names: Vec<&str> = consumers.iter().map(|r| r.name.as_str()).collect();
        report.push(
            codes::MULTIPLE_DATA_CONSUMERS,
            names.join(","),
            "at most one role may consume data",
        );
    } else if consumers.is_empty() {
        report.push(
            codes::NO_DATA_CONSUMER,
            &spec.job_name,
            "exactly one role must have isDataConsumer set",
        );
    }

    for role in &spec.roles {
        if role.is_data_consumer && role.replica > 1 {
            report.push(
                codes::REPLICA_ON_DATA_CONSUMER,
                &role.name,
                format!("replica {} > 1 is only permitted on non-data-consumer roles", role.replica),
            );
        }
        if !role.is_data_consumer && role.group_association.is_empty() {
            report.push(
                codes::EMPTY_GROUP_ASSOCIATION,
                &role.name,
                "non-data-consumer roles need at least one groupAssociation entry",
            );
        }
        for (idx, entry) in role.group_association.iter().enumerate() {
            for (channel_name, group) in entry {
                let Some(ch) = spec.channel(channel_name) else {
                    report.push(
                        codes::GROUP_ASSOC_UNKNOWN_CHANNEL,
                        format!("{}[{idx}]", role.name),
                        format!("groupAssociation names unknown channel '{channel_name}'"),
                    );
                    continue;
                };
                if !ch.has_endpoint(&role.name) {
                    report.push(
                        codes::GROUP_ASSOC_UNKNOWN_CHANNEL,
                        format!("{}[{idx}]", role.name),
                        format!("channel '{channel_name}' is not incident to role '{}'", role.name),
                    );
                    continue;
                }
                if !ch.allows_group(group) {
                    report.push(
                        codes::GROUP_NOT_IN_GROUPBY,
                        format!("{}[{idx}]", role.name),
                        format!("group '{group}' is not in groupBy of channel '{channel_name}'"),
                    );
                }
            }
        }
    }

    report
}

#[cfg(test)]
pub(crate) mod test_docs {
    /// Hierarchical job: trainer, aggregator, global aggregator, two dataset
    /// groups ("west": A, B and "east": C, D).
    pub(crate) fn hfl_fig_doc() -> String {
        r#"{
          "name": "hfl-example",
          "roles": [
            {
              "name": "trainer",
              "isDataConsumer": true,
              "groupAssociation": [
                {"param-channel": "west"},
                {"param-channel": "east"}
              ],
              "program": "trainer"
            },
            {
              "name": "aggregator",
              "groupAssociation": [
                {"param-channel": "west", "agg-channel": "default"},
                {"param-channel": "east", "agg-channel": "default"}
              ],
              "program": "aggregator"
            },
            {
              "name": "global-aggregator",
              "groupAssociation": [{"agg-channel": "default"}],
              "program": "global-aggregator"
            }
          ],
          "channels": [
            {
              "name": "param-channel",
              "pair": ["trainer", "aggregator"],
              "groupBy": ["west", "east"],
              "funcTags": {"trainer": ["upload"], "aggregator": ["distribute"]}
            },
            {
              "name": "agg-channel",
              "pair": ["aggregator", "global-aggregator"],
              "groupBy": ["default"],
              "funcTags": {"aggregator": ["upload"], "global-aggregator": ["distribute"]}
            }
          ],
          "datasetGroups": {
            "west": ["dataset-a", "dataset-b"],
            "east": ["dataset-c", "dataset-d"]
          },
          "hyperparams": {"rounds": 2, "epochs": 1, "lr": 0.05}
        }"#
        .to_string()
    }

    /// Smallest useful job: one trainer, one aggregator, one channel, one
    /// dataset in the default group.
    pub(crate) fn cfl_minimal_doc() -> String {
        r#"{
          "name": "cfl-minimal",
          "roles": [
            {"name": "trainer", "isDataConsumer": true,
             "groupAssociation": [{"param-channel": "default"}]},
            {"name": "aggregator",
             "groupAssociation": [{"param-channel": "default"}],
             "program": "global-aggregator"}
          ],
          "channels": [
            {"name": "param-channel", "pair": ["trainer", "aggregator"]}
          ],
          "datasetGroups": {"default": ["dataset-0"]}
        }"#
        .to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use test_docs::{cfl_minimal_doc, hfl_fig_doc};

    #[test]
    fn pre_check_accepts_hfl_spec() {
        let spec = parse_job_spec(&hfl_fig_doc()).unwrap();
        let report = pre_check(&spec);
        assert!(report.is_empty(), "unexpected violations: {report}");
    }

    #[test]
    fn pre_check_flags_group_not_in_groupby() {
        let mut spec = parse_job_spec(&hfl_fig_doc()).unwrap();
        spec.roles[0].group_association[0]
            .insert("param-channel".to_string(), "north".to_string());
        let report = pre_check(&spec);
        assert!(report.has_code(codes::GROUP_NOT_IN_GROUPBY), "{report}");
    }

    #[test]
    fn pre_check_flags_unknown_channel_endpoint() {
        let mut spec = parse_job_spec(&cfl_minimal_doc()).unwrap();
        spec.channels[0].pair.1 = "aggregatorX".to_string();
        let report = pre_check(&spec);
        assert!(report.has_code(codes::UNKNOWN_ROLE), "{report}");
    }

    #[test]
    fn pre_check_flags_multiple_data_consumers() {
        let mut spec = parse_job_spec(&cfl_minimal_doc()).unwrap();
        spec.roles[1].is_data_consumer = true;
        let report = pre_check(&spec);
        assert!(report.has_code(codes::MULTIPLE_DATA_CONSUMERS), "{report}");
    }

    #[test]
    fn pre_check_flags_replica_on_data_consumer() {
        let mut spec = parse_job_spec(&cfl_minimal_doc()).unwrap();
        spec.roles[0].replica = 3;
        let report = pre_check(&spec);
        assert!(report.has_code(codes::REPLICA_ON_DATA_CONSUMER), "{report}");
    }

    #[test]
    fn pre_check_flags_group_assoc_on_non_incident_channel() {
        let mut spec = parse_job_spec(&hfl_fig_doc()).unwrap();
        // Trainer is not an endpoint of agg-channel.
        spec.roles[0].group_association[0]
            .insert("agg-channel".to_string(), "default".to_string());
        let report = pre_check(&spec);
        assert!(report.has_code(codes::GROUP_ASSOC_UNKNOWN_CHANNEL), "{report}");
    }

    #[test]
    fn default_group_always_allowed() {
        let spec = parse_job_spec(&hfl_fig_doc()).unwrap();
        let ch = spec.channel("param-channel").unwrap();
        assert!(ch.allows_group("default"));
        assert!(ch.allows_group("west"));
        assert!(!ch.allows_group("north"));
    }
}
