//! Expansion of a validated job spec plus registered resources into a
//! physical worker topology.
//!
//! Each data-consumer role yields one worker per registered dataset; every
//! other role yields `replica` workers per group-association entry. Edges are
//! never stored: two workers are connected on a channel iff both bind it with
//! the same group label, and the edge list is recomputed from the workers on
//! demand.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spec::{codes, pre_check, JobSpec, RoleSpec, ValidationReport, DEFAULT_GROUP};

/// A registered compute cluster. The realm is a '/'-separated hierarchical
/// label; "*" admits everything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeRecord {
    pub compute_id: String,
    pub realm: String,
    /// Deployer endpoint address for this compute.
    pub endpoint: String,
    /// Maximum concurrent workers the deployer will run.
    pub capacity: u32,
}

/// Registered dataset metadata. Only the locator is stored, never payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub dataset_id: String,
    pub realm: String,
    pub url: String,
    pub owner: String,
}

/// True when a compute with realm `ancestor` admits a resource with realm
/// `descendant`: segment-wise prefix or the wildcard "*".
pub fn realm_admits(ancestor: &str, descendant: &str) -> bool {
    if ancestor == "*" {
        return true;
    }
    let mut anc = ancestor.split('/');
    let mut desc = descendant.split('/');
    loop {
        match (anc.next(), desc.next()) {
            (None, _) => return true,
            (Some(a), Some(d)) if a == d => continue,
            _ => return false,
        }
    }
}

/// One physical worker produced by expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerConfig {
    /// Deterministic id: `<role>-<index>`.
    pub worker_id: String,
    pub role: String,
    pub compute_id: String,
    /// Channel name -> group label, covering exactly the channels incident
    /// to the worker's role.
    pub channel_bindings: BTreeMap<String, String>,
    /// Present iff the role consumes data.
    pub dataset_ref: Option<String>,
    pub program: String,
}

/// The expansion output: every worker of the job plus derived connectivity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicalTopology {
    pub job_id: String,
    pub workers: Vec<WorkerConfig>,
}

impl PhysicalTopology {
    pub fn worker(&self, id: &str) -> Option<&WorkerConfig> {
        self.workers.iter().find(|w| w.worker_id == id)
    }

    pub fn workers_of_role<'a>(
        &'a self,
        role: &'a str,
    ) -> impl Iterator<Item = &'a WorkerConfig> + 'a {
        self.workers.iter().filter(move |w| w.role == role)
    }

    /// Buckets of workers sharing a (channel, group) binding, keyed in
    /// sorted order. Worker indices refer to `self.workers`.
    fn buckets(&self) -> BTreeMap<(String, String), Vec<usize>> {
        let mut buckets: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
        for (idx, w) in self.workers.iter().enumerate() {
            for (channel, group) in &w.channel_bindings {
                buckets
                    .entry((channel.clone(), group.clone()))
                    .or_default()
                    .push(idx);
            }
        }
        buckets
    }

    /// Derived edge list: all unordered worker pairs that bind the same
    /// channel with the same group label.
    pub fn edges(&self) -> Vec<(String, String, String)> {
        let mut edges = Vec::new();
        for ((channel, _group), members) in self.buckets() {
            for i in 0..members.len() {
                for j in (i + 1)..members.len() {
                    edges.push((
                        self.workers[members[i]].worker_id.clone(),
                        self.workers[members[j]].worker_id.clone(),
                        channel.clone(),
                    ));
                }
            }
        }
        edges
    }

    /// Number of derived edges, computed without materializing them.
    pub fn edge_count(&self) -> u64 {
        self.buckets()
            .values()
            .map(|m| (m.len() as u64) * (m.len() as u64 - 1) / 2)
            .sum()
    }

    /// Communication peers of `worker_id` on `channel`: ends bound to the
    /// same group on the opposite role, or every other member for a
    /// self-channel.
    pub fn channel_peers(&self, worker_id: &str, channel: &str, spec: &JobSpec) -> Vec<String> {
        let Some(me) = self.worker(worker_id) else {
            return Vec::new();
        };
        let Some(group) = me.channel_bindings.get(channel) else {
            return Vec::new();
        };
        let self_channel = spec
            .channel(channel)
            .map(|c| c.is_self_channel())
            .unwrap_or(false);
        let mut peers: Vec<String> = self
            .workers
            .iter()
            .filter(|w| {
                w.worker_id != me.worker_id
                    && w.channel_bindings.get(channel) == Some(group)
                    && (self_channel || w.role != me.role)
            })
            .map(|w| w.worker_id.clone())
            .collect();
        peers.sort();
        peers
    }

    /// Full JSON document including the derived edges, with stable field
    /// and element order.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "jobId": self.job_id,
            "workers": serde_json::to_value(&self.workers).expect("workers serialize"),
            "edges": self.edges(),
        })
    }

    /// DOT rendering of the physical topology for visualization.
    pub fn to_dot(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        writeln!(out, "graph \"{}\" {{", self.job_id).unwrap();
        writeln!(out, "  node [shape=box];").unwrap();
        for w in &self.workers {
            writeln!(
                out,
                "  \"{}\" [label=\"{}\\n{}\"];",
                w.worker_id, w.worker_id, w.role
            )
            .unwrap();
        }
        for ((channel, group), members) in self.buckets() {
            for i in 0..members.len() {
                for j in (i + 1)..members.len() {
                    writeln!(
                        out,
                        "  \"{}\" -- \"{}\" [label=\"{}/{}\"];",
                        self.workers[members[i]].worker_id,
                        self.workers[members[j]].worker_id,
                        channel,
                        group
                    )
                    .unwrap();
                }
            }
        }
        out.push_str("}\n");
        out
    }
}

#[derive(Debug, Error)]
pub enum ExpandError {
    #[error("spec failed pre-check:\n{0}")]
    PreCheckFailed(ValidationReport),
    #[error("dataset '{0}' referenced by the spec is not registered")]
    UnregisteredDataset(String),
    #[error("no registered compute admits realm of '{0}'")]
    NoComputeForRealm(String),
    #[error("dataset group '{0}' has no matching groupAssociation entry")]
    MissingGroupAssociation(String),
    #[error("expanded topology failed post-check:\n{0}")]
    PostCheckFailed(ValidationReport),
}

/// Expands `spec` into a physical topology. Deterministic: identical inputs
/// yield identical output including worker ids and ordering, and the result
/// does not depend on the declaration order of roles.
pub fn expand(
    job_id: &str,
    spec: &JobSpec,
    datasets: &[DatasetRecord],
    computes: &[ComputeRecord],
) -> Result<PhysicalTopology, ExpandError> {
    let report = pre_check(spec);
    if !report.is_empty() {
        return Err(ExpandError::PreCheckFailed(report));
    }

    let dataset_index: HashMap<&str, &DatasetRecord> = datasets
        .iter()
        .map(|d| (d.dataset_id.as_str(), d))
        .collect();
    for id in spec.dataset_ids() {
        if !dataset_index.contains_key(id) {
            return Err(ExpandError::UnregisteredDataset(id.to_string()));
        }
    }

    let mut sorted_computes: Vec<&ComputeRecord> = computes.iter().collect();
    sorted_computes.sort_by(|a, b| a.compute_id.cmp(&b.compute_id));

    let mut expander = Expander {
        spec,
        dataset_index,
        computes: sorted_computes,
        bucket_realms: HashMap::new(),
        rr_counters: HashMap::new(),
    };

    let mut workers = Vec::new();
    for role_name in role_expansion_order(spec) {
        let role = spec.role(&role_name).expect("role exists");
        let built = if role.is_data_consumer {
            expander.build_workers_data_consumer(role)?
        } else {
            expander.build_workers_general(role)?
        };
        workers.extend(built);
    }

    workers.sort_by(|a, b| {
        a.role
            .cmp(&b.role)
            .then_with(|| worker_index(&a.worker_id).cmp(&worker_index(&b.worker_id)))
    });

    let topology = PhysicalTopology {
        job_id: job_id.to_string(),
        workers,
    };
    let report = post_check(&topology, spec);
    if !report.is_empty() {
        return Err(ExpandError::PostCheckFailed(report));
    }
    Ok(topology)
}

fn worker_index(worker_id: &str) -> u32 {
    worker_id
        .rsplit('-')
        .next()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

/// Structural processing order: data consumers first, then roles by
/// breadth-first distance over channels, names sorted within a layer. This
/// makes compute placement independent of role declaration order.
fn role_expansion_order(spec: &JobSpec) -> Vec<String> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut frontier: Vec<String> = spec
        .roles
        .iter()
        .filter(|r| r.is_data_consumer)
        .map(|r| r.name.clone())
        .collect();
    frontier.sort();
    while !frontier.is_empty() {
        let mut next = BTreeSet::new();
        for name in frontier {
            if visited.insert(name.clone()) {
                for ch in spec.channels_incident(&name) {
                    let peer = ch.peer_role(&name).unwrap().to_string();
                    if !visited.contains(&peer) {
                        next.insert(peer);
                    }
                }
                order.push(name);
            }
        }
        frontier = next.into_iter().collect();
    }
    // Roles unreachable from the data consumer, if any, go last by name.
    let mut rest: Vec<String> = spec
        .roles
        .iter()
        .filter(|r| !visited.contains(&r.name))
        .map(|r| r.name.clone())
        .collect();
    rest.sort();
    order.extend(rest);
    order
}

struct Expander<'a> {
    spec: &'a JobSpec,
    dataset_index: HashMap<&'a str, &'a DatasetRecord>,
    /// Sorted by compute id.
    computes: Vec<&'a ComputeRecord>,
    /// (channel, group) -> role -> effective realms of placed workers.
    bucket_realms: HashMap<(String, String), HashMap<String, BTreeSet<String>>>,
    /// Per-role round-robin cursor for compute selection.
    rr_counters: HashMap<String, usize>,
}

impl<'a> Expander<'a> {
    /// One worker per registered dataset; the worker's groups come from the
    /// group-association entry matching the dataset's group.
    fn build_workers_data_consumer(
        &mut self,
        role: &RoleSpec,
    ) -> Result<Vec<WorkerConfig>, ExpandError> {
        let mut workers = Vec::new();
        let mut index = 0u32;
        for (group, dataset_ids) in &self.spec.dataset_groups {
            let entry = role
                .group_association
                .iter()
                .find(|entry| entry.values().any(|g| g == group))
                .ok_or_else(|| ExpandError::MissingGroupAssociation(group.clone()))?;
            let bindings = self.bindings_for(role, entry);
            for dataset_id in dataset_ids {
                let dataset = self.dataset_index[dataset_id.as_str()];
                let compute_id = self
                    .compute_for_dataset(dataset)
                    .ok_or_else(|| ExpandError::NoComputeForRealm(dataset_id.clone()))?;
                let worker = WorkerConfig {
                    worker_id: format!("{}-{index}", role.name),
                    role: role.name.clone(),
                    compute_id: compute_id.to_string(),
                    channel_bindings: bindings.clone(),
                    dataset_ref: Some(dataset_id.clone()),
                    program: role.program.clone(),
                };
                self.record_placement(&worker, &dataset.realm);
                workers.push(worker);
                index += 1;
            }
        }
        Ok(workers)
    }

    /// `replica` copies per group-association entry, sharing bindings but
    /// with distinct worker ids.
    fn build_workers_general(&mut self, role: &RoleSpec) -> Result<Vec<WorkerConfig>, ExpandError> {
        let mut workers = Vec::new();
        let mut index = 0u32;
        for entry in &role.group_association {
            let bindings = self.bindings_for(role, entry);
            for _ in 0..role.replica {
                let worker_id = format!("{}-{index}", role.name);
                let compute_id = self
                    .decide_compute(role, &bindings)
                    .ok_or_else(|| ExpandError::NoComputeForRealm(worker_id.clone()))?
                    .to_string();
                let realm = self
                    .computes
                    .iter()
                    .find(|c| c.compute_id == compute_id)
                    .map(|c| c.realm.clone())
                    .unwrap_or_default();
                let worker = WorkerConfig {
                    worker_id,
                    role: role.name.clone(),
                    compute_id,
                    channel_bindings: bindings.clone(),
                    dataset_ref: None,
                    program: role.program.clone(),
                };
                self.record_placement(&worker, &realm);
                workers.push(worker);
                index += 1;
            }
        }
        Ok(workers)
    }

    /// Bindings from a group-association entry, with channels the entry
    /// omits falling back to the "default" group.
    fn bindings_for(
        &self,
        role: &RoleSpec,
        entry: &BTreeMap<String, String>,
    ) -> BTreeMap<String, String> {
        let mut bindings = entry.clone();
        for ch in self.spec.channels_incident(&role.name) {
            bindings
                .entry(ch.name.clone())
                .or_insert_with(|| DEFAULT_GROUP.to_string());
        }
        bindings
    }

    fn record_placement(&mut self, worker: &WorkerConfig, effective_realm: &str) {
        for (channel, group) in &worker.channel_bindings {
            self.bucket_realms
                .entry((channel.clone(), group.clone()))
                .or_default()
                .entry(worker.role.clone())
                .or_default()
                .insert(effective_realm.to_string());
        }
    }

    /// The compute hosting a dataset: the admitting compute with the most
    /// specific realm, ties broken by lexicographic compute id.
    fn compute_for_dataset(&self, dataset: &DatasetRecord) -> Option<&'a str> {
        self.computes
            .iter()
            .filter(|c| realm_admits(&c.realm, &dataset.realm))
            .max_by_key(|c| {
                if c.realm == "*" {
                    0
                } else {
                    c.realm.split('/').count()
                }
            })
            .map(|c| c.compute_id.as_str())
    }

    /// Deterministic round-robin over computes whose realm is a
    /// prefix-ancestor of (or equal to) the realms of the worker's channel
    /// peers placed so far.
    fn decide_compute(
        &mut self,
        role: &RoleSpec,
        bindings: &BTreeMap<String, String>,
    ) -> Option<&'a str> {
        let mut peer_realms: BTreeSet<&str> = BTreeSet::new();
        for (channel, group) in bindings {
            let Some(spec_channel) = self.spec.channel(channel) else {
                continue;
            };
            if let Some(by_role) = self.bucket_realms.get(&(channel.clone(), group.clone())) {
                for (peer_role, realms) in by_role {
                    let counts = spec_channel.is_self_channel() || peer_role != &role.name;
                    if counts {
                        peer_realms.extend(realms.iter().map(String::as_str));
                    }
                }
            }
        }

        let candidates: Vec<&str> = self
            .computes
            .iter()
            .filter(|c| peer_realms.iter().all(|p| realm_admits(&c.realm, p)))
            .map(|c| c.compute_id.as_str())
            .collect();
        if candidates.is_empty() {
            return None;
        }
        let counter = self.rr_counters.entry(role.name.clone()).or_insert(0);
        let choice = candidates[*counter % candidates.len()];
        *counter += 1;
        Some(choice)
    }
}

/// Validates an expanded topology against the spec: structural worker
/// invariants, non-empty channel sides per used group, and group labels
/// within each channel's groupBy set.
pub fn post_check(topology: &PhysicalTopology, spec: &JobSpec) -> ValidationReport {
    let mut report = ValidationReport::default();

    let mut seen = HashSet::new();
    for w in &topology.workers {
        if !seen.insert(w.worker_id.as_str()) {
            report.push(codes::DUPLICATE_WORKER_ID, &w.worker_id, "duplicate worker id");
        }
    }

    for w in &topology.workers {
        let Some(role) = spec.role(&w.role) else {
            report.push(codes::UNKNOWN_ROLE, &w.worker_id, "worker role not in spec");
            continue;
        };
        let incident: BTreeSet<&str> = spec
            .channels_incident(&w.role)
            .iter()
            .map(|c| c.name.as_str())
            .collect();
        let bound: BTreeSet<&str> = w.channel_bindings.keys().map(String::as_str).collect();
        if incident != bound {
            report.push(
                codes::BINDING_MISMATCH,
                &w.worker_id,
                format!("bindings {bound:?} do not cover incident channels {incident:?}"),
            );
        }
        if role.is_data_consumer != w.dataset_ref.is_some() {
            report.push(
                codes::DATASET_REF_MISMATCH,
                &w.worker_id,
                "dataset_ref must be present exactly for data-consumer workers",
            );
        }
    }

    for role in &spec.roles {
        let count = topology.workers_of_role(&role.name).count();
        let expected = if role.is_data_consumer {
            spec.dataset_ids().len()
        } else {
            role.group_association.len() * role.replica as usize
        };
        if count != expected {
            report.push(
                codes::WORKER_COUNT_MISMATCH,
                &role.name,
                format!("expected {expected} workers, found {count}"),
            );
        }
    }

    // Used groups per channel, then coverage of both endpoint roles.
    let mut used: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut present: HashSet<(&str, &str, &str)> = HashSet::new();
    for w in &topology.workers {
        for (channel, group) in &w.channel_bindings {
            used.entry(channel.as_str()).or_default().insert(group);
            present.insert((channel.as_str(), group.as_str(), w.role.as_str()));
        }
    }
    for ch in &spec.channels {
        let Some(groups) = used.get(ch.name.as_str()) else {
            continue;
        };
        for group in groups {
            if !ch.allows_group(group) {
                report.push(
                    codes::EDGE_GROUP_NOT_IN_GROUPBY,
                    &ch.name,
                    format!("bound group '{group}' is not in groupBy"),
                );
            }
            for endpoint in [ch.pair.0.as_str(), ch.pair.1.as_str()] {
                if !present.contains(&(ch.name.as_str(), group, endpoint)) {
                    report.push(
                        codes::EMPTY_CHANNEL_SIDE,
                        &ch.name,
                        format!("group '{group}' has no worker on endpoint role '{endpoint}'"),
                    );
                }
            }
        }
    }

    report
}
