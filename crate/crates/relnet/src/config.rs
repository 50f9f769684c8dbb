//! Experiment configuration: JSON schema, validation, and resolution into
//! runnable scenario objects.

use crate::graph::{NetworkGraph, RawGraph, Scenario, ServiceChain, ServiceFunction};
use crate::sim::{CapacityMode, NumericMode};
use crate::traffic::{ArrivalEntry, ArrivalKind, ArrivalSpec};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
}

fn schema_err<T>(path: impl Into<String>, message: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Schema { path: path.into(), message: message.into() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Algorithm1,
    Rcnc,
    RcncDistributed,
    Backpressure,
    Greedy,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NumericModeCfg {
    Integer,
    Fluid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CapacityModeCfg {
    Peak,
    Average,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrivalCfg {
    pub node: String,
    #[serde(default = "default_stage")]
    pub stage: usize,
    /// Initial lifetime; defaults to the service's maximum lifetime.
    #[serde(default)]
    pub lifetime: Option<usize>,
    #[serde(flatten)]
    pub dist: ArrivalKind,
    #[serde(default)]
    pub a_max: Option<f64>,
}

fn default_stage() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceCfg {
    pub name: String,
    #[serde(default)]
    pub functions: Vec<ServiceFunction>,
    /// Defaults to the graph-level destination.
    #[serde(default)]
    pub destination: Option<String>,
    pub lifetime: usize,
    pub reliability: f64,
    pub arrivals: Vec<ArrivalCfg>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub numeric_mode: NumericModeCfg,
    pub capacity_mode: CapacityModeCfg,
    pub graph: RawGraph,
    pub services: Vec<ServiceCfg>,
    pub policy: PolicyKind,
    /// Cost-vs-convergence tradeoff parameter.
    #[serde(default)]
    pub v: f64,
    /// Look-ahead depth for the peak controller; defaults to each service's
    /// maximum lifetime.
    #[serde(default)]
    pub lookahead: Option<usize>,
    /// Frame length for the capacity iteration.
    #[serde(default = "default_frame_len")]
    pub frame_len: usize,
    /// Capacity-iteration smoothing constant; defaults to 0.1.
    #[serde(default)]
    pub kappa: Option<f64>,
    pub horizon: usize,
    pub seeds: Vec<u64>,
    /// Record per-slot virtual controller internals (deficits, weights,
    /// virtual flow) for debugging; large.
    #[serde(default)]
    pub dump_virtual: bool,
}

fn default_frame_len() -> usize {
    2000
}

pub const DEFAULT_KAPPA: f64 = 0.1;

impl ExperimentConfig {
    pub fn kappa(&self) -> f64 {
        self.kappa.unwrap_or(DEFAULT_KAPPA)
    }

    /// Schema checks beyond what serde enforces, reported with field paths.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.horizon < 1 {
            return schema_err("horizon", "must be >= 1");
        }
        if self.seeds.is_empty() {
            return schema_err("seeds", "at least one seed required");
        }
        if self.v < 0.0 || !self.v.is_finite() {
            return schema_err("v", format!("must be finite and >= 0, got {}", self.v));
        }
        if let Some(k) = self.kappa {
            if !(k > 0.0 && k < 1.0) {
                return schema_err("kappa", format!("must lie in (0, 1), got {k}"));
            }
        }
        if self.frame_len < 1 {
            return schema_err("frame_len", "must be >= 1");
        }
        for (i, svc) in self.services.iter().enumerate() {
            if !(svc.reliability > 0.0 && svc.reliability <= 1.0) {
                return schema_err(
                    format!("services[{i}].reliability"),
                    format!("must lie in (0, 1], got {}", svc.reliability),
                );
            }
            if svc.lifetime < 1 {
                return schema_err(format!("services[{i}].lifetime"), "must be >= 1");
            }
            if svc.destination.is_none() && self.graph.destination.is_none() {
                return schema_err(
                    format!("services[{i}].destination"),
                    "no destination given here or at graph level",
                );
            }
            for (j, arr) in svc.arrivals.iter().enumerate() {
                if let Some(l) = arr.lifetime {
                    if l < 1 || l > svc.lifetime {
                        return schema_err(
                            format!("services[{i}].arrivals[{j}].lifetime"),
                            format!("must lie in 1..={}", svc.lifetime),
                        );
                    }
                }
            }
        }
        match self.policy {
            PolicyKind::Algorithm1 => {
                if self.capacity_mode == CapacityModeCfg::Peak {
                    return schema_err(
                        "policy",
                        "algorithm1 targets average-capacity networks; use rcnc for peak",
                    );
                }
            }
            PolicyKind::Rcnc | PolicyKind::RcncDistributed | PolicyKind::Backpressure => {
                if self.capacity_mode == CapacityModeCfg::Average {
                    return schema_err("policy", "this policy enforces peak capacities");
                }
            }
            PolicyKind::Greedy | PolicyKind::Zero => {}
        }
        Ok(())
    }

    /// Builds the scenario and arrival spec this config describes.
    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        self.validate()?;
        let graph = NetworkGraph::validate(&self.graph)
            .map_err(|e| ConfigError::Schema { path: "graph".into(), message: e.to_string() })?;
        let mut services = Vec::with_capacity(self.services.len());
        for (i, svc) in self.services.iter().enumerate() {
            let dest_name = svc
                .destination
                .clone()
                .or_else(|| self.graph.destination.clone())
                .expect("validated");
            let destination = graph
                .node_names
                .iter()
                .position(|n| *n == dest_name)
                .ok_or_else(|| ConfigError::Schema {
                    path: format!("services[{i}].destination"),
                    message: format!("unknown node `{dest_name}`"),
                })?;
            let mut sources = Vec::new();
            for (j, arr) in svc.arrivals.iter().enumerate() {
                let node = graph
                    .node_names
                    .iter()
                    .position(|n| *n == arr.node)
                    .ok_or_else(|| ConfigError::Schema {
                        path: format!("services[{i}].arrivals[{j}].node"),
                        message: format!("unknown node `{}`", arr.node),
                    })?;
                if !sources.contains(&node) {
                    sources.push(node);
                }
            }
            services.push(ServiceChain {
                name: svc.name.clone(),
                functions: svc.functions.clone(),
                sources,
                destination,
                max_lifetime: svc.lifetime,
                reliability: svc.reliability,
            });
        }
        let scenario = Scenario::build(graph, services)
            .map_err(|e| ConfigError::Schema { path: "graph".into(), message: e.to_string() })?;

        let mut entries = Vec::new();
        for (i, svc) in self.services.iter().enumerate() {
            for arr in &svc.arrivals {
                let node = scenario.graph.node_names.iter().position(|n| *n == arr.node).unwrap();
                entries.push(ArrivalEntry {
                    commodity: i,
                    node,
                    stage: arr.stage,
                    lifetime: arr.lifetime.unwrap_or(svc.lifetime),
                    kind: arr.dist.clone(),
                    a_max: arr.a_max.unwrap_or(f64::NAN),
                });
            }
        }
        let mut spec = ArrivalSpec::new(entries, self.numeric_mode == NumericModeCfg::Integer);
        spec.validate(&scenario).map_err(|e| ConfigError::Schema {
            path: "services[*].arrivals".into(),
            message: e.to_string(),
        })?;

        Ok(Resolved {
            scenario,
            spec,
            numeric_mode: match self.numeric_mode {
                NumericModeCfg::Integer => NumericMode::Integer,
                NumericModeCfg::Fluid => NumericMode::Fluid,
            },
            capacity_mode: match self.capacity_mode {
                CapacityModeCfg::Peak => CapacityMode::Peak,
                CapacityModeCfg::Average => CapacityMode::Average,
            },
        })
    }
}

/// A config turned into runnable pieces.
#[derive(Debug)]
pub struct Resolved {
    pub scenario: Scenario,
    pub spec: ArrivalSpec,
    pub numeric_mode: NumericMode,
    pub capacity_mode: CapacityMode,
}

/// Loads and validates a config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn illustrative_json() -> serde_json::Value {
        serde_json::json!({
            "name": "illustrative-average",
            "numeric_mode": "integer",
            "capacity_mode": "average",
            "graph": {
                "nodes": ["1", "2", "3", "4"],
                "links": [
                    {"from": "1", "to": "2", "capacity": 5.0, "cost": 1.0, "undirected": true},
                    {"from": "2", "to": "4", "capacity": 5.0, "cost": 1.0, "undirected": true},
                    {"from": "1", "to": "3", "capacity": 5.0, "cost": 5.0, "undirected": true},
                    {"from": "3", "to": "4", "capacity": 5.0, "cost": 5.0, "undirected": true}
                ],
                "destination": "4"
            },
            "services": [{
                "name": "svc",
                "lifetime": 2,
                "reliability": 0.9,
                "arrivals": [{"node": "1", "kind": "poisson", "rate": 6.0}]
            }],
            "policy": "algorithm1",
            "v": 10.0,
            "horizon": 1000,
            "seeds": [1, 2]
        })
    }

    #[test]
    fn valid_config_resolves() {
        let cfg: ExperimentConfig = serde_json::from_value(illustrative_json()).unwrap();
        let resolved = cfg.resolve().unwrap();
        assert_eq!(resolved.scenario.graph.num_edges(), 8);
        assert_eq!(resolved.spec.rate_l1(1), vec![6.0]);
    }

    #[test]
    fn reliability_out_of_range_is_schema_error() {
        let mut v = illustrative_json();
        v["services"][0]["reliability"] = serde_json::json!(1.3);
        let cfg: ExperimentConfig = serde_json::from_value(v).unwrap();
        let err = cfg.validate().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("services[0].reliability"), "{msg}");
    }

    #[test]
    fn kappa_default_applies() {
        let cfg: ExperimentConfig = serde_json::from_value(illustrative_json()).unwrap();
        assert_eq!(cfg.kappa(), DEFAULT_KAPPA);
    }

    #[test]
    fn dangling_node_reference_reported_with_path() {
        let mut v = illustrative_json();
        v["services"][0]["arrivals"][0]["node"] = serde_json::json!("9");
        let cfg: ExperimentConfig = serde_json::from_value(v).unwrap();
        let err = cfg.resolve().unwrap_err();
        assert!(err.to_string().contains("arrivals[0].node"), "{err}");
    }

    #[test]
    fn algorithm1_rejects_peak_mode() {
        let mut v = illustrative_json();
        v["capacity_mode"] = serde_json::json!("peak");
        let cfg: ExperimentConfig = serde_json::from_value(v).unwrap();
        assert!(cfg.validate().is_err());
    }
}
