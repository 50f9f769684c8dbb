//! Network model: physical graphs, service chains, and the layered-graph
//! reduction from joint processing+routing to pure routing.
//!
//! A service chain of `M-1` functions turns the physical graph into `M`
//! stacked copies: transmission edges `(i_m, j_m)` stay within a layer,
//! processing edges `(i_m, i_{m+1})` cross layers and represent execution of
//! function `m` at node `i`. Every layered edge carries a generalized scaling
//! factor `zeta` (output per input unit) and workload `rho` (resource units
//! per input unit); transmission edges have `(zeta, rho) = (1, 1)`.
//!
//! Pure routing is the one-layer special case, so every controller in this
//! crate operates on layered graphs uniformly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown node id `{0}`")]
    UnknownNode(String),
    #[error("self-loop on node `{0}`")]
    SelfLoop(String),
    #[error("duplicate directed edge {0} -> {1}")]
    DuplicateEdge(String, String),
    #[error("edge {0} -> {1}: {2} must be finite and >= 0")]
    BadEdgeValue(String, String, &'static str),
    #[error("duplicate compute entry for node `{0}`")]
    DuplicateCompute(String),
    #[error("compute entry for node `{0}`: {1} must be finite and >= 0")]
    BadComputeValue(String, &'static str),
    #[error("no destination node given")]
    MissingDestination,
    #[error("service `{0}`: scaling factors and workloads must be finite and > 0")]
    BadServiceFunction(String),
    #[error("service `{0}`: reliability level must lie in (0, 1], got {1}")]
    BadReliability(String, f64),
    #[error("service `{0}`: maximum lifetime must be >= 1")]
    BadLifetime(String),
    #[error("stage {0} out of range 1..={1}")]
    StageOutOfRange(usize, usize),
}

/// Raw graph description as it appears in experiment configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawGraph {
    pub nodes: Vec<String>,
    pub links: Vec<RawLink>,
    /// Default destination for services that do not name one.
    #[serde(default)]
    pub destination: Option<String>,
    #[serde(default)]
    pub compute: Vec<RawCompute>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawLink {
    pub from: String,
    pub to: String,
    pub capacity: f64,
    pub cost: f64,
    /// Undirected links expand into two directed edges with independent
    /// capacities.
    #[serde(default)]
    pub undirected: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawCompute {
    pub node: String,
    pub capacity: f64,
    pub cost: f64,
}

/// Validated directed capacitated network with neighbor indices.
#[derive(Debug, Clone)]
pub struct NetworkGraph {
    pub node_names: Vec<String>,
    /// Directed edges as (tail, head) node indices.
    pub edges: Vec<(NodeId, NodeId)>,
    /// Transmission capacity per edge, data units per slot.
    pub capacity: Vec<f64>,
    /// Transmission cost per edge, per data unit per slot.
    pub cost: Vec<f64>,
    /// Per-node compute capacity (0 where absent).
    pub compute_capacity: Vec<f64>,
    /// Per-node compute cost per resource unit.
    pub compute_cost: Vec<f64>,
    pub destination: Option<NodeId>,
    pub out_edges: Vec<Vec<usize>>,
    pub in_edges: Vec<Vec<usize>>,
}

impl NetworkGraph {
    /// Validates a raw description and builds neighbor indices.
    pub fn validate(raw: &RawGraph) -> Result<Self, GraphError> {
        let node_names = raw.nodes.clone();
        let index_of = |name: &str| -> Result<NodeId, GraphError> {
            node_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| GraphError::UnknownNode(name.to_string()))
        };

        let mut edges: Vec<(NodeId, NodeId)> = Vec::new();
        let mut capacity = Vec::new();
        let mut cost = Vec::new();
        let mut push_edge = |tail: NodeId, head: NodeId, cap: f64, c: f64| -> Result<(), GraphError> {
            if tail == head {
                return Err(GraphError::SelfLoop(node_names[tail].clone()));
            }
            if edges.contains(&(tail, head)) {
                return Err(GraphError::DuplicateEdge(
                    node_names[tail].clone(),
                    node_names[head].clone(),
                ));
            }
            if !cap.is_finite() || cap < 0.0 {
                return Err(GraphError::BadEdgeValue(
                    node_names[tail].clone(),
                    node_names[head].clone(),
                    "capacity",
                ));
            }
            if !c.is_finite() || c < 0.0 {
                return Err(GraphError::BadEdgeValue(
                    node_names[tail].clone(),
                    node_names[head].clone(),
                    "cost",
                ));
            }
            edges.push((tail, head));
            capacity.push(cap);
            cost.push(c);
            Ok(())
        };
        for link in &raw.links {
            let tail = index_of(&link.from)?;
            let head = index_of(&link.to)?;
            push_edge(tail, head, link.capacity, link.cost)?;
            if link.undirected {
                push_edge(head, tail, link.capacity, link.cost)?;
            }
        }

        let mut compute_capacity = vec![0.0; node_names.len()];
        let mut compute_cost = vec![0.0; node_names.len()];
        let mut seen = vec![false; node_names.len()];
        for entry in &raw.compute {
            let node = index_of(&entry.node)?;
            if seen[node] {
                return Err(GraphError::DuplicateCompute(entry.node.clone()));
            }
            seen[node] = true;
            if !entry.capacity.is_finite() || entry.capacity < 0.0 {
                return Err(GraphError::BadComputeValue(entry.node.clone(), "capacity"));
            }
            if !entry.cost.is_finite() || entry.cost < 0.0 {
                return Err(GraphError::BadComputeValue(entry.node.clone(), "cost"));
            }
            compute_capacity[node] = entry.capacity;
            compute_cost[node] = entry.cost;
        }

        let destination = match &raw.destination {
            Some(name) => Some(index_of(name)?),
            None => None,
        };

        let mut out_edges = vec![Vec::new(); node_names.len()];
        let mut in_edges = vec![Vec::new(); node_names.len()];
        for (idx, &(tail, head)) in edges.iter().enumerate() {
            out_edges[tail].push(idx);
            in_edges[head].push(idx);
        }

        Ok(NetworkGraph {
            node_names,
            edges,
            capacity,
            cost,
            compute_capacity,
            compute_cost,
            destination,
            out_edges,
            in_edges,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.node_names.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edge_label(&self, e: usize) -> String {
        let (tail, head) = self.edges[e];
        format!("{}->{}", self.node_names[tail], self.node_names[head])
    }
}

/// One function of a service chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceFunction {
    /// Scaling factor: output units per input unit.
    pub scale: f64,
    /// Workload: compute units per input unit.
    pub workload: f64,
}

/// A chain of functions with a delivery deadline and reliability target.
#[derive(Debug, Clone)]
pub struct ServiceChain {
    pub name: String,
    /// The `M-1` functions; empty means pure routing.
    pub functions: Vec<ServiceFunction>,
    /// Nodes where exogenous traffic may originate (informational).
    pub sources: Vec<NodeId>,
    pub destination: NodeId,
    /// Maximum packet lifetime L, in slots.
    pub max_lifetime: usize,
    /// Required delivered fraction of the arrival rate, in (0, 1].
    pub reliability: f64,
}

impl ServiceChain {
    /// Number of data stages M (functions + 1).
    pub fn num_stages(&self) -> usize {
        self.functions.len() + 1
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        for f in &self.functions {
            if !(f.scale.is_finite() && f.scale > 0.0 && f.workload.is_finite() && f.workload > 0.0)
            {
                return Err(GraphError::BadServiceFunction(self.name.clone()));
            }
        }
        if !(self.reliability > 0.0 && self.reliability <= 1.0) {
            return Err(GraphError::BadReliability(self.name.clone(), self.reliability));
        }
        if self.max_lifetime < 1 {
            return Err(GraphError::BadLifetime(self.name.clone()));
        }
        Ok(())
    }

    /// Cumulative scaling factor for stage `m` (1-indexed): the product of
    /// the scaling factors of functions 1..m-1. Stage 1 is the empty product.
    pub fn cumulative_scale(&self, stage: usize) -> Result<f64, GraphError> {
        let stages = self.num_stages();
        if stage < 1 || stage > stages {
            return Err(GraphError::StageOutOfRange(stage, stages));
        }
        Ok(self.functions[..stage - 1].iter().map(|f| f.scale).product())
    }
}

/// Physical resource shared by layered edges: a transmission link or a
/// compute node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResourceKind {
    Link(usize),
    Compute(NodeId),
}

#[derive(Debug, Clone)]
pub struct Resource {
    pub kind: ResourceKind,
    pub capacity: f64,
    pub label: String,
}

/// One edge of a layered graph.
#[derive(Debug, Clone)]
pub struct LayeredEdge {
    pub tail: usize,
    pub head: usize,
    /// Generalized scaling factor zeta.
    pub scale: f64,
    /// Generalized workload rho (resource units per flow unit).
    pub workload: f64,
    /// Cost per resource unit.
    pub cost: f64,
    /// Index into the scenario resource table.
    pub resource: usize,
    pub processing: bool,
}

/// The per-service layered graph. Layered node `i_m` has index
/// `(m-1) * |V| + i`; the only destination is the final-layer copy of the
/// service destination.
#[derive(Debug, Clone)]
pub struct LayeredGraph {
    pub num_phys_nodes: usize,
    pub stages: usize,
    pub max_lifetime: usize,
    pub reliability: f64,
    /// Cumulative scaling factor at the final stage; effective deliveries are
    /// normalized by this to count served input units.
    pub delivery_scale: f64,
    /// Per layered node: 1 / cumulative scale of its stage.
    pub beta: Vec<f64>,
    pub edges: Vec<LayeredEdge>,
    pub destination: usize,
    pub out_edges: Vec<Vec<usize>>,
    pub in_edges: Vec<Vec<usize>>,
}

impl LayeredGraph {
    /// Stacks `M` copies of the graph and wires cross-layer processing
    /// edges. Transmission edges of every layer share their physical link's
    /// resource; processing edges share their node's compute resource.
    pub fn build(
        graph: &NetworkGraph,
        service: &ServiceChain,
        link_resource: &[usize],
        compute_resource: &[Option<usize>],
    ) -> Result<Self, GraphError> {
        service.validate()?;
        let n = graph.num_nodes();
        let stages = service.num_stages();
        let lnode = |phys: NodeId, stage: usize| (stage - 1) * n + phys;

        let mut edges = Vec::with_capacity(stages * graph.num_edges() + (stages - 1) * n);
        for stage in 1..=stages {
            for (e, &(tail, head)) in graph.edges.iter().enumerate() {
                edges.push(LayeredEdge {
                    tail: lnode(tail, stage),
                    head: lnode(head, stage),
                    scale: 1.0,
                    workload: 1.0,
                    cost: graph.cost[e],
                    resource: link_resource[e],
                    processing: false,
                });
            }
        }
        for (m, func) in service.functions.iter().enumerate() {
            let stage = m + 1;
            for i in 0..n {
                let resource = compute_resource[i].expect("compute resources exist for all nodes");
                edges.push(LayeredEdge {
                    tail: lnode(i, stage),
                    head: lnode(i, stage + 1),
                    scale: func.scale,
                    workload: func.workload,
                    cost: graph.compute_cost[i],
                    resource,
                    processing: true,
                });
            }
        }
        let num_lnodes = n * stages;
        let mut out_edges = vec![Vec::new(); num_lnodes];
        let mut in_edges = vec![Vec::new(); num_lnodes];
        for (idx, e) in edges.iter().enumerate() {
            out_edges[e.tail].push(idx);
            in_edges[e.head].push(idx);
        }

        let mut beta = vec![1.0; num_lnodes];
        for stage in 1..=stages {
            let xi = service.cumulative_scale(stage)?;
            for i in 0..n {
                beta[lnode(i, stage)] = 1.0 / xi;
            }
        }

        Ok(LayeredGraph {
            num_phys_nodes: n,
            stages,
            max_lifetime: service.max_lifetime,
            reliability: service.reliability,
            delivery_scale: service.cumulative_scale(stages)?,
            beta,
            edges,
            destination: lnode(service.destination, stages),
            out_edges,
            in_edges,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_phys_nodes * self.stages
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn lnode(&self, phys: NodeId, stage: usize) -> usize {
        (stage - 1) * self.num_phys_nodes + phys
    }

    pub fn phys_node(&self, lnode: usize) -> NodeId {
        lnode % self.num_phys_nodes
    }

    pub fn stage(&self, lnode: usize) -> usize {
        lnode / self.num_phys_nodes + 1
    }

    /// Flat index of queue slot (lnode, lifetime), lifetime in 1..=L.
    #[inline]
    pub fn qidx(&self, lnode: usize, lifetime: usize) -> usize {
        lnode * self.max_lifetime + (lifetime - 1)
    }

    /// Flat index of flow slot (edge, lifetime), lifetime in 1..=L.
    #[inline]
    pub fn fidx(&self, edge: usize, lifetime: usize) -> usize {
        edge * self.max_lifetime + (lifetime - 1)
    }

    /// True when lifetime-`l` flow is allowed on `edge`: flow out of the
    /// destination is forbidden, and lifetime-1 packets may only move into
    /// the destination (anywhere else they would expire on arrival).
    pub fn flow_allowed(&self, edge: usize, lifetime: usize) -> bool {
        let e = &self.edges[edge];
        if e.tail == self.destination {
            return false;
        }
        lifetime > 1 || e.head == self.destination
    }
}

/// A physical network plus its services, their layered graphs, and the
/// shared resource table. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub graph: NetworkGraph,
    pub services: Vec<ServiceChain>,
    pub layered: Vec<LayeredGraph>,
    pub resources: Vec<Resource>,
    /// resource index -> list of (commodity, layered edge) sharing it.
    pub resource_members: Vec<Vec<(usize, usize)>>,
}

impl Scenario {
    pub fn build(graph: NetworkGraph, services: Vec<ServiceChain>) -> Result<Self, GraphError> {
        let mut resources = Vec::new();
        let mut link_resource = Vec::with_capacity(graph.num_edges());
        for e in 0..graph.num_edges() {
            link_resource.push(resources.len());
            resources.push(Resource {
                kind: ResourceKind::Link(e),
                capacity: graph.capacity[e],
                label: graph.edge_label(e),
            });
        }
        let needs_compute = services.iter().any(|s| !s.functions.is_empty());
        let mut compute_resource = vec![None; graph.num_nodes()];
        if needs_compute {
            for i in 0..graph.num_nodes() {
                compute_resource[i] = Some(resources.len());
                resources.push(Resource {
                    kind: ResourceKind::Compute(i),
                    capacity: graph.compute_capacity[i],
                    label: format!("cpu:{}", graph.node_names[i]),
                });
            }
        }

        let mut layered = Vec::with_capacity(services.len());
        for service in &services {
            layered.push(LayeredGraph::build(
                &graph,
                service,
                &link_resource,
                &compute_resource,
            )?);
        }

        let mut resource_members = vec![Vec::new(); resources.len()];
        for (k, lg) in layered.iter().enumerate() {
            for (e, edge) in lg.edges.iter().enumerate() {
                resource_members[edge.resource].push((k, e));
            }
        }

        Ok(Scenario {
            graph,
            services,
            layered,
            resources,
            resource_members,
        })
    }

    pub fn num_commodities(&self) -> usize {
        self.services.len()
    }

    pub fn max_lifetime(&self) -> usize {
        self.layered.iter().map(|l| l.max_lifetime).max().unwrap_or(1)
    }

    /// Label for a layered edge, e.g. `svc:1->2@2` for a stage-2 transmission
    /// or `svc:cpu(3)@1` for processing at node 3.
    pub fn edge_label(&self, commodity: usize, edge: usize) -> String {
        let lg = &self.layered[commodity];
        let e = &lg.edges[edge];
        let stage = lg.stage(e.tail);
        let name = &self.services[commodity].name;
        if e.processing {
            let node = &self.graph.node_names[lg.phys_node(e.tail)];
            format!("{name}:cpu({node})@{stage}")
        } else {
            let tail = &self.graph.node_names[lg.phys_node(e.tail)];
            let head = &self.graph.node_names[lg.phys_node(e.head)];
            format!("{name}:{tail}->{head}@{stage}")
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn diamond_raw() -> RawGraph {
        RawGraph {
            nodes: vec!["1".into(), "2".into(), "3".into(), "4".into()],
            links: vec![
                RawLink { from: "1".into(), to: "2".into(), capacity: 5.0, cost: 1.0, undirected: true },
                RawLink { from: "2".into(), to: "4".into(), capacity: 5.0, cost: 1.0, undirected: true },
                RawLink { from: "1".into(), to: "3".into(), capacity: 5.0, cost: 5.0, undirected: true },
                RawLink { from: "3".into(), to: "4".into(), capacity: 5.0, cost: 5.0, undirected: true },
            ],
            destination: Some("4".into()),
            compute: vec![],
        }
    }

    #[test]
    fn diamond_expands_to_eight_directed_edges() {
        let g = NetworkGraph::validate(&diamond_raw()).unwrap();
        assert_eq!(g.num_edges(), 8);
        assert_eq!(g.destination, Some(3));
        assert_eq!(g.out_edges[0].len(), 2);
        assert_eq!(g.in_edges[3].len(), 2);
    }

    #[test]
    fn self_loop_rejected() {
        let mut raw = diamond_raw();
        raw.links.push(RawLink {
            from: "1".into(),
            to: "1".into(),
            capacity: 1.0,
            cost: 1.0,
            undirected: false,
        });
        assert!(matches!(NetworkGraph::validate(&raw), Err(GraphError::SelfLoop(_))));
    }

    #[test]
    fn duplicate_edge_rejected() {
        let mut raw = diamond_raw();
        raw.links.push(RawLink {
            from: "1".into(),
            to: "2".into(),
            capacity: 3.0,
            cost: 1.0,
            undirected: false,
        });
        assert!(matches!(NetworkGraph::validate(&raw), Err(GraphError::DuplicateEdge(_, _))));
    }

    #[test]
    fn unknown_node_rejected() {
        let mut raw = diamond_raw();
        raw.links[0].to = "9".into();
        assert!(matches!(NetworkGraph::validate(&raw), Err(GraphError::UnknownNode(_))));
    }

    #[test]
    fn negative_capacity_rejected() {
        let mut raw = diamond_raw();
        raw.links[0].capacity = -1.0;
        assert!(matches!(
            NetworkGraph::validate(&raw),
            Err(GraphError::BadEdgeValue(_, _, "capacity"))
        ));
    }

    #[test]
    fn trivial_single_node_graph_is_valid() {
        let raw = RawGraph {
            nodes: vec!["d".into()],
            links: vec![],
            destination: Some("d".into()),
            compute: vec![],
        };
        let g = NetworkGraph::validate(&raw).unwrap();
        assert_eq!(g.num_edges(), 0);
        assert_eq!(g.destination, Some(0));
    }

    fn one_function_service() -> ServiceChain {
        ServiceChain {
            name: "svc".into(),
            functions: vec![ServiceFunction { scale: 2.0, workload: 0.5 }],
            sources: vec![0],
            destination: 3,
            max_lifetime: 4,
            reliability: 0.9,
        }
    }

    fn with_compute(mut raw: RawGraph) -> RawGraph {
        raw.compute = raw
            .nodes
            .iter()
            .map(|n| RawCompute { node: n.clone(), capacity: 2.0, cost: 3.0 })
            .collect();
        raw
    }

    #[test]
    fn layered_graph_counts() {
        let g = NetworkGraph::validate(&with_compute(diamond_raw())).unwrap();
        let scenario = Scenario::build(g, vec![one_function_service()]).unwrap();
        let lg = &scenario.layered[0];
        assert_eq!(lg.num_nodes(), 8);
        assert_eq!(lg.edges.iter().filter(|e| e.processing).count(), 4);
        assert_eq!(lg.edges.iter().filter(|e| !e.processing).count(), 16);
        assert_eq!(lg.destination, lg.lnode(3, 2));
    }

    #[test]
    fn single_stage_layered_graph_equals_original() {
        let g = NetworkGraph::validate(&diamond_raw()).unwrap();
        let svc = ServiceChain {
            name: "routing".into(),
            functions: vec![],
            sources: vec![0],
            destination: 3,
            max_lifetime: 2,
            reliability: 0.9,
        };
        let scenario = Scenario::build(g, vec![svc]).unwrap();
        let lg = &scenario.layered[0];
        assert_eq!(lg.num_nodes(), 4);
        assert_eq!(lg.num_edges(), 8);
        assert!(lg.edges.iter().all(|e| !e.processing));
        assert!(lg.edges.iter().all(|e| e.scale == 1.0 && e.workload == 1.0));
    }

    #[test]
    fn transmission_edges_carry_unit_parameters() {
        let g = NetworkGraph::validate(&with_compute(diamond_raw())).unwrap();
        let scenario = Scenario::build(g, vec![one_function_service()]).unwrap();
        for e in scenario.layered[0].edges.iter().filter(|e| !e.processing) {
            assert_eq!((e.scale, e.workload), (1.0, 1.0));
        }
        for e in scenario.layered[0].edges.iter().filter(|e| e.processing) {
            assert_eq!((e.scale, e.workload), (2.0, 0.5));
        }
    }

    #[test]
    fn cumulative_scale_examples() {
        // Two functions with scaling 1 then 2: stage 3 sees factor 2.
        let svc1 = ServiceChain {
            name: "s1".into(),
            functions: vec![
                ServiceFunction { scale: 1.0, workload: 1.0 / 300.0 },
                ServiceFunction { scale: 2.0, workload: 1.0 / 400.0 },
            ],
            sources: vec![],
            destination: 0,
            max_lifetime: 4,
            reliability: 0.9,
        };
        assert_relative_eq!(svc1.cumulative_scale(3).unwrap(), 2.0);
        assert_relative_eq!(svc1.cumulative_scale(1).unwrap(), 1.0);

        let svc2 = ServiceChain {
            name: "s2".into(),
            functions: vec![
                ServiceFunction { scale: 1.0 / 3.0, workload: 1.0 / 200.0 },
                ServiceFunction { scale: 1.0 / 2.0, workload: 1.0 / 100.0 },
            ],
            ..svc1.clone()
        };
        assert_relative_eq!(svc2.cumulative_scale(3).unwrap(), 1.0 / 6.0);
        assert!(svc2.cumulative_scale(4).is_err());
        assert!(svc2.cumulative_scale(0).is_err());
    }

    #[test]
    fn reliability_out_of_range_rejected() {
        let mut svc = one_function_service();
        svc.reliability = 1.3;
        assert!(matches!(svc.validate(), Err(GraphError::BadReliability(_, _))));
    }
}
