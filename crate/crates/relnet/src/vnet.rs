//! Virtual-network controller.
//!
//! The virtual network relaxes packet precedence: every node acts as a data
//! reservoir, and nonnegative deficit queues track how far each node has
//! overdrawn its reservoir. One queue per commodity guards the delivery
//! target at the destination; one queue per (node, lifetime) guards the
//! causality of lifetimes. Stabilizing them makes the virtual flow
//! assignment realizable by actual packets.
//!
//! Each slot the controller maximizes `<w, flow>` over box capacity
//! constraints, which decomposes per physical resource: the single
//! (commodity, edge, lifetime) candidate with the largest positive weight
//! receives the whole resource, everything else idles. Weights combine the
//! cost penalty `-V e` with deficit differentials, normalized per stage so
//! that commodities with different scaling factors compare on input units.

use crate::graph::Scenario;
use crate::sim::FlowVector;

/// Nonnegative deficit queues: one per commodity for the destination, one
/// per (non-destination layered node, lifetime).
#[derive(Debug, Clone)]
pub struct VirtualQueues {
    pub dest: Vec<f64>,
    /// `[commodity][lnode * L + (l-1)]`; the destination's row stays zero.
    pub node: Vec<Vec<f64>>,
}

impl VirtualQueues {
    pub fn new(scenario: &Scenario) -> Self {
        VirtualQueues {
            dest: vec![0.0; scenario.num_commodities()],
            node: scenario
                .layered
                .iter()
                .map(|lg| vec![0.0; lg.num_nodes() * lg.max_lifetime])
                .collect(),
        }
    }

    pub fn l1_norm(&self) -> f64 {
        let dest: f64 = self.dest.iter().sum();
        let node: f64 = self.node.iter().map(|v| v.iter().sum::<f64>()).sum();
        dest + node
    }

    /// One-slot update from the virtual flow and this slot's arrivals.
    ///
    /// Destination queue: grows by `Xi * gamma * A(t)` (the slot's total
    /// commodity arrivals, scaled to final-stage units) and drains by the
    /// scaled virtual inflow. Node queues: grow by outgoing flow of lifetime
    /// >= l, drain by scaled incoming flow of lifetime >= l+1 plus arrivals
    /// of lifetime >= l. All queues clamp at zero.
    pub fn update(&mut self, scenario: &Scenario, vflow: &FlowVector, arrivals: &[Vec<f64>]) {
        for (k, lg) in scenario.layered.iter().enumerate() {
            let l_max = lg.max_lifetime;
            let x = &vflow.x[k];
            let total_arrivals: f64 = arrivals[k].iter().sum();
            let mut dest_inflow = 0.0;
            for &e in &lg.in_edges[lg.destination] {
                let scale = lg.edges[e].scale;
                for l in 1..=l_max {
                    dest_inflow += scale * x[lg.fidx(e, l)];
                }
            }
            let gamma = lg.reliability;
            self.dest[k] =
                (self.dest[k] + lg.delivery_scale * gamma * total_arrivals - dest_inflow).max(0.0);

            for lnode in 0..lg.num_nodes() {
                if lnode == lg.destination {
                    continue;
                }
                // Suffix sums over lifetimes, computed from l = L down.
                let mut out_geq = 0.0;
                let mut in_geq = 0.0; // scaled inflow with lifetime >= l+1
                let mut a_geq = 0.0;
                for l in (1..=l_max).rev() {
                    for &e in &lg.out_edges[lnode] {
                        out_geq += x[lg.fidx(e, l)];
                    }
                    if l < l_max {
                        for &e in &lg.in_edges[lnode] {
                            in_geq += lg.edges[e].scale * x[lg.fidx(e, l + 1)];
                        }
                    }
                    a_geq += arrivals[k][lg.qidx(lnode, l)];
                    let slot = lg.qidx(lnode, l);
                    self.node[k][slot] = (self.node[k][slot] + out_geq - in_geq - a_geq).max(0.0);
                }
            }
        }
    }
}

/// Per-(commodity, edge, lifetime) scheduling weights. Masked entries
/// (flow out of the destination, lifetime-1 flow not entering it) hold
/// negative infinity.
#[derive(Debug, Clone)]
pub struct Weights {
    pub w: Vec<Vec<f64>>,
}

impl Weights {
    pub fn new(scenario: &Scenario) -> Self {
        Weights {
            w: scenario
                .layered
                .iter()
                .map(|lg| vec![f64::NEG_INFINITY; lg.num_edges() * lg.max_lifetime])
                .collect(),
        }
    }
}

/// Fills the weight of every allowed (commodity, edge, lifetime):
///
/// ```text
/// w = -V e - beta_tail * U_tail^(<=l) / rho
///     + (zeta * beta_head / rho) * (U_dest            if head is the destination,
///                                   U_head^(<=l-1)    otherwise)
/// ```
///
/// where `U^(<=l)` sums deficits of lifetimes 1..l. With unit scale,
/// workload, and stage normalization this is the plain cost-vs-deficit
/// differential.
pub fn compute_weights(scenario: &Scenario, u: &VirtualQueues, v_param: f64, out: &mut Weights) {
    for (k, lg) in scenario.layered.iter().enumerate() {
        let l_max = lg.max_lifetime;
        // Prefix sums of U per lnode: prefix[lnode][l] = U^(<=l).
        let mut prefix = vec![0.0; lg.num_nodes() * (l_max + 1)];
        for lnode in 0..lg.num_nodes() {
            let base = lnode * (l_max + 1);
            for l in 1..=l_max {
                prefix[base + l] = prefix[base + l - 1] + u.node[k][lg.qidx(lnode, l)];
            }
        }
        let w = &mut out.w[k];
        for (e, edge) in lg.edges.iter().enumerate() {
            for l in 1..=l_max {
                let idx = lg.fidx(e, l);
                if !lg.flow_allowed(e, l) {
                    w[idx] = f64::NEG_INFINITY;
                    continue;
                }
                let tail_term = lg.beta[edge.tail] * prefix[edge.tail * (l_max + 1) + l];
                let head_credit = if edge.head == lg.destination {
                    u.dest[k]
                } else {
                    prefix[edge.head * (l_max + 1) + l - 1]
                };
                w[idx] = -v_param * edge.cost - tail_term / edge.workload
                    + edge.scale * lg.beta[edge.head] * head_credit / edge.workload;
            }
        }
    }
}

/// Max-weight virtual flow: per resource, the best strictly-positive weight
/// wins the full capacity; the resulting flow is capacity divided by the
/// winner's workload. Ties break toward the smallest lifetime, then the
/// smallest (commodity, edge) in scenario order.
pub fn max_weight_flow(
    scenario: &Scenario,
    weights: &Weights,
    capacities: &[f64],
    out: &mut FlowVector,
) {
    out.clear();
    let max_l = scenario.max_lifetime();
    for (r, members) in scenario.resource_members.iter().enumerate() {
        let cap = capacities[r];
        if cap <= 0.0 {
            continue;
        }
        let mut best = 0.0;
        let mut winner: Option<(usize, usize, usize)> = None;
        for l in 1..=max_l {
            for &(k, e) in members {
                let lg = &scenario.layered[k];
                if l > lg.max_lifetime {
                    continue;
                }
                let w = weights.w[k][lg.fidx(e, l)];
                if w > best {
                    best = w;
                    winner = Some((k, e, l));
                }
            }
        }
        if let Some((k, e, l)) = winner {
            let lg = &scenario.layered[k];
            out.x[k][lg.fidx(e, l)] = cap / lg.edges[e].workload;
        }
    }
}

/// Incrementally maintained empirical averages: virtual flow, arrival
/// rates, and actual incoming flow (for the distributed controller).
#[derive(Debug, Clone)]
pub struct RunningMeans {
    /// `[commodity][edge*L + l-1]` mean virtual flow.
    pub flow: Vec<Vec<f64>>,
    /// `[commodity][lnode*L + l-1]` mean arrivals.
    pub arrivals: Vec<Vec<f64>>,
    /// `[commodity][edge*L + l-1]` mean actual flow (inflow estimates).
    pub actual: Vec<Vec<f64>>,
    pub count: u64,
}

impl RunningMeans {
    pub fn new(scenario: &Scenario) -> Self {
        let flow_shape: Vec<Vec<f64>> = scenario
            .layered
            .iter()
            .map(|lg| vec![0.0; lg.num_edges() * lg.max_lifetime])
            .collect();
        RunningMeans {
            flow: flow_shape.clone(),
            actual: flow_shape,
            arrivals: scenario
                .layered
                .iter()
                .map(|lg| vec![0.0; lg.num_nodes() * lg.max_lifetime])
                .collect(),
            count: 0,
        }
    }

    /// Folds one slot's virtual flow and arrivals into the running means:
    /// `m += (sample - m) / (count + 1)`.
    pub fn update(&mut self, vflow: &FlowVector, arrivals: &[Vec<f64>]) {
        let n1 = (self.count + 1) as f64;
        for (k, xs) in vflow.x.iter().enumerate() {
            for (m, x) in self.flow[k].iter_mut().zip(xs) {
                *m += (x - *m) / n1;
            }
        }
        for (k, xs) in arrivals.iter().enumerate() {
            for (m, x) in self.arrivals[k].iter_mut().zip(xs) {
                *m += (x - *m) / n1;
            }
        }
        self.count += 1;
    }

    /// Folds one slot's actual flow into the inflow estimates. Uses the same
    /// sample count as [`RunningMeans::update`]; call both once per slot.
    pub fn update_actual(&mut self, flow: &FlowVector) {
        let n1 = self.count as f64; // update() already advanced the count
        for (k, xs) in flow.x.iter().enumerate() {
            for (m, x) in self.actual[k].iter_mut().zip(xs) {
                *m += (x - *m) / n1;
            }
        }
    }
}
