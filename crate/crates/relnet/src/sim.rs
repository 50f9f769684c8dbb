//! Two-phase per-slot lifetime-queue simulation.
//!
//! A slot proceeds as: load exogenous arrivals into the queues, let the
//! policy pick a flow, check admissibility, then move the flow. Transmitted
//! amounts leave their (node, lifetime) queue, arrive at the head node one
//! lifetime lower and scaled by the edge's `zeta`, inflow at the destination
//! is consumed immediately while still effective, and whatever remains at
//! lifetime 1 after the transmit phase expires and is dropped. Queue slots
//! for lifetime 0 and for the destination therefore never hold mass.
//!
//! The engine verifies admissibility and mass balance every slot and fails
//! fast with the slot index on any violation.

use crate::graph::Scenario;
use crate::traffic::{ArrivalSpec, TrafficError};
use thiserror::Error;

/// Numeric interpretation of queue contents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NumericMode {
    /// Integer packet counts (multinomial policies apply).
    Integer,
    /// Real-valued rates.
    Fluid,
}

/// Which capacity constraint binds per slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapacityMode {
    /// Peak: every slot's flow respects link capacities.
    Peak,
    /// Average: only the long-run average is constrained; per-slot flows may
    /// exceed capacity.
    Average,
}

/// Per-commodity queue backlog, flattened as `lnode * L + (lifetime - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueState {
    pub q: Vec<Vec<f64>>,
}

impl QueueState {
    pub fn new(scenario: &Scenario) -> Self {
        QueueState {
            q: scenario
                .layered
                .iter()
                .map(|lg| vec![0.0; lg.num_nodes() * lg.max_lifetime])
                .collect(),
        }
    }

    pub fn total(&self) -> f64 {
        self.q.iter().map(|v| v.iter().sum::<f64>()).sum()
    }
}

/// Per-commodity flow, flattened as `edge * L + (lifetime - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowVector {
    pub x: Vec<Vec<f64>>,
}

impl FlowVector {
    pub fn zeros(scenario: &Scenario) -> Self {
        FlowVector {
            x: scenario
                .layered
                .iter()
                .map(|lg| vec![0.0; lg.num_edges() * lg.max_lifetime])
                .collect(),
        }
    }

    pub fn clear(&mut self) {
        for v in &mut self.x {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

#[derive(Debug, Error)]
pub enum AdmissibilityError {
    #[error("negative flow {amount} on commodity {commodity} edge {edge} lifetime {lifetime}")]
    NegativeFlow { commodity: usize, edge: usize, lifetime: usize, amount: f64 },
    #[error("lifetime-1 flow {amount} on commodity {commodity} edge {edge} not entering the destination")]
    LifetimeOneOffDestination { commodity: usize, edge: usize, amount: f64 },
    #[error("flow {amount} leaving the destination on commodity {commodity} edge {edge}")]
    FlowOutOfDestination { commodity: usize, edge: usize, amount: f64 },
    #[error("availability violated at commodity {commodity} lnode {lnode} lifetime {lifetime}: outflow {outflow} > queue {queue}")]
    Availability { commodity: usize, lnode: usize, lifetime: usize, outflow: f64, queue: f64 },
    #[error("peak capacity violated at resource {resource}: load {load} > capacity {capacity}")]
    PeakCapacity { resource: usize, load: f64, capacity: f64 },
}

const ADMISSIBILITY_TOL: f64 = 1e-7;

/// Checks non-negativity, the lifetime-1 and destination masks, per-(node,
/// lifetime) availability, and (in peak mode) per-resource capacity.
/// Returns the first violated constraint with indices and amounts.
pub fn check_admissible(
    scenario: &Scenario,
    q: &QueueState,
    flow: &FlowVector,
    mode: CapacityMode,
) -> Result<(), AdmissibilityError> {
    for (k, lg) in scenario.layered.iter().enumerate() {
        let x = &flow.x[k];
        for e in 0..lg.num_edges() {
            for l in 1..=lg.max_lifetime {
                let v = x[lg.fidx(e, l)];
                if v == 0.0 {
                    continue;
                }
                if v < -ADMISSIBILITY_TOL {
                    return Err(AdmissibilityError::NegativeFlow {
                        commodity: k, edge: e, lifetime: l, amount: v,
                    });
                }
                if lg.edges[e].tail == lg.destination && v > ADMISSIBILITY_TOL {
                    return Err(AdmissibilityError::FlowOutOfDestination {
                        commodity: k, edge: e, amount: v,
                    });
                }
                if l == 1 && lg.edges[e].head != lg.destination && v > ADMISSIBILITY_TOL {
                    return Err(AdmissibilityError::LifetimeOneOffDestination {
                        commodity: k, edge: e, amount: v,
                    });
                }
            }
        }
        for lnode in 0..lg.num_nodes() {
            for l in 1..=lg.max_lifetime {
                let outflow: f64 = lg.out_edges[lnode]
                    .iter()
                    .map(|&e| x[lg.fidx(e, l)])
                    .sum();
                let queue = q.q[k][lg.qidx(lnode, l)];
                if outflow > queue + ADMISSIBILITY_TOL.max(1e-9 * queue.abs()) {
                    return Err(AdmissibilityError::Availability {
                        commodity: k, lnode, lifetime: l, outflow, queue,
                    });
                }
            }
        }
    }
    if mode == CapacityMode::Peak {
        for (r, members) in scenario.resource_members.iter().enumerate() {
            let mut load = 0.0;
            for &(k, e) in members {
                let lg = &scenario.layered[k];
                let rho = lg.edges[e].workload;
                for l in 1..=lg.max_lifetime {
                    load += rho * flow.x[k][lg.fidx(e, l)];
                }
            }
            let capacity = scenario.resources[r].capacity;
            if load > capacity + ADMISSIBILITY_TOL.max(1e-9 * capacity) {
                return Err(AdmissibilityError::PeakCapacity { resource: r, load, capacity });
            }
        }
    }
    Ok(())
}

/// Outcome of moving one slot's flow.
#[derive(Debug, Clone, Default)]
pub struct SlotOutcome {
    /// Raw scaled inflow consumed at the destination, per commodity.
    pub delivered_raw: Vec<f64>,
    /// Effective deliveries in input units (raw / final-stage scale).
    pub delivered: Vec<f64>,
    /// Expired amounts in input units, per commodity.
    pub dropped: Vec<f64>,
    /// Expired amounts in raw (stage-local) units, per commodity.
    pub dropped_raw: Vec<f64>,
    /// Resource cost of the slot's flow, per commodity.
    pub cost: Vec<f64>,
}

/// Applies one slot of queue dynamics. Arrivals for the *next* slot are not
/// part of this step; the caller loads them before the next decision.
pub fn step_slot(scenario: &Scenario, q: &mut QueueState, flow: &FlowVector) -> SlotOutcome {
    let nc = scenario.num_commodities();
    let mut out = SlotOutcome {
        delivered_raw: vec![0.0; nc],
        delivered: vec![0.0; nc],
        dropped: vec![0.0; nc],
        dropped_raw: vec![0.0; nc],
        cost: vec![0.0; nc],
    };
    for (k, lg) in scenario.layered.iter().enumerate() {
        let x = &flow.x[k];
        let l_max = lg.max_lifetime;
        let qk = &mut q.q[k];

        // Transmitting phase: outgoing amounts leave their queues.
        for (e, edge) in lg.edges.iter().enumerate() {
            for l in 1..=l_max {
                let v = x[lg.fidx(e, l)];
                if v != 0.0 {
                    qk[lg.qidx(edge.tail, l)] -= v;
                    out.cost[k] += edge.cost * edge.workload * v;
                }
            }
        }
        // Whatever still sits at lifetime 1 expires during the receive phase.
        for lnode in 0..lg.num_nodes() {
            let slot = lg.qidx(lnode, 1);
            let left = qk[slot];
            if left != 0.0 {
                out.dropped[k] += lg.beta[lnode] * left;
                out.dropped_raw[k] += left;
                qk[slot] = 0.0;
            }
        }
        // Age the remaining content by one lifetime.
        for lnode in 0..lg.num_nodes() {
            for l in 1..l_max {
                qk[lg.qidx(lnode, l)] = qk[lg.qidx(lnode, l + 1)];
            }
            qk[lg.qidx(lnode, l_max)] = 0.0;
        }
        // Receiving phase: scaled inflow lands one lifetime lower; the
        // destination consumes everything on arrival.
        for (e, edge) in lg.edges.iter().enumerate() {
            for l in 1..=l_max {
                let v = x[lg.fidx(e, l)];
                if v == 0.0 {
                    continue;
                }
                let arrived = edge.scale * v;
                if edge.head == lg.destination {
                    out.delivered_raw[k] += arrived;
                } else {
                    // l == 1 off-destination is rejected by admissibility.
                    qk[lg.qidx(edge.head, l - 1)] += arrived;
                }
            }
        }
        out.delivered[k] = out.delivered_raw[k] / lg.delivery_scale;
        // Clamp tiny negative residue from float cancellation.
        for v in qk.iter_mut() {
            if *v < 0.0 {
                debug_assert!(*v > -1e-7, "queue went negative: {v}");
                *v = 0.0;
            }
        }
    }
    out
}

/// Per-slot records of one run; source of all reported metrics.
#[derive(Debug, Clone)]
pub struct MetricsTrace {
    pub horizon: usize,
    /// `[commodity][t]` total exogenous arrivals.
    pub arrivals: Vec<Vec<f64>>,
    /// `[commodity][t]` effective deliveries in input units.
    pub delivered: Vec<Vec<f64>>,
    /// `[commodity][t]` expired amounts in input units.
    pub dropped: Vec<Vec<f64>>,
    /// `[commodity][t]` resource cost.
    pub cost: Vec<Vec<f64>>,
    /// `[t]` total raw backlog after the slot.
    pub backlog: Vec<f64>,
    /// `[commodity][edge*L + l-1]` time-average actual flow.
    pub mean_flow: Vec<Vec<f64>>,
}

impl MetricsTrace {
    pub(crate) fn with_capacity(scenario: &Scenario, horizon: usize) -> Self {
        let nc = scenario.num_commodities();
        MetricsTrace {
            horizon,
            arrivals: vec![Vec::with_capacity(horizon); nc],
            delivered: vec![Vec::with_capacity(horizon); nc],
            dropped: vec![Vec::with_capacity(horizon); nc],
            cost: vec![Vec::with_capacity(horizon); nc],
            backlog: Vec::with_capacity(horizon),
            mean_flow: scenario
                .layered
                .iter()
                .map(|lg| vec![0.0; lg.num_edges() * lg.max_lifetime])
                .collect(),
        }
    }

    pub fn total_cost_series(&self) -> Vec<f64> {
        let mut total = vec![0.0; self.horizon];
        for per_commodity in &self.cost {
            for (t, v) in per_commodity.iter().enumerate() {
                total[t] += v;
            }
        }
        total
    }

    /// Running-average reliability gap of one commodity:
    /// `target - mean(delivered[0..s])` for `s = 1..=horizon`.
    pub fn reliability_gap_series(&self, commodity: usize, target: f64) -> Vec<f64> {
        let mut gaps = Vec::with_capacity(self.horizon);
        let mut sum = 0.0;
        for (t, d) in self.delivered[commodity].iter().enumerate() {
            sum += d;
            gaps.push(target - sum / (t + 1) as f64);
        }
        gaps
    }

    pub fn mean_delivered(&self, commodity: usize) -> f64 {
        mean(&self.delivered[commodity])
    }

    pub fn mean_total_cost(&self) -> f64 {
        self.cost.iter().map(|c| mean(c)).sum()
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Interface every control policy implements: observe the queue state and
/// this slot's arrivals, emit the slot's flow.
pub trait Policy {
    fn decide(&mut self, ctx: &SlotCtx, flow: &mut FlowVector);
}

/// Read-only view of the state a policy may condition on.
pub struct SlotCtx<'a> {
    pub scenario: &'a Scenario,
    pub t: u64,
    pub q: &'a QueueState,
    /// Arrivals loaded this slot, shaped like the queue state.
    pub arrivals: &'a [Vec<f64>],
    /// Master seed for policy randomness substreams.
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("slot {slot}: {source}")]
    Inadmissible {
        slot: u64,
        #[source]
        source: AdmissibilityError,
    },
    #[error("slot {slot}: mass balance violated by {violation}")]
    MassBalance { slot: u64, violation: f64 },
    #[error("slot {slot}: {source}")]
    Traffic {
        slot: u64,
        #[source]
        source: TrafficError,
    },
    #[error("integer mode requires integer flows, got {amount} at slot {slot}")]
    NonIntegerFlow { slot: u64, amount: f64 },
}

pub struct SimOptions {
    pub capacity_mode: CapacityMode,
    pub numeric_mode: NumericMode,
}

/// Runs `policy` for `horizon` slots. Deterministic given (scenario, spec,
/// policy state, seed).
pub fn run_simulation(
    scenario: &Scenario,
    spec: &ArrivalSpec,
    policy: &mut dyn Policy,
    horizon: usize,
    seed: u64,
    options: &SimOptions,
) -> Result<MetricsTrace, SimError> {
    let mut q = QueueState::new(scenario);
    let mut arrivals: Vec<Vec<f64>> = scenario
        .layered
        .iter()
        .map(|lg| vec![0.0; lg.num_nodes() * lg.max_lifetime])
        .collect();
    let mut flow = FlowVector::zeros(scenario);
    let mut trace = MetricsTrace::with_capacity(scenario, horizon);

    for t in 0..horizon as u64 {
        for buf in &mut arrivals {
            buf.iter_mut().for_each(|v| *v = 0.0);
        }
        spec.sample_into(scenario, seed, t, &mut arrivals)
            .map_err(|source| SimError::Traffic { slot: t, source })?;
        let mut arrived_total = vec![0.0; scenario.num_commodities()];
        for (k, buf) in arrivals.iter().enumerate() {
            let mut sum = 0.0;
            for (slot, v) in buf.iter().enumerate() {
                if *v != 0.0 {
                    q.q[k][slot] += v;
                    sum += v;
                }
            }
            arrived_total[k] = sum;
        }

        flow.clear();
        let ctx = SlotCtx { scenario, t, q: &q, arrivals: &arrivals, seed };
        policy.decide(&ctx, &mut flow);

        check_admissible(scenario, &q, &flow, options.capacity_mode)
            .map_err(|source| SimError::Inadmissible { slot: t, source })?;
        if options.numeric_mode == NumericMode::Integer {
            for xs in &flow.x {
                for &v in xs {
                    if v.fract() != 0.0 {
                        return Err(SimError::NonIntegerFlow { slot: t, amount: v });
                    }
                }
            }
        }

        let before = q.total();
        let outcome = step_slot(scenario, &mut q, &flow);
        let after = q.total();

        // Raw mass balance: backlog change equals scaled inflow minus
        // outflow minus deliveries minus expiries.
        let mut expected = before;
        for (k, lg) in scenario.layered.iter().enumerate() {
            let x = &flow.x[k];
            let mut out_sum = 0.0;
            let mut in_scaled = 0.0;
            for (e, edge) in lg.edges.iter().enumerate() {
                for l in 1..=lg.max_lifetime {
                    let v = x[lg.fidx(e, l)];
                    out_sum += v;
                    in_scaled += edge.scale * v;
                }
            }
            expected += in_scaled - out_sum - outcome.delivered_raw[k] - outcome.dropped_raw[k];
        }
        let violation = (expected - after).abs();
        if violation > 1e-6 * (1.0 + before.abs()) {
            return Err(SimError::MassBalance { slot: t, violation });
        }

        for k in 0..scenario.num_commodities() {
            trace.arrivals[k].push(arrived_total[k]);
            trace.delivered[k].push(outcome.delivered[k]);
            trace.dropped[k].push(outcome.dropped[k]);
            trace.cost[k].push(outcome.cost[k]);
            let lg = &scenario.layered[k];
            let n = lg.num_edges() * lg.max_lifetime;
            let t1 = (t + 1) as f64;
            for i in 0..n {
                trace.mean_flow[k][i] += (flow.x[k][i] - trace.mean_flow[k][i]) / t1;
            }
        }
        trace.backlog.push(after);
    }
    Ok(trace)
}

/// Summary statistics computed from a trace.
#[derive(Debug, Clone)]
pub struct MetricsSummary {
    /// Per commodity: long-run effective delivery rate (input units/slot).
    pub timely_throughput: Vec<f64>,
    /// Per commodity: throughput divided by the target `gamma * |lambda|_1`.
    pub reliability_ratio: Vec<f64>,
    /// Per commodity: delivered fraction of offered traffic.
    pub delivered_fraction: Vec<f64>,
    pub drop_rate: Vec<f64>,
    pub mean_cost: f64,
}

/// Reliability targets `gamma * |lambda|_1` per commodity.
pub fn reliability_targets(scenario: &Scenario, spec: &ArrivalSpec) -> Vec<f64> {
    let l1 = spec.rate_l1(scenario.num_commodities());
    scenario
        .services
        .iter()
        .zip(l1)
        .map(|(svc, rate)| svc.reliability * rate)
        .collect()
}

pub fn compute_metrics(scenario: &Scenario, spec: &ArrivalSpec, trace: &MetricsTrace) -> MetricsSummary {
    let targets = reliability_targets(scenario, spec);
    let nc = scenario.num_commodities();
    let mut timely = Vec::with_capacity(nc);
    let mut ratio = Vec::with_capacity(nc);
    let mut fraction = Vec::with_capacity(nc);
    let mut drops = Vec::with_capacity(nc);
    for k in 0..nc {
        let thr = trace.mean_delivered(k);
        timely.push(thr);
        ratio.push(if targets[k] > 0.0 { thr / targets[k] } else { f64::INFINITY });
        let offered = mean(&trace.arrivals[k]);
        fraction.push(if offered > 0.0 { thr / offered } else { 0.0 });
        let dropped = mean(&trace.dropped[k]);
        drops.push(if offered > 0.0 { dropped / offered } else { 0.0 });
    }
    MetricsSummary {
        timely_throughput: timely,
        reliability_ratio: ratio,
        delivered_fraction: fraction,
        drop_rate: drops,
        mean_cost: trace.mean_total_cost(),
    }
}

/// Writes the trace as CSV: one row per (slot, commodity), stable order,
/// '.' decimals, '\n' line endings.
pub fn write_trace_csv<W: std::io::Write>(
    scenario: &Scenario,
    spec: &ArrivalSpec,
    trace: &MetricsTrace,
    writer: W,
) -> csv::Result<()> {
    let targets = reliability_targets(scenario, spec);
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    w.write_record(["slot", "commodity", "arrivals", "delivered", "dropped", "cost", "reliability_gap"])?;
    let nc = scenario.num_commodities();
    let mut sums = vec![0.0; nc];
    for t in 0..trace.horizon {
        for k in 0..nc {
            sums[k] += trace.delivered[k][t];
            let gap = targets[k] - sums[k] / (t + 1) as f64;
            w.write_record(&[
                t.to_string(),
                scenario.services[k].name.clone(),
                fmt_num(trace.arrivals[k][t]),
                fmt_num(trace.delivered[k][t]),
                fmt_num(trace.dropped[k][t]),
                fmt_num(trace.cost[k][t]),
                fmt_num(gap),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn fmt_num(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Policy that never transmits.
pub struct ZeroPolicy;

impl Policy for ZeroPolicy {
    fn decide(&mut self, _ctx: &SlotCtx, flow: &mut FlowVector) {
        flow.clear();
    }
}

/// Greedy direct-delivery policy for worked single-hop examples: pushes as
/// much as capacity allows over edges into the destination, oldest (lowest
/// lifetime) first; everything else stays put.
pub struct GreedyDeliveryPolicy;

impl Policy for GreedyDeliveryPolicy {
    fn decide(&mut self, ctx: &SlotCtx, flow: &mut FlowVector) {
        let scenario = ctx.scenario;
        let mut budget: Vec<f64> = scenario.resources.iter().map(|r| r.capacity).collect();
        for (k, lg) in scenario.layered.iter().enumerate() {
            for lnode in 0..lg.num_nodes() {
                if lnode == lg.destination {
                    continue;
                }
                for l in 1..=lg.max_lifetime {
                    let mut avail = ctx.q.q[k][lg.qidx(lnode, l)];
                    if avail <= 0.0 {
                        continue;
                    }
                    for &e in &lg.out_edges[lnode] {
                        if lg.edges[e].head != lg.destination {
                            continue;
                        }
                        let rho = lg.edges[e].workload;
                        let room = budget[lg.edges[e].resource] / rho;
                        let send = avail.min(room).floor().max(0.0);
                        if send > 0.0 {
                            flow.x[k][lg.fidx(e, l)] += send;
                            budget[lg.edges[e].resource] -= rho * send;
                            avail -= send;
                        }
                    }
                }
            }
        }
    }
}
