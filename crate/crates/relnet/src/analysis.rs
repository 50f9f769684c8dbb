//! LP oracles and baselines.
//!
//! The delay-constrained stability region is characterized by a linear
//! program over lifetime-indexed flows: delivered scaled flow must cover the
//! reliability target, per-resource loads stay within capacity, and at every
//! (node, lifetime) the outflow of lifetimes >= l is covered by scaled
//! inflow of lifetimes >= l+1 plus arrivals of lifetimes >= l. The margin
//! oracle maximizes a joint scaling of all arrival rates; a margin above 1
//! means the offered load is strictly inside the region. The min-cost oracle
//! fixes the load and minimizes total resource cost, providing ground truth
//! for simulator acceptance.
//!
//! Also here: the time for a delivery trace to converge within epsilon of
//! its reliability target, and a cost-penalized backpressure baseline on
//! standard (lifetime-oblivious) queues with LIFO service, used only for
//! comparison plots.

use crate::graph::Scenario;
use crate::lp::{solve_lp, LpProblem, LpStatus, LpTolerances, Sense};
use crate::sim::{MetricsTrace, SimError};
use crate::traffic::ArrivalSpec;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("stability LP failed with status {0:?}")]
    LpFailure(LpStatus),
    #[error("offered load is outside the delay-constrained stability region")]
    Infeasible,
}

/// Result of the stability-margin oracle.
#[derive(Debug, Clone)]
pub enum StabilityMargin {
    /// Largest theta such that theta-scaled arrivals remain supportable.
    Bounded { theta: f64, flows: Vec<Vec<f64>> },
    /// The reliability constraint is vacuous (zero target): any scaling is
    /// supportable.
    Unbounded,
}

fn region_lp(
    scenario: &Scenario,
    rates: &[Vec<f64>],
    theta_var: bool,
) -> (LpProblem, Vec<Vec<Option<usize>>>) {
    let nc = scenario.num_commodities();
    let mut var_of: Vec<Vec<Option<usize>>> = Vec::with_capacity(nc);
    let mut num_vars = 0usize;
    for lg in &scenario.layered {
        let mut map = vec![None; lg.num_edges() * lg.max_lifetime];
        for e in 0..lg.num_edges() {
            for l in 1..=lg.max_lifetime {
                if lg.flow_allowed(e, l) {
                    map[lg.fidx(e, l)] = Some(num_vars);
                    num_vars += 1;
                }
            }
        }
        var_of.push(map);
    }
    let theta = num_vars;
    let total_vars = num_vars + usize::from(theta_var);
    let mut p = LpProblem::new(if theta_var { Sense::Maximize } else { Sense::Minimize }, total_vars);

    let l1 = {
        let mut l1 = vec![0.0; nc];
        for (k, r) in rates.iter().enumerate() {
            l1[k] = r.iter().sum();
        }
        l1
    };

    for (k, lg) in scenario.layered.iter().enumerate() {
        // Reliability: scaled inflow at the destination covers the target.
        let target = lg.reliability * lg.delivery_scale * l1[k];
        let mut coeffs: Vec<(usize, f64)> = Vec::new();
        for &e in &lg.in_edges[lg.destination] {
            for l in 1..=lg.max_lifetime {
                if let Some(v) = var_of[k][lg.fidx(e, l)] {
                    coeffs.push((v, -lg.edges[e].scale));
                }
            }
        }
        if theta_var {
            coeffs.push((theta, target));
            p.push_row(format!("rel:{k}"), &coeffs, 0.0);
        } else {
            p.push_row(format!("rel:{k}"), &coeffs, -target);
        }

        // Lifetime conservation per (node, lifetime), suffix form.
        for lnode in 0..lg.num_nodes() {
            if lnode == lg.destination {
                continue;
            }
            let mut lam_geq = 0.0;
            for l in (1..=lg.max_lifetime).rev() {
                lam_geq += rates[k][lg.qidx(lnode, l)];
                let mut coeffs: Vec<(usize, f64)> = Vec::new();
                for ll in l..=lg.max_lifetime {
                    for &e in &lg.out_edges[lnode] {
                        if let Some(v) = var_of[k][lg.fidx(e, ll)] {
                            coeffs.push((v, 1.0));
                        }
                    }
                }
                for ll in l + 1..=lg.max_lifetime {
                    for &e in &lg.in_edges[lnode] {
                        if let Some(v) = var_of[k][lg.fidx(e, ll)] {
                            coeffs.push((v, -lg.edges[e].scale));
                        }
                    }
                }
                if theta_var {
                    coeffs.push((theta, -lam_geq));
                    p.push_row(format!("cons:{k}:{lnode}:l{l}"), &coeffs, 0.0);
                } else {
                    p.push_row(format!("cons:{k}:{lnode}:l{l}"), &coeffs, lam_geq);
                }
            }
        }
    }

    // Shared resource capacities.
    for (r, members) in scenario.resource_members.iter().enumerate() {
        let mut coeffs: Vec<(usize, f64)> = Vec::new();
        for &(k, e) in members {
            let lg = &scenario.layered[k];
            for l in 1..=lg.max_lifetime {
                if let Some(v) = var_of[k][lg.fidx(e, l)] {
                    coeffs.push((v, lg.edges[e].workload));
                }
            }
        }
        p.push_row(
            format!("cap:{}", scenario.resources[r].label),
            &coeffs,
            scenario.resources[r].capacity,
        );
    }
    (p, var_of)
}

fn extract_flows(
    scenario: &Scenario,
    var_of: &[Vec<Option<usize>>],
    x: &[f64],
) -> Vec<Vec<f64>> {
    scenario
        .layered
        .iter()
        .enumerate()
        .map(|(k, lg)| {
            (0..lg.num_edges() * lg.max_lifetime)
                .map(|i| var_of[k][i].map_or(0.0, |v| x[v]))
                .collect()
        })
        .collect()
}

/// Maximal joint scaling theta of the offered rates that stays supportable;
/// theta > 1 iff the load is strictly inside the region.
pub fn stability_margin_lp(
    scenario: &Scenario,
    rates: &[Vec<f64>],
) -> Result<StabilityMargin, AnalysisError> {
    let (mut p, var_of) = region_lp(scenario, rates, true);
    let theta = p.num_vars() - 1;
    p.objective[theta] = 1.0;
    let sol = solve_lp(&p, &LpTolerances::default());
    match sol.status {
        LpStatus::Optimal => Ok(StabilityMargin::Bounded {
            theta: sol.x[theta],
            flows: extract_flows(scenario, &var_of, &sol.x),
        }),
        LpStatus::Unbounded => Ok(StabilityMargin::Unbounded),
        LpStatus::Infeasible => Err(AnalysisError::LpFailure(LpStatus::Infeasible)),
    }
}

#[derive(Debug, Clone)]
pub struct MinCostFlow {
    pub cost: f64,
    pub flows: Vec<Vec<f64>>,
}

/// Least-cost flow assignment supporting the offered load, or `Infeasible`
/// when the load is outside the region.
pub fn min_cost_flow_lp(
    scenario: &Scenario,
    rates: &[Vec<f64>],
) -> Result<MinCostFlow, AnalysisError> {
    let (mut p, var_of) = region_lp(scenario, rates, false);
    for (k, lg) in scenario.layered.iter().enumerate() {
        for (e, edge) in lg.edges.iter().enumerate() {
            for l in 1..=lg.max_lifetime {
                if let Some(v) = var_of[k][lg.fidx(e, l)] {
                    p.objective[v] = edge.cost * edge.workload;
                }
            }
        }
    }
    let sol = solve_lp(&p, &LpTolerances::default());
    match sol.status {
        LpStatus::Optimal => Ok(MinCostFlow {
            cost: sol.objective,
            flows: extract_flows(scenario, &var_of, &sol.x),
        }),
        LpStatus::Infeasible => Err(AnalysisError::Infeasible),
        LpStatus::Unbounded => Err(AnalysisError::LpFailure(LpStatus::Unbounded)),
    }
}

/// First slot after which the running-average delivery stays within
/// `epsilon` of `target` for the rest of the trace; `None` when the
/// criterion is never met. Slots are counted from 1.
pub fn epsilon_convergence_time(delivered: &[f64], target: f64, epsilon: f64) -> Option<usize> {
    let mut last_bad = 0usize;
    let mut sum = 0.0;
    for (i, d) in delivered.iter().enumerate() {
        sum += d;
        let gap = target - sum / (i + 1) as f64;
        if gap > epsilon {
            last_bad = i + 1;
        }
    }
    if last_bad == delivered.len() && !delivered.is_empty() {
        None
    } else {
        Some(last_bad + 1)
    }
}

/// Cost-penalized backpressure baseline.
///
/// Standard per-(node, stage) queues without lifetime structure: each
/// resource serves the (commodity, edge) with the largest positive
/// differential backlog `(Q_tail - zeta Q_head) / rho - V e`, LIFO within
/// the queue, and nothing is ever dropped. Packet ages ride along so the
/// trace's `delivered` column still counts only within-deadline amounts;
/// late deliveries appear in the `dropped` column.
pub struct BackpressureOptions {
    pub v: f64,
}

struct Stack {
    /// (expiry slot, amount), oldest first; the back is the LIFO top.
    segments: Vec<(u64, f64)>,
    total: f64,
}

impl Stack {
    fn new() -> Self {
        Stack { segments: Vec::new(), total: 0.0 }
    }

    fn push(&mut self, expiry: u64, amount: f64) {
        if amount <= 0.0 {
            return;
        }
        self.total += amount;
        if let Some(last) = self.segments.last_mut() {
            if last.0 == expiry {
                last.1 += amount;
                return;
            }
        }
        self.segments.push((expiry, amount));
    }

    /// Pops up to `amount` from the top, returning (expiry, amount) pieces.
    fn pop(&mut self, mut amount: f64, out: &mut Vec<(u64, f64)>) {
        while amount > 1e-12 {
            let Some(&mut (expiry, ref mut have)) = self.segments.last_mut() else {
                break;
            };
            let take = amount.min(*have);
            *have -= take;
            self.total -= take;
            amount -= take;
            out.push((expiry, take));
            if *have <= 1e-12 {
                self.total -= *have;
                self.segments.pop();
            }
        }
        if self.total < 0.0 {
            self.total = 0.0;
        }
    }
}

pub fn run_backpressure(
    scenario: &Scenario,
    spec: &ArrivalSpec,
    opts: &BackpressureOptions,
    horizon: usize,
    seed: u64,
) -> Result<MetricsTrace, SimError> {
    let nc = scenario.num_commodities();
    let mut stacks: Vec<Vec<Stack>> = scenario
        .layered
        .iter()
        .map(|lg| (0..lg.num_nodes()).map(|_| Stack::new()).collect())
        .collect();
    let mut arrivals: Vec<Vec<f64>> = scenario
        .layered
        .iter()
        .map(|lg| vec![0.0; lg.num_nodes() * lg.max_lifetime])
        .collect();
    let mut trace = MetricsTrace::with_capacity(scenario, horizon);
    let mut popped: Vec<(u64, f64)> = Vec::new();

    for t in 0..horizon as u64 {
        for buf in &mut arrivals {
            buf.iter_mut().for_each(|v| *v = 0.0);
        }
        spec.sample_into(scenario, seed, t, &mut arrivals)
            .map_err(|source| SimError::Traffic { slot: t, source })?;
        let mut arrived = vec![0.0; nc];
        for (k, lg) in scenario.layered.iter().enumerate() {
            for lnode in 0..lg.num_nodes() {
                for l in 1..=lg.max_lifetime {
                    let a = arrivals[k][lg.qidx(lnode, l)];
                    if a > 0.0 {
                        stacks[k][lnode].push(t + l as u64 - 1, a);
                        arrived[k] += a;
                    }
                }
            }
        }

        let mut delivered = vec![0.0; nc];
        let mut late = vec![0.0; nc];
        let mut cost = vec![0.0; nc];
        for (r, members) in scenario.resource_members.iter().enumerate() {
            let cap = scenario.resources[r].capacity;
            if cap <= 0.0 {
                continue;
            }
            let mut best = 0.0;
            let mut winner = None;
            for &(k, e) in members {
                let lg = &scenario.layered[k];
                let edge = &lg.edges[e];
                if edge.tail == lg.destination {
                    continue;
                }
                let head_backlog = if edge.head == lg.destination {
                    0.0
                } else {
                    stacks[k][edge.head].total
                };
                let w = (stacks[k][edge.tail].total - edge.scale * head_backlog) / edge.workload
                    - opts.v * edge.cost;
                if w > best {
                    best = w;
                    winner = Some((k, e));
                }
            }
            if let Some((k, e)) = winner {
                let lg = &scenario.layered[k];
                let edge = lg.edges[e].clone();
                let amount = (cap / edge.workload).min(stacks[k][edge.tail].total);
                if amount <= 0.0 {
                    continue;
                }
                popped.clear();
                stacks[k][edge.tail].pop(amount, &mut popped);
                let mut moved = 0.0;
                for &(expiry, amt) in &popped {
                    moved += amt;
                    if edge.head == lg.destination {
                        if t <= expiry {
                            delivered[k] += edge.scale * amt / lg.delivery_scale;
                        } else {
                            late[k] += edge.scale * amt / lg.delivery_scale;
                        }
                    } else {
                        stacks[k][edge.head].push(expiry, edge.scale * amt);
                    }
                }
                cost[k] += edge.cost * edge.workload * moved;
            }
        }

        let mut backlog = 0.0;
        for per_node in &stacks {
            for s in per_node {
                backlog += s.total;
            }
        }
        for k in 0..nc {
            trace.arrivals[k].push(arrived[k]);
            trace.delivered[k].push(delivered[k]);
            trace.dropped[k].push(late[k]);
            trace.cost[k].push(cost[k]);
        }
        trace.backlog.push(backlog);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{NetworkGraph, RawGraph, RawLink, Scenario, ServiceChain};
    use crate::traffic::{ArrivalEntry, ArrivalKind};
    use approx::assert_relative_eq;

    fn diamond(gamma: f64, lifetime: usize) -> Scenario {
        let g = NetworkGraph::validate(&crate::graph::tests::diamond_raw()).unwrap();
        let svc = ServiceChain {
            name: "svc".into(), functions: vec![], sources: vec![0],
            destination: 3, max_lifetime: lifetime, reliability: gamma,
        };
        Scenario::build(g, vec![svc]).unwrap()
    }

    fn unit_rates(scenario: &Scenario, rate: f64) -> Vec<Vec<f64>> {
        let lg = &scenario.layered[0];
        let mut rates = vec![vec![0.0; lg.num_nodes() * lg.max_lifetime]];
        rates[0][lg.qidx(0, lg.max_lifetime)] = rate;
        rates
    }

    #[test]
    fn margin_on_two_disjoint_routes() {
        // Both 2-hop routes saturate at 5 each: 0.9 * theta <= 10.
        let scenario = diamond(0.9, 2);
        let rates = unit_rates(&scenario, 1.0);
        match stability_margin_lp(&scenario, &rates).unwrap() {
            StabilityMargin::Bounded { theta, .. } => {
                assert_relative_eq!(theta, 100.0 / 9.0, epsilon = 1e-6);
            }
            StabilityMargin::Unbounded => panic!("expected bounded margin"),
        }
    }

    #[test]
    fn zero_reliability_is_unbounded() {
        let g = NetworkGraph::validate(&crate::graph::tests::diamond_raw()).unwrap();
        let svc = ServiceChain {
            name: "svc".into(), functions: vec![], sources: vec![0],
            destination: 3, max_lifetime: 2, reliability: 1e-300,
        };
        let scenario = Scenario::build(g, vec![svc]).unwrap();
        // Zero offered rate makes the reliability target zero: vacuous.
        let lg = &scenario.layered[0];
        let rates = vec![vec![0.0; lg.num_nodes() * lg.max_lifetime]];
        assert!(matches!(
            stability_margin_lp(&scenario, &rates).unwrap(),
            StabilityMargin::Unbounded
        ));
    }

    #[test]
    fn lifetime_too_short_to_traverse() {
        // L = 1 but every route to d is 2 hops: only theta = 0 fits.
        let scenario = diamond(0.9, 1);
        let rates = unit_rates(&scenario, 1.0);
        match stability_margin_lp(&scenario, &rates).unwrap() {
            StabilityMargin::Bounded { theta, flows } => {
                assert_relative_eq!(theta, 0.0, epsilon = 1e-9);
                let delivered: f64 = flows[0].iter().sum();
                assert_relative_eq!(delivered, 0.0, epsilon = 1e-9);
            }
            StabilityMargin::Unbounded => panic!("expected bounded"),
        }
    }

    #[test]
    fn min_cost_on_reference_instance() {
        // gamma |lambda| = 5.4: cheap route saturates at 5, expensive route
        // carries 0.4, cost 5*2 + 0.4*10 = 14.
        let scenario = diamond(0.9, 2);
        let rates = unit_rates(&scenario, 6.0);
        let result = min_cost_flow_lp(&scenario, &rates).unwrap();
        assert_relative_eq!(result.cost, 14.0, epsilon = 1e-6);
        let lg = &scenario.layered[0];
        let e12 = scenario.graph.edges.iter().position(|&e| e == (0, 1)).unwrap();
        let e13 = scenario.graph.edges.iter().position(|&e| e == (0, 2)).unwrap();
        let f12: f64 = (1..=2).map(|l| result.flows[0][lg.fidx(e12, l)]).sum();
        let f13: f64 = (1..=2).map(|l| result.flows[0][lg.fidx(e13, l)]).sum();
        assert_relative_eq!(f12, 5.0, epsilon = 1e-6);
        assert_relative_eq!(f13, 0.4, epsilon = 1e-6);
    }

    #[test]
    fn min_cost_zero_demand_is_free() {
        let scenario = diamond(0.9, 2);
        let rates = unit_rates(&scenario, 0.0);
        let result = min_cost_flow_lp(&scenario, &rates).unwrap();
        assert_relative_eq!(result.cost, 0.0);
        assert!(result.flows[0].iter().all(|&x| x.abs() < 1e-9));
    }

    #[test]
    fn min_cost_with_cheaper_second_route() {
        // Dropping the expensive route's cost to 2/hop: 5*2 + 0.4*4 = 11.6.
        let mut raw = crate::graph::tests::diamond_raw();
        for link in raw.links.iter_mut() {
            if link.cost == 5.0 {
                link.cost = 2.0;
            }
        }
        let g = NetworkGraph::validate(&raw).unwrap();
        let svc = ServiceChain {
            name: "svc".into(), functions: vec![], sources: vec![0],
            destination: 3, max_lifetime: 2, reliability: 0.9,
        };
        let scenario = Scenario::build(g, vec![svc]).unwrap();
        let rates = unit_rates(&scenario, 6.0);
        let result = min_cost_flow_lp(&scenario, &rates).unwrap();
        assert_relative_eq!(result.cost, 11.6, epsilon = 1e-6);
    }

    #[test]
    fn infeasible_load_reported() {
        let scenario = diamond(1.0, 2);
        let rates = unit_rates(&scenario, 20.0); // needs 20 > 10 deliverable
        assert!(matches!(
            min_cost_flow_lp(&scenario, &rates),
            Err(AnalysisError::Infeasible)
        ));
    }

    #[test]
    fn convergence_time_examples() {
        // Delivering the target exactly every slot converges immediately.
        assert_eq!(epsilon_convergence_time(&[5.4; 100], 5.4, 0.01), Some(1));
        // Never delivering never converges.
        assert_eq!(epsilon_convergence_time(&[0.0; 100], 5.4, 0.01), None);
        // A cold start converges once the running mean catches up.
        let mut series = vec![0.0; 10];
        series.extend(vec![1.0; 990]);
        let t = epsilon_convergence_time(&series, 1.0, 0.05).unwrap();
        assert!(t > 10 && t < 500, "t = {t}");
    }

    #[test]
    fn backpressure_single_link_examples() {
        // Single link, big backlog: transmit at full capacity. No backlog:
        // nothing moves.
        let raw = RawGraph {
            nodes: vec!["s".into(), "d".into()],
            links: vec![RawLink { from: "s".into(), to: "d".into(), capacity: 2.0, cost: 2.0, undirected: false }],
            destination: Some("d".into()),
            compute: vec![],
        };
        let g = NetworkGraph::validate(&raw).unwrap();
        let svc = ServiceChain {
            name: "svc".into(), functions: vec![], sources: vec![0],
            destination: 1, max_lifetime: 4, reliability: 0.9,
        };
        let scenario = Scenario::build(g, vec![svc]).unwrap();
        let mut spec = ArrivalSpec::new(
            vec![ArrivalEntry {
                commodity: 0, node: 0, stage: 1, lifetime: 4,
                kind: ArrivalKind::Constant { rate: 1.0 }, a_max: f64::NAN,
            }],
            false,
        );
        spec.validate(&scenario).unwrap();
        // v e = 2*2 = 4: backlog must exceed 4 before the link fires, after
        // which it drains at capacity 2 and delivers within the deadline.
        let trace = run_backpressure(&scenario, &spec, &BackpressureOptions { v: 2.0 }, 400, 3).unwrap();
        let delivered = crate::sim::mean(&trace.delivered[0]);
        assert!(delivered > 0.9, "delivered rate {delivered}");
    }
}
