//! Iterative controller for peak-capacity networks.
//!
//! Runs the virtual controller on a *virtual* copy of the network whose link
//! capacities are adapted per frame, and matches actual transmissions to the
//! virtual assignment by stabilizing signed per-(edge, lifetime) request
//! queues `R <- R + mean-virtual-flow - actual-flow`. The actual flow is the
//! first column of an n-slot look-ahead plan chosen by an LP that maximizes
//! request-queue pressure subject to per-slot peak capacities and the
//! availability of packets, with future arrivals replaced by their empirical
//! means.
//!
//! Request queues that keep growing signal an unachievable virtual
//! assignment (an overestimated bottleneck, or upstream starvation); at each
//! frame boundary the affected virtual capacities shrink accordingly, with a
//! small pull back toward the physical capacity so the controller keeps
//! exploring upward.

use crate::graph::Scenario;
use crate::lp::{solve_lp, LpProblem, LpSolution, LpStatus, LpTolerances, Sense};
use crate::sim::{FlowVector, Policy, SlotCtx};
use crate::vnet::{compute_weights, max_weight_flow, RunningMeans, VirtualQueues, Weights};
use thiserror::Error;

#[derive(Debug, Clone)]
pub struct RcncOptions {
    pub v: f64,
    /// Look-ahead depth n; `None` uses each commodity's maximum lifetime.
    pub lookahead: Option<usize>,
    /// Frame length K in slots.
    pub frame_len: usize,
    /// Capacity-iteration smoothing constant in (0, 1).
    pub kappa: f64,
    /// Decouple the flow-matching LP per node using empirical inflow
    /// estimates instead of neighbor decisions.
    pub distributed: bool,
}

impl Default for RcncOptions {
    fn default() -> Self {
        RcncOptions { v: 1.0, lookahead: None, frame_len: 2000, kappa: 0.1, distributed: false }
    }
}

#[derive(Debug, Error)]
pub enum RcncError {
    #[error("flow-matching LP reported {0:?} (zero flow is always feasible)")]
    SolverFailure(LpStatus),
}

/// Per-frame capacity-iteration record, one entry per resource.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub frame: usize,
    /// Virtual capacities after the update.
    pub caps: Vec<f64>,
    /// Request-queue growth rates r (flow units per slot).
    pub growth: Vec<f64>,
    /// Capacity corrections eps (resource units per slot).
    pub eps: Vec<f64>,
}

/// Identifies plan variables: `var_of[commodity][edge*L + l-1]` is the LP
/// column of the current-slot (tau = 0) decision, or `None` when the
/// variable is not part of the problem (filtered node in distributed mode).
pub struct PlanVars {
    pub var_of: Vec<Vec<Option<usize>>>,
}

/// Lifetime-shift propagation: returns `sum_{s=0..tau} D^(tau-s) X[:, s]`
/// where `D` shifts lifetime l+1 content down to l and `X`'s columns are
/// per-slot lifetime vectors. Column `s` contributes its entries aged by
/// `tau - s` slots.
pub fn delay_propagate(l_max: usize, columns: &[Vec<f64>], tau: usize) -> Vec<f64> {
    assert!(tau < columns.len(), "need tau+1 plan columns");
    let mut out = vec![0.0; l_max];
    for s in 0..=tau {
        let age = tau - s;
        for l in 0..l_max {
            if l + age < l_max {
                out[l] += columns[s][l + age];
            }
        }
    }
    out
}

/// Builds the flow-matching LP.
///
/// Maximizes `sum <R_e, plan_e * 1>` subject to, per plan slot tau:
/// per-resource peak capacity of the tau-th plan column, and per-(node,
/// lifetime) availability of packets after tau slots of queue dynamics with
/// arrivals estimated by `rates`. With `inflow_est` given (distributed
/// mode), neighbor plan columns are replaced by those estimates and the
/// problem decouples per node; `node_filter` then restricts rows and
/// variables to one physical node.
#[allow(clippy::too_many_arguments)]
pub fn assemble_flow_matching_lp(
    scenario: &Scenario,
    request: &[Vec<f64>],
    queues: &[Vec<f64>],
    rates: &[Vec<f64>],
    inflow_est: Option<&[Vec<f64>]>,
    lookahead: &[usize],
    node_filter: Option<usize>,
) -> (LpProblem, PlanVars) {
    let nc = scenario.num_commodities();
    let keep_edge = |k: usize, e: usize| -> bool {
        match node_filter {
            None => true,
            Some(p) => {
                let lg = &scenario.layered[k];
                lg.phys_node(lg.edges[e].tail) == p
            }
        }
    };
    let keep_lnode = |k: usize, lnode: usize| -> bool {
        match node_filter {
            None => true,
            Some(p) => scenario.layered[k].phys_node(lnode) == p,
        }
    };

    // Variable layout: (commodity, edge, lifetime, tau), tau innermost.
    let mut var_of: Vec<Vec<Option<usize>>> = Vec::with_capacity(nc);
    let mut num_vars = 0usize;
    for k in 0..nc {
        let lg = &scenario.layered[k];
        let mut map = vec![None; lg.num_edges() * lg.max_lifetime];
        for e in 0..lg.num_edges() {
            if !keep_edge(k, e) {
                continue;
            }
            for l in 1..=lg.max_lifetime {
                map[lg.fidx(e, l)] = Some(num_vars);
                num_vars += lookahead[k];
            }
        }
        var_of.push(map);
    }

    let mut p = LpProblem::new(Sense::Maximize, num_vars);
    for k in 0..nc {
        let lg = &scenario.layered[k];
        for e in 0..lg.num_edges() {
            for l in 1..=lg.max_lifetime {
                let Some(base) = var_of[k][lg.fidx(e, l)] else { continue };
                let pressure = request[k][lg.fidx(e, l)];
                for tau in 0..lookahead[k] {
                    p.objective[base + tau] = pressure;
                    if !lg.flow_allowed(e, l) {
                        p.fix(base + tau, 0.0);
                    }
                }
            }
        }
    }

    // Peak capacity of every plan column, grouped per physical resource.
    let n_max = lookahead.iter().copied().max().unwrap_or(1);
    for tau in 0..n_max {
        for (r, members) in scenario.resource_members.iter().enumerate() {
            let mut coeffs: Vec<(usize, f64)> = Vec::new();
            let mut relevant = false;
            for &(k, e) in members {
                if tau >= lookahead[k] {
                    continue;
                }
                relevant = true;
                let lg = &scenario.layered[k];
                if let Some(owner) = node_filter {
                    if lg.phys_node(lg.edges[e].tail) != owner {
                        continue;
                    }
                }
                for l in 1..=lg.max_lifetime {
                    if let Some(base) = var_of[k][lg.fidx(e, l)] {
                        coeffs.push((base + tau, lg.edges[e].workload));
                    }
                }
            }
            let in_scope = match node_filter {
                None => relevant,
                Some(_) => !coeffs.is_empty(),
            };
            if in_scope {
                p.push_row(
                    format!("cap:{}:t{tau}", scenario.resources[r].label),
                    &coeffs,
                    scenario.resources[r].capacity,
                );
            }
        }
    }

    // Availability after tau slots of planned dynamics.
    for k in 0..nc {
        let lg = &scenario.layered[k];
        let l_max = lg.max_lifetime;
        for tau in 0..lookahead[k] {
            for lnode in 0..lg.num_nodes() {
                if !keep_lnode(k, lnode) {
                    continue;
                }
                for l in 1..=l_max {
                    let mut coeffs: Vec<(usize, f64)> = Vec::new();
                    for s in 0..=tau {
                        let lx = l + tau - s;
                        if lx > l_max {
                            continue;
                        }
                        for &e in &lg.out_edges[lnode] {
                            if let Some(base) = var_of[k][lg.fidx(e, lx)] {
                                coeffs.push((base + s, 1.0));
                            }
                        }
                        if s < tau && inflow_est.is_none() {
                            for &e in &lg.in_edges[lnode] {
                                if let Some(base) = var_of[k][lg.fidx(e, lx)] {
                                    coeffs.push((base + s, -lg.edges[e].scale));
                                }
                            }
                        }
                    }
                    let mut rhs = 0.0;
                    if l + tau <= l_max {
                        rhs += queues[k][lg.qidx(lnode, l + tau)];
                    }
                    for s in 1..=tau {
                        let lx = l + tau - s;
                        if lx <= l_max {
                            rhs += rates[k][lg.qidx(lnode, lx)];
                            if let Some(est) = inflow_est {
                                for &e in &lg.in_edges[lnode] {
                                    rhs += lg.edges[e].scale * est[k][lg.fidx(e, lx)];
                                }
                            }
                        }
                    }
                    p.push_row(format!("avl:{k}:{lnode}:l{l}:t{tau}"), &coeffs, rhs);
                }
            }
        }
    }
    (p, PlanVars { var_of })
}

/// Signed per-(edge, lifetime) request queues plus the frame machinery.
pub struct RcncPolicy {
    pub opts: RcncOptions,
    lookahead: Vec<usize>,
    pub u: VirtualQueues,
    pub means: RunningMeans,
    /// Signed request queues; persist across frames so unserved requests
    /// stay owed (resetting them would silently drop the deficit and leave
    /// a permanent delivery shortfall).
    pub request: Vec<Vec<f64>>,
    /// Request-queue snapshot at the last frame boundary; the capacity
    /// iteration measures per-frame growth against it.
    request_mark: Vec<Vec<f64>>,
    /// Frame-local running mean of the virtual flow. Feeding the request
    /// queues with a frame-scoped average (rather than the all-time one)
    /// keeps them tracking the *current* virtual capacities; the all-time
    /// average lags the capacity iteration and biases it upward, which
    /// leaves a permanent delivery shortfall.
    frame_flow_mean: Vec<Vec<f64>>,
    frame_samples: u64,
    /// Current virtual capacities, one per resource.
    pub virt_caps: Vec<f64>,
    frame_slot: usize,
    frame: usize,
    pub frame_log: Vec<FrameRecord>,
    pub max_lp_residual: f64,
    pub last_error: Option<RcncError>,
    weights: Weights,
    vflow: FlowVector,
    tol: LpTolerances,
}

impl RcncPolicy {
    pub fn new(scenario: &Scenario, opts: RcncOptions) -> Self {
        let lookahead = scenario
            .layered
            .iter()
            .map(|lg| {
                opts.lookahead
                    .unwrap_or(lg.max_lifetime)
                    .clamp(1, lg.max_lifetime)
            })
            .collect();
        RcncPolicy {
            lookahead,
            u: VirtualQueues::new(scenario),
            means: RunningMeans::new(scenario),
            request: scenario
                .layered
                .iter()
                .map(|lg| vec![0.0; lg.num_edges() * lg.max_lifetime])
                .collect(),
            request_mark: scenario
                .layered
                .iter()
                .map(|lg| vec![0.0; lg.num_edges() * lg.max_lifetime])
                .collect(),
            frame_flow_mean: scenario
                .layered
                .iter()
                .map(|lg| vec![0.0; lg.num_edges() * lg.max_lifetime])
                .collect(),
            frame_samples: 0,
            virt_caps: scenario.resources.iter().map(|r| r.capacity).collect(),
            frame_slot: 0,
            frame: 0,
            frame_log: Vec::new(),
            max_lp_residual: 0.0,
            last_error: None,
            weights: Weights::new(scenario),
            vflow: FlowVector::zeros(scenario),
            opts,
            tol: LpTolerances::default(),
        }
    }

    pub fn frame(&self) -> usize {
        self.frame
    }

    fn extract_plan(&self, solution: &LpSolution, vars: &PlanVars, flow: &mut FlowVector) {
        for (k, map) in vars.var_of.iter().enumerate() {
            for (idx, var) in map.iter().enumerate() {
                if let Some(base) = var {
                    let v = solution.x[*base];
                    if v > 0.0 {
                        flow.x[k][idx] = v;
                    }
                }
            }
        }
    }

    /// Scales the raw LP plan onto exact availability and peak capacity,
    /// absorbing solver tolerance.
    fn repair(&self, scenario: &Scenario, queues: &[Vec<f64>], flow: &mut FlowVector) {
        for xs in &mut flow.x {
            for v in xs.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        for (k, lg) in scenario.layered.iter().enumerate() {
            for lnode in 0..lg.num_nodes() {
                for l in 1..=lg.max_lifetime {
                    let out: f64 = lg.out_edges[lnode].iter().map(|&e| flow.x[k][lg.fidx(e, l)]).sum();
                    let have = queues[k][lg.qidx(lnode, l)];
                    if out > have {
                        let scale = if out > 0.0 { (have / out).max(0.0) } else { 0.0 };
                        for &e in &lg.out_edges[lnode] {
                            flow.x[k][lg.fidx(e, l)] *= scale;
                        }
                    }
                }
            }
        }
        for (r, members) in scenario.resource_members.iter().enumerate() {
            let cap = scenario.resources[r].capacity;
            let mut load = 0.0;
            for &(k, e) in members {
                let lg = &scenario.layered[k];
                for l in 1..=lg.max_lifetime {
                    load += lg.edges[e].workload * flow.x[k][lg.fidx(e, l)];
                }
            }
            if load > cap {
                let scale = if load > 0.0 { cap / load } else { 0.0 };
                for &(k, e) in members {
                    let lg = &scenario.layered[k];
                    for l in 1..=lg.max_lifetime {
                        flow.x[k][lg.fidx(e, l)] *= scale;
                    }
                }
            }
        }
    }

    /// End-of-frame virtual-capacity update. Positive request-queue growth
    /// on an edge shrinks its resource's virtual capacity, discounted by the
    /// share of the growth explained by upstream starvation; a `kappa` pull
    /// toward the physical capacity keeps exploring upward. Request queues
    /// and the frame counter reset; the flow averages persist.
    fn capacity_iteration(&mut self, scenario: &Scenario) {
        let kf = self.opts.frame_len as f64;
        let nr = scenario.resources.len();
        let mut growth_per_resource = vec![0.0; nr];
        let mut eps_per_resource = vec![0.0; nr];

        // Per-edge growth rates over the frame and their scaled arrival at
        // each node.
        let mut edge_growth: Vec<Vec<f64>> = Vec::with_capacity(scenario.num_commodities());
        for (k, lg) in scenario.layered.iter().enumerate() {
            let mut g = vec![0.0; lg.num_edges()];
            for e in 0..lg.num_edges() {
                for l in 1..=lg.max_lifetime {
                    let idx = lg.fidx(e, l);
                    g[e] += ((self.request[k][idx] - self.request_mark[k][idx]) / kf).max(0.0);
                }
            }
            edge_growth.push(g);
        }
        for (k, lg) in scenario.layered.iter().enumerate() {
            let mut starved = vec![0.0; lg.num_nodes()];
            for (e, edge) in lg.edges.iter().enumerate() {
                starved[edge.head] += edge.scale * edge_growth[k][e];
            }
            let mut outflow_mean = vec![0.0; lg.num_nodes()];
            let mut edge_mean = vec![0.0; lg.num_edges()];
            for (e, edge) in lg.edges.iter().enumerate() {
                let m: f64 = (1..=lg.max_lifetime)
                    .map(|l| self.frame_flow_mean[k][lg.fidx(e, l)])
                    .sum();
                edge_mean[e] = m;
                outflow_mean[edge.tail] += m;
            }
            for (e, edge) in lg.edges.iter().enumerate() {
                let share = if outflow_mean[edge.tail] > 0.0 {
                    edge_mean[e] / outflow_mean[edge.tail]
                } else {
                    0.0
                };
                let eps = edge_growth[k][e] - starved[edge.tail] * share;
                growth_per_resource[edge.resource] += edge_growth[k][e];
                eps_per_resource[edge.resource] += edge.workload * eps;
            }
        }

        let kappa = self.opts.kappa;
        for r in 0..nr {
            let phys = scenario.resources[r].capacity;
            let updated = (1.0 - kappa) * (self.virt_caps[r] - eps_per_resource[r]) + kappa * phys;
            self.virt_caps[r] = updated.clamp(0.0, phys);
        }
        self.frame_log.push(FrameRecord {
            frame: self.frame,
            caps: self.virt_caps.clone(),
            growth: growth_per_resource,
            eps: eps_per_resource,
        });
        for (mark, r) in self.request_mark.iter_mut().zip(&self.request) {
            mark.copy_from_slice(r);
        }
        for m in &mut self.frame_flow_mean {
            m.iter_mut().for_each(|v| *v = 0.0);
        }
        self.frame_samples = 0;
        self.frame += 1;
        self.frame_slot = 0;
    }
}

impl Policy for RcncPolicy {
    fn decide(&mut self, ctx: &SlotCtx, flow: &mut FlowVector) {
        let scenario = ctx.scenario;
        compute_weights(scenario, &self.u, self.opts.v, &mut self.weights);
        max_weight_flow(scenario, &self.weights, &self.virt_caps, &mut self.vflow);
        self.u.update(scenario, &self.vflow, ctx.arrivals);
        self.means.update(&self.vflow, ctx.arrivals);
        self.frame_samples += 1;
        let n1 = self.frame_samples as f64;
        for (k, xs) in self.vflow.x.iter().enumerate() {
            for (m, x) in self.frame_flow_mean[k].iter_mut().zip(xs) {
                *m += (x - *m) / n1;
            }
        }

        flow.clear();
        if self.opts.distributed {
            for p in 0..scenario.graph.num_nodes() {
                let (problem, vars) = assemble_flow_matching_lp(
                    scenario,
                    &self.request,
                    &ctx.q.q,
                    &self.means.arrivals,
                    Some(&self.means.actual),
                    &self.lookahead,
                    Some(p),
                );
                let solution = solve_lp(&problem, &self.tol);
                if solution.status != LpStatus::Optimal {
                    self.last_error = Some(RcncError::SolverFailure(solution.status));
                    continue;
                }
                self.max_lp_residual = self.max_lp_residual.max(solution.max_residual);
                self.extract_plan(&solution, &vars, flow);
            }
        } else {
            let (problem, vars) = assemble_flow_matching_lp(
                scenario,
                &self.request,
                &ctx.q.q,
                &self.means.arrivals,
                None,
                &self.lookahead,
                None,
            );
            let solution = solve_lp(&problem, &self.tol);
            if solution.status == LpStatus::Optimal {
                self.max_lp_residual = self.max_lp_residual.max(solution.max_residual);
                self.extract_plan(&solution, &vars, flow);
            } else {
                self.last_error = Some(RcncError::SolverFailure(solution.status));
            }
        }
        self.repair(scenario, &ctx.q.q, flow);

        for (k, lg) in scenario.layered.iter().enumerate() {
            let n = lg.num_edges() * lg.max_lifetime;
            for i in 0..n {
                self.request[k][i] += self.frame_flow_mean[k][i] - flow.x[k][i];
            }
        }
        self.means.update_actual(flow);

        self.frame_slot += 1;
        if self.frame_slot >= self.opts.frame_len {
            self.capacity_iteration(scenario);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{NetworkGraph, Scenario, ServiceChain};
    use crate::sim::QueueState;
    use approx::assert_relative_eq;

    fn diamond_scenario() -> Scenario {
        let g = NetworkGraph::validate(&crate::graph::tests::diamond_raw()).unwrap();
        let svc = ServiceChain {
            name: "svc".into(), functions: vec![], sources: vec![0],
            destination: 3, max_lifetime: 2, reliability: 0.9,
        };
        Scenario::build(g, vec![svc]).unwrap()
    }

    #[test]
    fn request_queue_updates_are_signed() {
        // R' = R + mean - actual, with no clipping.
        let cases = [(0.0, 3.0, 3.0, 0.0), (0.0, 3.0, 0.0, 3.0), (1.0, 0.0, 2.0, -1.0)];
        for (r0, nu, mu, expect) in cases {
            assert_relative_eq!(r0 + nu - mu, expect);
        }
    }

    #[test]
    fn delay_propagate_examples() {
        // tau = 0: identity on the first column.
        let x = vec![vec![1.0, 2.0, 3.0]];
        assert_eq!(delay_propagate(3, &x, 0), vec![1.0, 2.0, 3.0]);

        // A lifetime-3 unit aged two slots arrives at lifetime 1.
        let x = vec![vec![0.0, 0.0, 1.0], vec![0.0; 3], vec![0.0; 3]];
        assert_eq!(delay_propagate(3, &x, 2), vec![1.0, 0.0, 0.0]);

        // L = 1: any aging annihilates the column.
        let x = vec![vec![5.0], vec![0.0]];
        assert_eq!(delay_propagate(1, &x, 1), vec![0.0]);
    }

    #[test]
    fn lp_dimensions_match_lookahead_layout() {
        // n L |V| availability rows + n |E| capacity rows, n L |E| variables.
        let scenario = diamond_scenario();
        let q = QueueState::new(&scenario);
        let rates = vec![vec![0.0; 8]];
        let request = vec![vec![0.0; 16]];
        let (p, _) = assemble_flow_matching_lp(
            &scenario, &request, &q.q, &rates, None, &[2], None,
        );
        assert_eq!(p.num_vars(), 2 * 2 * 8);
        assert_eq!(p.num_rows(), 2 * 2 * 4 + 2 * 8);
    }

    #[test]
    fn single_slot_lookahead_reduces_to_plain_availability() {
        let scenario = diamond_scenario();
        let lg = &scenario.layered[0];
        let mut q = QueueState::new(&scenario);
        q.q[0][lg.qidx(0, 2)] = 4.0;
        let rates = vec![vec![0.0; 8]];
        let mut request = vec![vec![0.0; 16]];
        let e12 = 0;
        request[0][lg.fidx(e12, 2)] = 1.0;
        let (p, vars) = assemble_flow_matching_lp(
            &scenario, &request, &q.q, &rates, None, &[1], None,
        );
        let sol = solve_lp(&p, &LpTolerances::default());
        assert_eq!(sol.status, LpStatus::Optimal);
        let v = vars.var_of[0][lg.fidx(e12, 2)].unwrap();
        // Availability (4) binds before capacity (5).
        assert_relative_eq!(sol.x[v], 4.0, epsilon = 1e-9);
    }

    #[test]
    fn zero_request_queues_make_zero_flow_optimal() {
        let scenario = diamond_scenario();
        let mut q = QueueState::new(&scenario);
        let lg = &scenario.layered[0];
        q.q[0][lg.qidx(0, 2)] = 6.0;
        let rates = vec![vec![0.0; 8]];
        let request = vec![vec![0.0; 16]];
        let (p, _) = assemble_flow_matching_lp(
            &scenario, &request, &q.q, &rates, None, &[2], None,
        );
        let sol = solve_lp(&p, &LpTolerances::default());
        assert_eq!(sol.status, LpStatus::Optimal);
        assert_relative_eq!(sol.objective, 0.0);
    }

    #[test]
    fn negative_pressure_suppresses_an_edge() {
        let scenario = diamond_scenario();
        let lg = &scenario.layered[0];
        let mut q = QueueState::new(&scenario);
        q.q[0][lg.qidx(0, 2)] = 6.0;
        let rates = vec![vec![0.0; 8]];
        let mut request = vec![vec![0.0; 16]];
        for l in 1..=2 {
            request[0][lg.fidx(0, l)] = -1.0;
        }
        let (p, vars) = assemble_flow_matching_lp(
            &scenario, &request, &q.q, &rates, None, &[2], None,
        );
        let sol = solve_lp(&p, &LpTolerances::default());
        for l in 1..=2 {
            if let Some(v) = vars.var_of[0][lg.fidx(0, l)] {
                assert_relative_eq!(sol.x[v], 0.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn lookahead_availability_sees_future_arrivals() {
        // With n = 2 and empty queues, the tau=1 column may spend estimated
        // arrivals; the tau=0 column may not.
        let scenario = diamond_scenario();
        let lg = &scenario.layered[0];
        let q = QueueState::new(&scenario);
        let mut rates = vec![vec![0.0; 8]];
        rates[0][lg.qidx(0, 2)] = 6.0;
        let mut request = vec![vec![0.0; 16]];
        request[0][lg.fidx(0, 2)] = 1.0;
        let (p, vars) = assemble_flow_matching_lp(
            &scenario, &request, &q.q, &rates, None, &[2], None,
        );
        let sol = solve_lp(&p, &LpTolerances::default());
        let base = vars.var_of[0][lg.fidx(0, 2)].unwrap();
        assert_relative_eq!(sol.x[base], 0.0, epsilon = 1e-9); // tau 0: nothing available
        assert_relative_eq!(sol.x[base + 1], 5.0, epsilon = 1e-9); // tau 1: capacity-capped
    }

    #[test]
    fn capacity_iteration_examples() {
        let scenario = diamond_scenario();
        let mut policy = RcncPolicy::new(
            &scenario,
            RcncOptions { v: 5.0, lookahead: Some(2), frame_len: 10, kappa: 0.1, distributed: false },
        );
        // Stable frame: R ~ 0 keeps capacities at the physical value.
        policy.capacity_iteration(&scenario);
        assert!(policy.virt_caps.iter().all(|&c| (c - 5.0).abs() < 1e-12));

        // Growth of 0.5/slot on edge 0 with no upstream deficit:
        // C' = 0.9 * (5 - 0.5) + 0.5 = 4.55.
        let lg = &scenario.layered[0];
        policy.request[0][lg.fidx(0, 2)] = 0.5 * 10.0;
        policy.capacity_iteration(&scenario);
        assert_relative_eq!(policy.virt_caps[0], 4.55, epsilon = 1e-12);
        // Queues persist across the boundary; the growth mark catches up.
        assert_relative_eq!(policy.request[0][lg.fidx(0, 2)], 5.0);
        assert_eq!(policy.frame(), 2);
        // A stable next frame (no further growth) only feels the kappa pull.
        policy.capacity_iteration(&scenario);
        assert_relative_eq!(policy.virt_caps[0], 0.9 * 4.55 + 0.5, epsilon = 1e-12);
    }

    #[test]
    fn upstream_starvation_discounts_the_correction() {
        // All growth on edge (2,4) explained by starvation from (1,2):
        // eps for (2,4) becomes zero and its capacity only feels kappa pull.
        let scenario = diamond_scenario();
        let lg = &scenario.layered[0];
        let e12 = scenario.graph.edges.iter().position(|&e| e == (0, 1)).unwrap();
        let e24 = scenario.graph.edges.iter().position(|&e| e == (1, 3)).unwrap();
        let mut policy = RcncPolicy::new(
            &scenario,
            RcncOptions { v: 5.0, lookahead: Some(2), frame_len: 10, kappa: 0.1, distributed: false },
        );
        // Mean flow: only edge (2,4) active at node 2, so its share is 1.
        policy.frame_flow_mean[0][lg.fidx(e24, 1)] = 4.0;
        policy.request[0][lg.fidx(e12, 2)] = 3.0; // growth 0.3 upstream
        policy.request[0][lg.fidx(e24, 1)] = 3.0; // growth 0.3, fully explained
        policy.capacity_iteration(&scenario);
        // Edge (1,2): eps = 0.3 -> 0.9*(5-0.3)+0.5 = 4.73.
        assert_relative_eq!(policy.virt_caps[e12], 4.73, epsilon = 1e-12);
        // Edge (2,4): eps = 0.3 - 0.3*1 = 0 -> capacity stays 5.
        assert_relative_eq!(policy.virt_caps[e24], 5.0, epsilon = 1e-12);
    }
}
