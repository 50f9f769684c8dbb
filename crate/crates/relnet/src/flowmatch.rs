//! Randomized flow-matching policy for average-capacity networks.
//!
//! Each slot the virtual controller assigns a max-weight virtual flow; the
//! running averages of that flow and of the arrivals define, per (node,
//! lifetime), a routing distribution over outgoing edges plus an idle
//! probability. Every queued packet then draws its next hop from that
//! distribution, which drives the time-average actual flow toward the
//! virtual assignment while never touching more packets than the queue
//! holds.
//!
//! Early on the averages are noisy and can transiently violate lifetime
//! conservation; such updates are skipped and the previous distribution is
//! kept (it stays marked stale until a valid update lands). For the first
//! few slots all distributions are idle so the averages can leave zero.

use crate::graph::Scenario;
use crate::rng::{substream, DOMAIN_POLICY};
use crate::sim::{FlowVector, Policy, SlotCtx};
use crate::vnet::{compute_weights, max_weight_flow, RunningMeans, VirtualQueues, Weights};
use rand_distr::{Binomial, Distribution};

const WARMUP_SLOTS: u64 = 10;
const DENOM_EPS: f64 = 1e-12;

/// Per-(node, lifetime) routing distribution: one probability per outgoing
/// edge, in `out_edges` order, plus the idle remainder.
#[derive(Debug, Clone)]
pub struct RoutingPdf {
    pub alpha: Vec<f64>,
    pub idle: f64,
    /// True while the last update was skipped and an older pdf is in use.
    pub stale: bool,
}

impl RoutingPdf {
    fn idle_default(degree: usize) -> Self {
        RoutingPdf { alpha: vec![0.0; degree], idle: 1.0, stale: false }
    }
}

/// Outcome of evaluating the routing distribution at one (node, lifetime).
#[derive(Debug, Clone)]
pub enum PdfUpdate {
    Valid(RoutingPdf),
    /// The averaged outflow exceeds the denominator (lifetime conservation
    /// violated by averaging noise). Carries the normalized distribution
    /// realizing the same proportions with zero idle.
    Overflow(RoutingPdf),
    /// Denominator not positive; nothing can be said.
    Undefined,
}

/// Evaluates the routing distribution for (commodity, lnode, lifetime) from
/// flow averages `flow` and arrival averages `rates`.
pub fn routing_pdf(
    scenario: &Scenario,
    flow: &[Vec<f64>],
    rates: &[Vec<f64>],
    commodity: usize,
    lnode: usize,
    lifetime: usize,
) -> PdfUpdate {
    let lg = &scenario.layered[commodity];
    let l_max = lg.max_lifetime;
    // Scaled inflow of lifetime >= l+1 plus arrivals of lifetime >= l,
    // minus outflow of lifetime >= l+1: the average amount that reaches
    // (lnode, lifetime) and is still available there.
    let mut denom = 0.0;
    for l in lifetime + 1..=l_max {
        for &e in &lg.in_edges[lnode] {
            denom += lg.edges[e].scale * flow[commodity][lg.fidx(e, l)];
        }
        for &e in &lg.out_edges[lnode] {
            denom -= flow[commodity][lg.fidx(e, l)];
        }
    }
    for l in lifetime..=l_max {
        denom += rates[commodity][lg.qidx(lnode, l)];
    }
    if denom <= DENOM_EPS {
        return PdfUpdate::Undefined;
    }
    let outflow_here: f64 = lg.out_edges[lnode]
        .iter()
        .map(|&e| flow[commodity][lg.fidx(e, lifetime)])
        .sum();
    if outflow_here > denom * (1.0 + 1e-12) {
        let alpha: Vec<f64> = lg.out_edges[lnode]
            .iter()
            .map(|&e| flow[commodity][lg.fidx(e, lifetime)] / outflow_here)
            .collect();
        return PdfUpdate::Overflow(RoutingPdf { alpha, idle: 0.0, stale: true });
    }
    let alpha: Vec<f64> = lg.out_edges[lnode]
        .iter()
        .map(|&e| flow[commodity][lg.fidx(e, lifetime)] / denom)
        .collect();
    let total: f64 = alpha.iter().sum();
    PdfUpdate::Valid(RoutingPdf { alpha, idle: (1.0 - total).max(0.0), stale: false })
}

/// Routing tables for every (commodity, non-destination lnode, lifetime).
#[derive(Debug, Clone)]
pub struct RoutingTables {
    pdfs: Vec<Vec<RoutingPdf>>,
    /// Whether a valid (non-overflow) update ever landed on this entry.
    ever_valid: Vec<Vec<bool>>,
}

impl RoutingTables {
    pub fn all_idle(scenario: &Scenario) -> Self {
        RoutingTables {
            pdfs: scenario
                .layered
                .iter()
                .map(|lg| {
                    (0..lg.num_nodes() * lg.max_lifetime)
                        .map(|slot| RoutingPdf::idle_default(lg.out_edges[slot / lg.max_lifetime].len()))
                        .collect()
                })
                .collect(),
            ever_valid: scenario
                .layered
                .iter()
                .map(|lg| vec![false; lg.num_nodes() * lg.max_lifetime])
                .collect(),
        }
    }

    /// Builds fixed tables from a flow assignment and arrival rates.
    pub fn from_flow(scenario: &Scenario, flow: &[Vec<f64>], rates: &[Vec<f64>]) -> Self {
        let mut tables = RoutingTables::all_idle(scenario);
        tables.refresh(scenario, flow, rates);
        tables
    }

    /// Updates every entry. A conservation overflow keeps the previous pdf
    /// (marked stale) when a valid one exists; before any valid update has
    /// landed, relay entries whose conservation is tight would otherwise
    /// stay idle forever, so the normalized proportions are installed
    /// instead.
    fn refresh(&mut self, scenario: &Scenario, flow: &[Vec<f64>], rates: &[Vec<f64>]) {
        for (k, lg) in scenario.layered.iter().enumerate() {
            for lnode in 0..lg.num_nodes() {
                if lnode == lg.destination || lg.out_edges[lnode].is_empty() {
                    continue;
                }
                for l in 1..=lg.max_lifetime {
                    let slot = lg.qidx(lnode, l);
                    match routing_pdf(scenario, flow, rates, k, lnode, l) {
                        PdfUpdate::Valid(pdf) => {
                            self.pdfs[k][slot] = pdf;
                            self.ever_valid[k][slot] = true;
                        }
                        PdfUpdate::Overflow(normalized) => {
                            if self.ever_valid[k][slot] {
                                self.pdfs[k][slot].stale = true;
                            } else {
                                self.pdfs[k][slot] = normalized;
                            }
                        }
                        PdfUpdate::Undefined => self.pdfs[k][slot].stale = true,
                    }
                }
            }
        }
    }

    pub fn pdf(&self, commodity: usize, slot: usize) -> &RoutingPdf {
        &self.pdfs[commodity][slot]
    }

    /// Samples per-packet decisions for every queue slot: a multinomial
    /// over (outgoing edges, idle) with the queue content as the count.
    pub fn sample_decisions(
        &self,
        scenario: &Scenario,
        q: &[Vec<f64>],
        seed: u64,
        t: u64,
        integer_mode: bool,
        flow: &mut FlowVector,
    ) {
        flow.clear();
        for (k, lg) in scenario.layered.iter().enumerate() {
            for lnode in 0..lg.num_nodes() {
                if lnode == lg.destination || lg.out_edges[lnode].is_empty() {
                    continue;
                }
                let mut rng =
                    substream(seed, DOMAIN_POLICY, ((k as u64) << 32) | lnode as u64, t);
                for l in 1..=lg.max_lifetime {
                    let slot = lg.qidx(lnode, l);
                    let queue = q[k][slot];
                    if queue <= 0.0 {
                        continue;
                    }
                    let pdf = &self.pdfs[k][slot];
                    if pdf.idle >= 1.0 {
                        continue;
                    }
                    if integer_mode {
                        let mut remaining = queue as u64;
                        debug_assert_eq!(queue.fract(), 0.0);
                        let mut mass_left = 1.0f64;
                        for (s, &e) in lg.out_edges[lnode].iter().enumerate() {
                            if remaining == 0 || mass_left <= 0.0 {
                                break;
                            }
                            let p = (pdf.alpha[s] / mass_left).clamp(0.0, 1.0);
                            let draw = if p >= 1.0 {
                                remaining
                            } else if p <= 0.0 {
                                0
                            } else {
                                Binomial::new(remaining, p).expect("valid p").sample(&mut rng)
                            };
                            if draw > 0 {
                                flow.x[k][lg.fidx(e, l)] = draw as f64;
                                remaining -= draw;
                            }
                            mass_left -= pdf.alpha[s];
                        }
                    } else {
                        for (s, &e) in lg.out_edges[lnode].iter().enumerate() {
                            let v = queue * pdf.alpha[s];
                            if v > 0.0 {
                                flow.x[k][lg.fidx(e, l)] = v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// The average-constrained controller: max-weight virtual flow on the
/// physical capacities, empirical averaging, multinomial packet steering.
pub struct FlowMatchingPolicy {
    pub v: f64,
    integer_mode: bool,
    caps: Vec<f64>,
    pub u: VirtualQueues,
    pub means: RunningMeans,
    pub tables: RoutingTables,
    weights: Weights,
    pub vflow: FlowVector,
    /// Mean virtual cost, for diagnostics.
    virtual_cost_sum: f64,
}

impl FlowMatchingPolicy {
    pub fn new(scenario: &Scenario, v: f64, integer_mode: bool) -> Self {
        FlowMatchingPolicy {
            v,
            integer_mode,
            caps: scenario.resources.iter().map(|r| r.capacity).collect(),
            u: VirtualQueues::new(scenario),
            means: RunningMeans::new(scenario),
            tables: RoutingTables::all_idle(scenario),
            weights: Weights::new(scenario),
            vflow: FlowVector::zeros(scenario),
            virtual_cost_sum: 0.0,
        }
    }

    pub fn mean_virtual_cost(&self) -> f64 {
        if self.means.count == 0 {
            0.0
        } else {
            self.virtual_cost_sum / self.means.count as f64
        }
    }
}

impl Policy for FlowMatchingPolicy {
    fn decide(&mut self, ctx: &SlotCtx, flow: &mut FlowVector) {
        let scenario = ctx.scenario;
        compute_weights(scenario, &self.u, self.v, &mut self.weights);
        max_weight_flow(scenario, &self.weights, &self.caps, &mut self.vflow);
        self.u.update(scenario, &self.vflow, ctx.arrivals);
        self.means.update(&self.vflow, ctx.arrivals);
        for (k, lg) in scenario.layered.iter().enumerate() {
            for (e, edge) in lg.edges.iter().enumerate() {
                for l in 1..=lg.max_lifetime {
                    self.virtual_cost_sum +=
                        edge.cost * edge.workload * self.vflow.x[k][lg.fidx(e, l)];
                }
            }
        }
        if ctx.t >= WARMUP_SLOTS {
            self.tables
                .refresh(scenario, &self.means.flow, &self.means.arrivals);
        }
        self.tables
            .sample_decisions(scenario, &ctx.q.q, ctx.seed, ctx.t, self.integer_mode, flow);
    }
}

/// A fixed randomized policy: routing tables are built once from a flow
/// assignment and never updated.
pub struct FrozenPdfPolicy {
    pub tables: RoutingTables,
    integer_mode: bool,
}

impl FrozenPdfPolicy {
    pub fn new(tables: RoutingTables, integer_mode: bool) -> Self {
        FrozenPdfPolicy { tables, integer_mode }
    }
}

impl Policy for FrozenPdfPolicy {
    fn decide(&mut self, ctx: &SlotCtx, flow: &mut FlowVector) {
        self.tables.sample_decisions(
            ctx.scenario,
            &ctx.q.q,
            ctx.seed,
            ctx.t,
            self.integer_mode,
            flow,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{NetworkGraph, Scenario, ServiceChain};
    use approx::assert_relative_eq;

    fn diamond_scenario() -> Scenario {
        let g = NetworkGraph::validate(&crate::graph::tests::diamond_raw()).unwrap();
        let svc = ServiceChain {
            name: "svc".into(), functions: vec![], sources: vec![0],
            destination: 3, max_lifetime: 2, reliability: 0.9,
        };
        Scenario::build(g, vec![svc]).unwrap()
    }

    /// Flow averages matching the converged cheap/expensive route split.
    fn converged_means(scenario: &Scenario) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let lg = &scenario.layered[0];
        let mut flow = vec![vec![0.0; lg.num_edges() * lg.max_lifetime]];
        let mut rates = vec![vec![0.0; lg.num_nodes() * lg.max_lifetime]];
        let e12 = scenario.graph.edges.iter().position(|&e| e == (0, 1)).unwrap();
        let e13 = scenario.graph.edges.iter().position(|&e| e == (0, 2)).unwrap();
        let e24 = scenario.graph.edges.iter().position(|&e| e == (1, 3)).unwrap();
        let e34 = scenario.graph.edges.iter().position(|&e| e == (2, 3)).unwrap();
        flow[0][lg.fidx(e12, 2)] = 5.0;
        flow[0][lg.fidx(e13, 2)] = 0.4;
        flow[0][lg.fidx(e24, 1)] = 5.0;
        flow[0][lg.fidx(e34, 1)] = 0.4;
        rates[0][lg.qidx(0, 2)] = 6.0;
        (flow, rates)
    }

    #[test]
    fn converged_pdf_matches_hand_computation() {
        let scenario = diamond_scenario();
        let (flow, rates) = converged_means(&scenario);
        let PdfUpdate::Valid(pdf) = routing_pdf(&scenario, &flow, &rates, 0, 0, 2) else {
            panic!("expected valid pdf");
        };
        // Denominator: no inflow above lifetime 2, arrivals 6, so 6.
        // alpha(1->2) = 5/6, alpha(1->3) = 0.4/6 = 1/15, idle = 1/10.
        let lg = &scenario.layered[0];
        let out = &lg.out_edges[0];
        let s12 = out.iter().position(|&e| scenario.graph.edges[e] == (0, 1)).unwrap();
        let s13 = out.iter().position(|&e| scenario.graph.edges[e] == (0, 2)).unwrap();
        assert_relative_eq!(pdf.alpha[s12], 5.0 / 6.0, epsilon = 1e-12);
        assert_relative_eq!(pdf.alpha[s13], 1.0 / 15.0, epsilon = 1e-12);
        assert_relative_eq!(pdf.idle, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn zero_flow_gives_idle_pdf() {
        let scenario = diamond_scenario();
        let lg = &scenario.layered[0];
        let flow = vec![vec![0.0; lg.num_edges() * lg.max_lifetime]];
        let mut rates = vec![vec![0.0; lg.num_nodes() * lg.max_lifetime]];
        rates[0][lg.qidx(0, 2)] = 6.0;
        let PdfUpdate::Valid(pdf) = routing_pdf(&scenario, &flow, &rates, 0, 0, 2) else {
            panic!("expected valid pdf");
        };
        assert!(pdf.alpha.iter().all(|&a| a == 0.0));
        assert_relative_eq!(pdf.idle, 1.0);
    }

    #[test]
    fn noisy_averages_skip_and_keep_previous_pdf() {
        let scenario = diamond_scenario();
        let (mut flow, rates) = converged_means(&scenario);
        let lg = &scenario.layered[0];
        let mut tables = RoutingTables::from_flow(&scenario, &flow, &rates);
        let before = tables.pdf(0, lg.qidx(0, 2)).alpha.clone();
        // Inflate outflow beyond the denominator: update must be skipped.
        let e12 = scenario.graph.edges.iter().position(|&e| e == (0, 1)).unwrap();
        flow[0][lg.fidx(e12, 2)] = 9.0;
        tables.refresh(&scenario, &flow, &rates);
        let after = tables.pdf(0, lg.qidx(0, 2));
        assert_eq!(after.alpha, before);
        assert!(after.stale);

        // Zero denominator skips as well.
        let zero_rates = vec![vec![0.0; lg.num_nodes() * lg.max_lifetime]];
        assert!(matches!(
            routing_pdf(&scenario, &flow, &zero_rates, 0, 0, 2),
            PdfUpdate::Undefined
        ));
    }

    #[test]
    fn empty_queue_and_idle_pdf_send_nothing() {
        let scenario = diamond_scenario();
        let lg = &scenario.layered[0];
        let tables = RoutingTables::all_idle(&scenario);
        let mut q = vec![vec![0.0; lg.num_nodes() * lg.max_lifetime]];
        q[0][lg.qidx(0, 2)] = 50.0;
        let mut flow = FlowVector::zeros(&scenario);
        tables.sample_decisions(&scenario, &q, 1, 0, true, &mut flow);
        assert!(flow.x[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn multinomial_sample_means_match_probabilities() {
        let scenario = diamond_scenario();
        let lg = &scenario.layered[0];
        let (fm, rates) = converged_means(&scenario);
        let tables = RoutingTables::from_flow(&scenario, &fm, &rates);
        let mut q = vec![vec![0.0; lg.num_nodes() * lg.max_lifetime]];
        q[0][lg.qidx(0, 2)] = 6000.0;
        let e12 = scenario.graph.edges.iter().position(|&e| e == (0, 1)).unwrap();
        let e13 = scenario.graph.edges.iter().position(|&e| e == (0, 2)).unwrap();
        let mut flow = FlowVector::zeros(&scenario);
        let reps = 400;
        let (mut sum12, mut sum13, mut total) = (0.0, 0.0, 0.0);
        for t in 0..reps {
            tables.sample_decisions(&scenario, &q, 7, t, true, &mut flow);
            sum12 += flow.x[0][lg.fidx(e12, 2)];
            sum13 += flow.x[0][lg.fidx(e13, 2)];
            total += flow.x[0].iter().sum::<f64>();
        }
        let n = reps as f64;
        assert!((sum12 / n - 5000.0).abs() < 50.0, "mean {}", sum12 / n);
        assert!((sum13 / n - 400.0).abs() < 40.0, "mean {}", sum13 / n);
        // Availability holds with room for idling.
        assert!(total / n <= 6000.0);
    }
}
