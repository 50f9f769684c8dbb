//! Exogenous arrival processes.
//!
//! Arrivals are i.i.d. across slots with a per-(node, lifetime, commodity)
//! distribution. Deterministic traces back the worked examples. Sampling is
//! pure given (seed, entry, slot), so replicas parallelize and identical
//! seeds replay identical streams.

use crate::graph::Scenario;
use crate::rng::{substream, DOMAIN_ARRIVALS};
use rand::Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrafficError {
    #[error("entry {0}: rate must be finite and >= 0")]
    BadRate(usize),
    #[error("entry {0}: {1} requires an integer-valued parameter in integer mode")]
    NotInteger(usize, &'static str),
    #[error("entry {0}: lifetime {1} outside 1..={2}")]
    BadLifetime(usize, usize, usize),
    #[error("entry {0}: stage {1} outside 1..={2}")]
    BadStage(usize, usize, usize),
    #[error("entry {0}: trace is empty")]
    EmptyTrace(usize),
    #[error("entry {0}: non-cyclic trace exhausted at slot {1}")]
    TraceExhausted(usize, u64),
    #[error("arrivals at the destination are not allowed (entry {0})")]
    ArrivalAtDestination(usize),
}

/// Distribution of one arrival entry. All kinds share the declared mean
/// rate: the integer uniform draws from {0..2r}, the binomial from
/// B(2r, 1/2).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ArrivalKind {
    Poisson { rate: f64 },
    UniformInt { rate: f64 },
    Binomial { rate: f64 },
    Constant { rate: f64 },
    Trace {
        values: Vec<f64>,
        #[serde(default = "default_cyclic")]
        cyclic: bool,
    },
}

fn default_cyclic() -> bool {
    true
}

/// One stream of exogenous packets: where they appear, with what remaining
/// lifetime, and how many per slot.
#[derive(Debug, Clone)]
pub struct ArrivalEntry {
    pub commodity: usize,
    /// Physical node of origin.
    pub node: usize,
    /// Service stage the data arrives at (1 = raw input).
    pub stage: usize,
    /// Initial lifetime in slots.
    pub lifetime: usize,
    pub kind: ArrivalKind,
    /// Hard per-slot bound; samples beyond it are redrawn.
    pub a_max: f64,
}

#[derive(Debug, Clone)]
pub struct ArrivalSpec {
    pub entries: Vec<ArrivalEntry>,
    pub integer_mode: bool,
}

/// Practically-sure upper bound for a Poisson sample: the smallest k with
/// P(X > k) < 1e-12, found by walking the pmf.
pub fn poisson_quantile_bound(rate: f64) -> f64 {
    if rate <= 0.0 {
        return 0.0;
    }
    let mut pmf = (-rate).exp();
    let mut cdf = pmf;
    let mut k = 0u64;
    while 1.0 - cdf > 1e-12 && k < 100_000 {
        k += 1;
        pmf *= rate / k as f64;
        cdf += pmf;
    }
    k as f64
}

impl ArrivalKind {
    /// Analytic mean of the distribution.
    pub fn mean(&self) -> f64 {
        match self {
            ArrivalKind::Poisson { rate }
            | ArrivalKind::UniformInt { rate }
            | ArrivalKind::Binomial { rate }
            | ArrivalKind::Constant { rate } => *rate,
            ArrivalKind::Trace { values, .. } => {
                if values.is_empty() {
                    0.0
                } else {
                    values.iter().sum::<f64>() / values.len() as f64
                }
            }
        }
    }

    fn natural_bound(&self) -> f64 {
        match self {
            ArrivalKind::Poisson { rate } => poisson_quantile_bound(*rate),
            ArrivalKind::UniformInt { rate } | ArrivalKind::Binomial { rate } => 2.0 * rate,
            ArrivalKind::Constant { rate } => *rate,
            ArrivalKind::Trace { values, .. } => values.iter().cloned().fold(0.0, f64::max),
        }
    }
}

impl ArrivalSpec {
    pub fn new(entries: Vec<ArrivalEntry>, integer_mode: bool) -> Self {
        ArrivalSpec { entries, integer_mode }
    }

    /// Resolves default bounds and checks entries against the scenario.
    pub fn validate(&mut self, scenario: &Scenario) -> Result<(), TrafficError> {
        for (idx, entry) in self.entries.iter_mut().enumerate() {
            let lg = &scenario.layered[entry.commodity];
            let rate = entry.kind.mean();
            if !rate.is_finite() || rate < 0.0 {
                return Err(TrafficError::BadRate(idx));
            }
            if entry.lifetime < 1 || entry.lifetime > lg.max_lifetime {
                return Err(TrafficError::BadLifetime(idx, entry.lifetime, lg.max_lifetime));
            }
            if entry.stage < 1 || entry.stage > lg.stages {
                return Err(TrafficError::BadStage(idx, entry.stage, lg.stages));
            }
            if lg.lnode(entry.node, entry.stage) == lg.destination {
                return Err(TrafficError::ArrivalAtDestination(idx));
            }
            if self.integer_mode {
                match &entry.kind {
                    ArrivalKind::UniformInt { rate } | ArrivalKind::Binomial { rate } => {
                        if (2.0 * rate).fract() != 0.0 {
                            return Err(TrafficError::NotInteger(idx, "twice the rate"));
                        }
                    }
                    ArrivalKind::Constant { rate } => {
                        if rate.fract() != 0.0 {
                            return Err(TrafficError::NotInteger(idx, "constant rate"));
                        }
                    }
                    ArrivalKind::Trace { values, .. } => {
                        if values.iter().any(|v| v.fract() != 0.0) {
                            return Err(TrafficError::NotInteger(idx, "trace values"));
                        }
                    }
                    ArrivalKind::Poisson { .. } => {}
                }
            }
            if let ArrivalKind::Trace { values, .. } = &entry.kind {
                if values.is_empty() {
                    return Err(TrafficError::EmptyTrace(idx));
                }
            }
            if !entry.a_max.is_finite() || entry.a_max <= 0.0 {
                entry.a_max = entry.kind.natural_bound();
            }
        }
        Ok(())
    }

    /// Draws the slot-`t` arrival for one entry.
    fn sample_entry(&self, idx: usize, seed: u64, t: u64) -> Result<f64, TrafficError> {
        let entry = &self.entries[idx];
        let mut rng = substream(seed, DOMAIN_ARRIVALS, idx as u64, t);
        let value = match &entry.kind {
            ArrivalKind::Poisson { rate } => {
                if *rate == 0.0 {
                    0.0
                } else {
                    let dist = Poisson::new(*rate).expect("validated rate");
                    let mut v: f64 = dist.sample(&mut rng);
                    while v > entry.a_max {
                        v = dist.sample(&mut rng);
                    }
                    v
                }
            }
            ArrivalKind::UniformInt { rate } => {
                if self.integer_mode {
                    let n = (2.0 * rate).round() as u64;
                    rng.random_range(0..=n) as f64
                } else {
                    rng.random_range(0.0..=(2.0 * rate))
                }
            }
            ArrivalKind::Binomial { rate } => {
                let n = (2.0 * rate).round() as u64;
                Binomial::new(n, 0.5).expect("valid binomial").sample(&mut rng) as f64
            }
            ArrivalKind::Constant { rate } => *rate,
            ArrivalKind::Trace { values, cyclic } => {
                let i = t as usize;
                if *cyclic {
                    values[i % values.len()]
                } else if i < values.len() {
                    values[i]
                } else {
                    return Err(TrafficError::TraceExhausted(idx, t));
                }
            }
        };
        Ok(value.min(entry.a_max))
    }

    /// Samples all entries for slot `t` into per-commodity (lnode, lifetime)
    /// buffers, which must be zeroed by the caller.
    pub fn sample_into(
        &self,
        scenario: &Scenario,
        seed: u64,
        t: u64,
        out: &mut [Vec<f64>],
    ) -> Result<(), TrafficError> {
        for idx in 0..self.entries.len() {
            let entry = &self.entries[idx];
            let lg = &scenario.layered[entry.commodity];
            let q = lg.qidx(lg.lnode(entry.node, entry.stage), entry.lifetime);
            out[entry.commodity][q] += self.sample_entry(idx, seed, t)?;
        }
        Ok(())
    }

    /// Analytic mean rate per commodity, shaped like the queue state.
    pub fn rate_matrix(&self, scenario: &Scenario) -> Vec<Vec<f64>> {
        let mut rates: Vec<Vec<f64>> = scenario
            .layered
            .iter()
            .map(|lg| vec![0.0; lg.num_nodes() * lg.max_lifetime])
            .collect();
        for entry in &self.entries {
            let lg = &scenario.layered[entry.commodity];
            let q = lg.qidx(lg.lnode(entry.node, entry.stage), entry.lifetime);
            rates[entry.commodity][q] += entry.kind.mean();
        }
        rates
    }

    /// Total mean arrival rate per commodity.
    pub fn rate_l1(&self, num_commodities: usize) -> Vec<f64> {
        let mut l1 = vec![0.0; num_commodities];
        for entry in &self.entries {
            l1[entry.commodity] += entry.kind.mean();
        }
        l1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{NetworkGraph, RawGraph, RawLink, Scenario, ServiceChain};

    fn two_node_scenario(l: usize) -> Scenario {
        let raw = RawGraph {
            nodes: vec!["s".into(), "d".into()],
            links: vec![RawLink { from: "s".into(), to: "d".into(), capacity: 1.0, cost: 1.0, undirected: false }],
            destination: Some("d".into()),
            compute: vec![],
        };
        let g = NetworkGraph::validate(&raw).unwrap();
        let svc = ServiceChain {
            name: "svc".into(),
            functions: vec![],
            sources: vec![0],
            destination: 1,
            max_lifetime: l,
            reliability: 0.5,
        };
        Scenario::build(g, vec![svc]).unwrap()
    }

    fn spec_with(kind: ArrivalKind, lifetime: usize, integer: bool, scenario: &Scenario) -> ArrivalSpec {
        let mut spec = ArrivalSpec::new(
            vec![ArrivalEntry { commodity: 0, node: 0, stage: 1, lifetime, kind, a_max: f64::NAN }],
            integer,
        );
        spec.validate(scenario).unwrap();
        spec
    }

    #[test]
    fn poisson_sample_mean_close_to_rate() {
        let scenario = two_node_scenario(2);
        let spec = spec_with(ArrivalKind::Poisson { rate: 6.0 }, 2, true, &scenario);
        let n = 100_000u64;
        let mut sum = 0.0;
        for t in 0..n {
            sum += spec.sample_entry(0, 42, t).unwrap();
        }
        let mean = sum / n as f64;
        assert!((mean - 6.0).abs() < 0.1, "sample mean {mean}");
    }

    #[test]
    fn constant_is_exact_every_slot() {
        let scenario = two_node_scenario(1);
        let spec = spec_with(ArrivalKind::Constant { rate: 3.0 }, 1, true, &scenario);
        for t in 0..100 {
            assert_eq!(spec.sample_entry(0, 1, t).unwrap(), 3.0);
        }
    }

    #[test]
    fn cyclic_trace_repeats_and_noncyclic_exhausts() {
        let scenario = two_node_scenario(1);
        let spec = spec_with(
            ArrivalKind::Trace { values: vec![2.0, 0.0], cyclic: true },
            1,
            true,
            &scenario,
        );
        let seq: Vec<f64> = (0..6).map(|t| spec.sample_entry(0, 1, t).unwrap()).collect();
        assert_eq!(seq, vec![2.0, 0.0, 2.0, 0.0, 2.0, 0.0]);

        let finite = spec_with(
            ArrivalKind::Trace { values: vec![1.0], cyclic: false },
            1,
            true,
            &scenario,
        );
        assert!(finite.sample_entry(0, 1, 0).is_ok());
        assert!(matches!(
            finite.sample_entry(0, 1, 1),
            Err(TrafficError::TraceExhausted(0, 1))
        ));
    }

    #[test]
    fn mean_rates() {
        assert_eq!(ArrivalKind::Poisson { rate: 6.0 }.mean(), 6.0);
        assert_eq!(ArrivalKind::UniformInt { rate: 6.0 }.mean(), 6.0); // support {0..12}
        assert_eq!(ArrivalKind::Binomial { rate: 6.0 }.mean(), 6.0);
        let scenario = two_node_scenario(2);
        let mut spec = ArrivalSpec::new(
            vec![
                ArrivalEntry {
                    commodity: 0, node: 0, stage: 1, lifetime: 2,
                    kind: ArrivalKind::Constant { rate: 500.0 }, a_max: f64::NAN,
                },
                ArrivalEntry {
                    commodity: 0, node: 0, stage: 1, lifetime: 1,
                    kind: ArrivalKind::Constant { rate: 500.0 }, a_max: f64::NAN,
                },
            ],
            false,
        );
        spec.validate(&scenario).unwrap();
        assert_eq!(spec.rate_l1(1), vec![1000.0]);
    }

    #[test]
    fn lifetime_out_of_range_rejected() {
        let scenario = two_node_scenario(2);
        let mut spec = ArrivalSpec::new(
            vec![ArrivalEntry {
                commodity: 0, node: 0, stage: 1, lifetime: 3,
                kind: ArrivalKind::Constant { rate: 1.0 }, a_max: f64::NAN,
            }],
            true,
        );
        assert!(matches!(
            spec.validate(&scenario),
            Err(TrafficError::BadLifetime(0, 3, 2))
        ));
    }

    #[test]
    fn poisson_bound_is_generous_but_finite() {
        let b = poisson_quantile_bound(6.0);
        assert!(b >= 20.0 && b < 100.0, "bound {b}");
    }
}
