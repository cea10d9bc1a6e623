//! Trajectories: one scheduled vertex resamples its strategy per step.

use std::collections::VecDeque;
use std::io::Write;

use rand::Rng;

use crate::error::{invalid, Result};
use crate::graph::WeightedGraph;
use crate::model::{
    node_payoff, potential, potential_delta, log_linear, Configuration, ModelParams, PayoffMatrix, Strategy,
};
use crate::scheduler::{Scheduler, SchedulerSpec};
use crate::rng::SimRng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRecord {
    /// 1-based index of the step.
    pub step: u64,
    pub vertex: usize,
    pub pre: Strategy,
    pub post: Strategy,
    /// A-players after the step.
    pub count_a: usize,
    pub potential: Option<f64>,
}

pub trait TraceSink {
    fn record(&mut self, rec: &TraceRecord);

    /// Sinks that return true get the running potential filled in.
    fn wants_potential(&self) -> bool {
        false
    }
}

/// Drops every record.
pub struct Discard;

impl TraceSink for Discard {
    fn record(&mut self, _: &TraceRecord) {}
}

impl TraceSink for Vec<TraceRecord> {
    fn record(&mut self, rec: &TraceRecord) {
        self.push(*rec);
    }

    fn wants_potential(&self) -> bool {
        true
    }
}

/// Keeps the most recent `capacity` records.
pub struct RingBuffer {
    capacity: usize,
    buf: VecDeque<TraceRecord>,
}

impl RingBuffer {
    pub fn new(capacity: usize) -> Self {
        RingBuffer {
            capacity,
            buf: VecDeque::with_capacity(capacity),
        }
    }

    pub fn records(&self) -> impl Iterator<Item = &TraceRecord> {
        self.buf.iter()
    }
}

impl TraceSink for RingBuffer {
    fn record(&mut self, rec: &TraceRecord) {
        if self.capacity == 0 {
            return;
        }
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(*rec);
    }
}

pub const TRACE_CSV_HEADER: &str = "step,vertex,pre,post,countA,potential";

/// Streams records as CSV rows (`step,vertex,pre,post,countA,potential`).
/// The first write error is kept and later records are dropped.
pub struct CsvTrace<W: Write> {
    out: W,
    error: Option<std::io::Error>,
}

impl<W: Write> CsvTrace<W> {
    pub fn new(mut out: W) -> Self {
        let error = writeln!(out, "{TRACE_CSV_HEADER}").err();
        CsvTrace { out, error }
    }

    pub fn finish(mut self) -> std::io::Result<W> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

impl<W: Write> TraceSink for CsvTrace<W> {
    fn record(&mut self, r: &TraceRecord) {
        if self.error.is_some() {
            return;
        }
        let pot = r.potential.map(|p| format!("{p}")).unwrap_or_default();
        self.error = writeln!(
            self.out,
            "{},{},{},{},{},{}",
            r.step, r.vertex, r.pre, r.post, r.count_a, pot
        )
        .err();
    }

    fn wants_potential(&self) -> bool {
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StoppingRule {
    Steps(u64),
    /// Stop once at least `(1 - p) n` vertices play A.
    FractionA { p: f64 },
    /// Stop at all-A or all-B.
    Absorption,
}

impl StoppingRule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            StoppingRule::FractionA { p } if !(0.0..=1.0).contains(&p) => {
                Err(invalid(format!("fractionA p must lie in [0, 1], got {p}")))
            }
            _ => Ok(()),
        }
    }

    /// A-count at which `FractionA { p }` fires on `n` vertices.
    pub fn target_count(p: f64, n: usize) -> usize {
        ((1.0 - p) * n as f64 - 1e-9).ceil().max(0.0) as usize
    }

    fn fires(&self, steps: u64, count_a: usize, n: usize) -> bool {
        match *self {
            StoppingRule::Steps(t) => steps >= t,
            StoppingRule::FractionA { p } => count_a >= Self::target_count(p, n),
            StoppingRule::Absorption => count_a == 0 || count_a == n,
        }
    }
}

impl std::str::FromStr for StoppingRule {
    type Err = crate::Error;

    /// `steps:T`, `fractionA:p`, or `absorption`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "absorption" {
            return Ok(StoppingRule::Absorption);
        }
        let (kind, val) = s
            .split_once(':')
            .ok_or_else(|| invalid(format!("stop rule {s:?}: expected steps:T, fractionA:p or absorption")))?;
        let rule = match kind.trim() {
            "steps" => StoppingRule::Steps(
                val.trim()
                    .parse()
                    .map_err(|_| invalid(format!("stop rule {s:?}: bad step count")))?,
            ),
            "fractionA" => StoppingRule::FractionA {
                p: val
                    .trim()
                    .parse()
                    .map_err(|_| invalid(format!("stop rule {s:?}: bad p")))?,
            },
            other => return Err(invalid(format!("unknown stop rule {other:?}"))),
        };
        rule.validate()?;
        Ok(rule)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub config: Configuration,
    pub steps: u64,
    /// The hard step budget ran out before the stopping rule fired.
    pub truncated: bool,
}

/// Mutable state of one trajectory.
pub struct Simulator<'a> {
    graph: &'a WeightedGraph,
    payoff: &'a PayoffMatrix,
    params: ModelParams,
    scheduler: Scheduler,
    config: Configuration,
    count_a: usize,
    potential: f64,
    /// Vertices outside the set always choose B.
    allowed: Option<Vec<bool>>,
    steps: u64,
}

impl<'a> Simulator<'a> {
    pub fn new(
        graph: &'a WeightedGraph,
        payoff: &'a PayoffMatrix,
        params: &ModelParams,
        spec: &SchedulerSpec,
        initial: Configuration,
    ) -> Result<Self> {
        if initial.len() != graph.n() {
            return Err(invalid(format!(
                "configuration has {} vertices, graph has {}",
                initial.len(),
                graph.n()
            )));
        }
        Ok(Simulator {
            scheduler: spec.start(graph.n())?,
            count_a: initial.count_a(),
            potential: potential(graph, &initial, payoff),
            config: initial,
            graph,
            payoff,
            params: *params,
            allowed: None,
            steps: 0,
        })
    }

    /// Makes every vertex outside `members` choose B whenever scheduled.
    pub fn restrict_to(mut self, members: &[usize]) -> Result<Self> {
        if members.is_empty() {
            return Err(invalid("restricted vertex set must be nonempty"));
        }
        let mut allowed = vec![false; self.graph.n()];
        for &v in members {
            if v >= allowed.len() {
                return Err(invalid(format!("restricted set has vertex {v} outside the graph")));
            }
            allowed[v] = true;
        }
        self.allowed = Some(allowed);
        Ok(self)
    }

    pub fn config(&self) -> &Configuration {
        &self.config
    }

    pub fn count_a(&self) -> usize {
        self.count_a
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.scheduler
    }

    /// Running potential, updated incrementally.
    pub fn potential(&self) -> f64 {
        self.potential
    }

    pub fn step(&mut self, rng: &mut SimRng, sink: &mut dyn TraceSink) -> TraceRecord {
        let v = self.scheduler.next_vertex(&self.config, rng);
        let pre = self.config.get(v);
        let restricted = self.allowed.as_ref().is_some_and(|a| !a[v]);
        let post = if restricted {
            Strategy::B
        } else {
            let nu_a = node_payoff(self.graph, &self.config, v, Strategy::A, self.payoff);
            let nu_b = node_payoff(self.graph, &self.config, v, Strategy::B, self.payoff);
            let probs = log_linear(nu_a, nu_b, self.params.beta, pre);
            if rng.gen::<f64>() < probs.a {
                Strategy::A
            } else {
                Strategy::B
            }
        };
        if post != pre {
            self.potential += potential_delta(self.graph, &self.config, v, post, self.payoff);
            self.config.set(v, post);
            match post {
                Strategy::A => self.count_a += 1,
                Strategy::B => self.count_a -= 1,
            }
        }
        self.steps += 1;
        let rec = TraceRecord {
            step: self.steps,
            vertex: v,
            pre,
            post,
            count_a: self.count_a,
            potential: sink.wants_potential().then_some(self.potential),
        };
        sink.record(&rec);
        rec
    }

    /// Steps until `stop` fires or `budget` more steps have been taken.
    pub fn run_until(&mut self, stop: StoppingRule, budget: u64, rng: &mut SimRng, sink: &mut dyn TraceSink) -> RunOutcome {
        let n = self.graph.n();
        let start = self.steps;
        let mut truncated = false;
        while !stop.fires(self.steps - start, self.count_a, n) {
            if self.steps - start >= budget {
                truncated = true;
                break;
            }
            self.step(rng, sink);
        }
        RunOutcome {
            config: self.config.clone(),
            steps: self.steps - start,
            truncated,
        }
    }
}

/// Single step from `config`; convenience for one-off use and tests.
pub fn step(
    graph: &WeightedGraph,
    config: &Configuration,
    spec: &SchedulerSpec,
    params: &ModelParams,
    payoff: &PayoffMatrix,
    rng: &mut SimRng,
) -> Result<(Configuration, TraceRecord)> {
    let mut sim = Simulator::new(graph, payoff, params, spec, config.clone())?;
    let rec = sim.step(rng, &mut Discard);
    Ok((sim.config, rec))
}

#[allow(clippy::too_many_arguments)]
pub fn run(
    graph: &WeightedGraph,
    initial: Configuration,
    spec: &SchedulerSpec,
    params: &ModelParams,
    payoff: &PayoffMatrix,
    stop: StoppingRule,
    budget: u64,
    rng: &mut SimRng,
    sink: &mut dyn TraceSink,
) -> Result<RunOutcome> {
    stop.validate()?;
    let mut sim = Simulator::new(graph, payoff, params, spec, initial)?;
    Ok(sim.run_until(stop, budget, rng, sink))
}

/// Like [`run`], but scheduled vertices outside `members` choose B.
#[allow(clippy::too_many_arguments)]
pub fn run_restricted(
    graph: &WeightedGraph,
    members: &[usize],
    initial: Configuration,
    spec: &SchedulerSpec,
    params: &ModelParams,
    payoff: &PayoffMatrix,
    stop: StoppingRule,
    budget: u64,
    rng: &mut SimRng,
    sink: &mut dyn TraceSink,
) -> Result<RunOutcome> {
    stop.validate()?;
    let mut sim = Simulator::new(graph, payoff, params, spec, initial)?.restrict_to(members)?;
    Ok(sim.run_until(stop, budget, rng, sink))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Family;
    use crate::model::Beta;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use crate::model::Strategy;

    fn p3200() -> PayoffMatrix {
        PayoffMatrix::new(3.0, 2.0, 0.0, 0.0).unwrap()
    }

    #[test]
    fn best_response_step() {
        let k2 = Family::Complete(2).build().unwrap();
        // schedule vertex 1 only
        let spec = SchedulerSpec::NonAdaptivePeriodic {
            distributions: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            order: vec![0, 1],
        };
        let params = ModelParams::new(Beta::Infinite).unwrap();
        let x: Configuration = "10".parse().unwrap();
        let (y, rec) = step(&k2, &x, &spec, &params, &p3200(), &mut rng_from_seed(0)).unwrap();
        assert_eq!(rec.vertex, 1);
        assert_eq!(y.to_bitstring(), "11");
    }

    #[test]
    fn beta_zero_is_a_fair_coin() {
        let k3 = Family::Complete(3).build().unwrap();
        let params = ModelParams::finite(0.0).unwrap();
        let x: Configuration = "000".parse().unwrap();
        let mut rng = rng_from_seed(1);
        let trials = 40_000;
        let a = (0..trials)
            .filter(|_| step(&k3, &x, &SchedulerSpec::Random, &params, &p3200(), &mut rng).unwrap().1.post == Strategy::A)
            .count();
        assert!((a as f64 / trials as f64 - 0.5).abs() < 0.0075 * 2.0);
    }

    #[test]
    fn update_frequency_matches_formula() {
        let k2 = Family::Complete(2).build().unwrap();
        let spec = SchedulerSpec::round_robin(2);
        let params = ModelParams::finite(1.0).unwrap();
        let x: Configuration = "00".parse().unwrap();
        let expected = 1.0 / (1.0 + 2f64.exp());
        assert!((expected - 0.1192).abs() < 1e-4);
        let mut rng = rng_from_seed(2);
        let trials = 100_000;
        let hits = (0..trials)
            .filter(|_| step(&k2, &x, &spec, &params, &p3200(), &mut rng).unwrap().1.post == Strategy::A)
            .count() as f64;
        let sigma = (expected * (1.0 - expected) / trials as f64).sqrt();
        assert!((hits / trials as f64 - expected).abs() < 3.0 * sigma);
    }

    #[test]
    fn stopping_rules() {
        let g = Family::Cycle(10).build().unwrap();
        let params = ModelParams::finite(1.0).unwrap();
        let mut rng = rng_from_seed(3);
        let out = run(&g, Configuration::all_a(10), &SchedulerSpec::Random, &params, &p3200(),
            StoppingRule::FractionA { p: 0.2 }, 1000, &mut rng, &mut Discard).unwrap();
        assert_eq!((out.steps, out.truncated), (0, false));

        let mut trace = Vec::new();
        let out = run(&g, Configuration::all_b(10), &SchedulerSpec::Random, &params, &p3200(),
            StoppingRule::Steps(100), 1000, &mut rng, &mut trace).unwrap();
        assert_eq!(out.steps, 100);
        assert_eq!(trace.len(), 100);

        let out = run(&g, Configuration::all_b(10), &SchedulerSpec::Random, &ModelParams::new(Beta::Infinite).unwrap(),
            &p3200(), StoppingRule::FractionA { p: 0.5 }, 500, &mut rng, &mut Discard).unwrap();
        assert!(out.truncated);
        assert_eq!(out.steps, 500);

        assert_eq!(StoppingRule::target_count(0.1, 16), 15);
        assert_eq!(StoppingRule::target_count(0.4, 2), 2);
        assert_eq!(StoppingRule::target_count(0.5, 10), 5);
        assert_eq!("steps:100".parse::<StoppingRule>().unwrap(), StoppingRule::Steps(100));
        assert_eq!("fractionA:0.1".parse::<StoppingRule>().unwrap(), StoppingRule::FractionA { p: 0.1 });
        assert!("fractionA:1.5".parse::<StoppingRule>().is_err());
        assert!("forever".parse::<StoppingRule>().is_err());
    }

    #[test]
    fn cycle_reaches_fraction_a() {
        let g = Family::Cycle(16).build().unwrap();
        let params = ModelParams::finite(5.0).unwrap();
        let payoff = PayoffMatrix::new(3.0, 0.5, 0.0, 0.0).unwrap();
        let mut steps: Vec<u64> = (0..200)
            .map(|i| {
                let mut rng = crate::rng::replica_rng(4, i);
                let out = run(&g, Configuration::all_b(16), &SchedulerSpec::Random, &params, &payoff,
                    StoppingRule::FractionA { p: 0.1 }, 10_000_000, &mut rng, &mut Discard).unwrap();
                assert!(!out.truncated);
                out.steps
            })
            .collect();
        steps.sort_unstable();
        assert!(steps[100] > 0 && steps[100] < 10_000_000);
    }

    #[test]
    fn fixed_points_at_infinite_beta() {
        let g = Family::Grid(3, 3).build().unwrap();
        let params = ModelParams::new(Beta::Infinite).unwrap();
        for start in [Configuration::all_a(9), Configuration::all_b(9)] {
            let out = run(&g, start.clone(), &SchedulerSpec::Random, &params, &p3200(),
                StoppingRule::Steps(2000), 2000, &mut rng_from_seed(5), &mut Discard).unwrap();
            assert_eq!(out.config, start);
        }
    }

    #[test]
    fn restricted_with_full_set_replays_plain_run() {
        let g = Family::Cycle(8).build().unwrap();
        let params = ModelParams::finite(1.5).unwrap();
        let all: Vec<usize> = (0..8).collect();
        let mut a = Vec::new();
        let mut b = Vec::new();
        run(&g, Configuration::all_b(8), &SchedulerSpec::Random, &params, &p3200(),
            StoppingRule::Steps(5000), 5000, &mut rng_from_seed(6), &mut a).unwrap();
        run_restricted(&g, &all, Configuration::all_b(8), &SchedulerSpec::Random, &params, &p3200(),
            StoppingRule::Steps(5000), 5000, &mut rng_from_seed(6), &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn restricted_complement_turns_b() {
        let g = Family::Cycle(6).build().unwrap();
        let params = ModelParams::finite(0.0).unwrap();
        let members: Vec<usize> = (1..6).collect();
        let mut trace = Vec::new();
        run_restricted(&g, &members, Configuration::all_a(6), &SchedulerSpec::Random, &params, &p3200(),
            StoppingRule::Steps(3000), 3000, &mut rng_from_seed(7), &mut trace).unwrap();
        let mut seen_zero = false;
        for r in &trace {
            if r.vertex == 0 {
                assert_eq!(r.post, Strategy::B);
                seen_zero = true;
            }
        }
        assert!(seen_zero);
        assert!(run_restricted(&g, &[], Configuration::all_a(6), &SchedulerSpec::Random, &params, &p3200(),
            StoppingRule::Steps(1), 1, &mut rng_from_seed(7), &mut Discard).is_err());
    }

    #[test]
    fn csv_trace_format() {
        let k2 = Family::Complete(2).build().unwrap();
        let params = ModelParams::finite(1.0).unwrap();
        let mut sink = CsvTrace::new(Vec::new());
        run(&k2, Configuration::all_b(2), &SchedulerSpec::Random, &params, &p3200(),
            StoppingRule::Steps(3), 3, &mut rng_from_seed(8), &mut sink).unwrap();
        let text = String::from_utf8(sink.finish().unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], TRACE_CSV_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("1,"));
        assert_eq!(lines[1].split(',').count(), 6);
    }

    #[test]
    fn ring_buffer_keeps_tail() {
        let k2 = Family::Complete(2).build().unwrap();
        let params = ModelParams::finite(1.0).unwrap();
        let mut ring = RingBuffer::new(5);
        run(&k2, Configuration::all_b(2), &SchedulerSpec::Random, &params, &p3200(),
            StoppingRule::Steps(12), 12, &mut rng_from_seed(8), &mut ring).unwrap();
        let steps: Vec<u64> = ring.records().map(|r| r.step).collect();
        assert_eq!(steps, vec![8, 9, 10, 11, 12]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn one_flip_locality_and_replay(seed in any::<u64>(), beta in 0.0f64..4.0, which in 0usize..3) {
            let g = Family::Grid(3, 4).build().unwrap();
            let spec = match which {
                0 => SchedulerSpec::Random,
                1 => SchedulerSpec::lazy_walk(&g, 5),
                _ => SchedulerSpec::adversary(0.3, 12),
            };
            let params = ModelParams::finite(beta).unwrap();
            let payoff = p3200();
            let mut trace = Vec::new();
            let mut sim = Simulator::new(&g, &payoff, &params, &spec, Configuration::all_b(12)).unwrap();
            let mut rng = rng_from_seed(seed);
            let mut prev = sim.config().clone();
            for _ in 0..300 {
                sim.step(&mut rng, &mut trace);
                let cur = sim.config().clone();
                prop_assert!(prev.hamming(&cur) <= 1);
                prop_assert_eq!(cur.count_a(), sim.count_a());
                prev = cur;
            }
            let exact = potential(&g, sim.config(), &payoff);
            prop_assert!((sim.potential() - exact).abs() < 1e-9);

            let mut again = Vec::new();
            run(&g, Configuration::all_b(12), &spec, &params, &payoff, StoppingRule::Steps(300), 300,
                &mut rng_from_seed(seed), &mut again).unwrap();
            prop_assert_eq!(trace, again);
        }

        #[test]
        fn restricted_never_grows_a_outside(seed in any::<u64>()) {
            let g = Family::Cycle(8).build().unwrap();
            let members = [0usize, 1, 2];
            let params = ModelParams::finite(1.0).unwrap();
            let payoff = p3200();
            let mut sim = Simulator::new(&g, &payoff, &params, &SchedulerSpec::Random, Configuration::all_a(8))
                .unwrap()
                .restrict_to(&members)
                .unwrap();
            let mut rng = rng_from_seed(seed);
            let mut touched = [false; 8];
            for _ in 0..400 {
                let rec = sim.step(&mut rng, &mut Discard);
                touched[rec.vertex] = true;
                for v in 3..8 {
                    if touched[v] {
                        prop_assert_eq!(sim.config().get(v), Strategy::B);
                    }
                }
            }
        }
    }
}
