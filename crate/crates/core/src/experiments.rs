//! Monte-Carlo experiments: p-inertia, its scaling with population size,
//! and how far an adaptive adversary can hold back adoption of A.

use std::fmt;

use rand::Rng;
use rayon::prelude::*;

use crate::dynamics::{Discard, RingBuffer, Simulator, StoppingRule, TraceRecord};
use crate::error::{invalid, Result};
use crate::graph::{Family, WeightedGraph};
use crate::model::{Configuration, ModelParams, PayoffMatrix, Strategy};
use crate::rng::{mix64, replica_rng, replica_seed, rng_from_seed};
use crate::scheduler::{tail_fraction, HammerRule, RoundTracker, SchedulerSpec, TAIL_EPS};

/// Fewest replicas accepted by [`p_inertia_mc`].
pub const MIN_REPLICAS: usize = 30;
/// Random starts added by [`StartPolicy::default`].
pub const DEFAULT_RANDOM_STARTS: usize = 32;
/// Candidate inverse noise levels for the pilot, in increasing order.
pub const PILOT_BETAS: [f64; 5] = [2.0, 3.0, 4.0, 5.0, 6.0];
/// A pilot level is accepted once its censoring rate is below this.
pub const PILOT_MAX_CENSORING: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StartPolicy {
    AllB,
    /// All-B plus `k` configurations drawn uniformly at random.
    AllBPlusRandom { k: usize },
}

impl Default for StartPolicy {
    fn default() -> Self {
        StartPolicy::AllBPlusRandom {
            k: DEFAULT_RANDOM_STARTS,
        }
    }
}

impl fmt::Display for StartPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StartPolicy::AllB => write!(f, "all-B"),
            StartPolicy::AllBPlusRandom { k } => write!(f, "all-B+{k}-random"),
        }
    }
}

impl StartPolicy {
    fn starts(&self, n: usize, seed: u64) -> Vec<Configuration> {
        let mut out = vec![Configuration::all_b(n)];
        if let StartPolicy::AllBPlusRandom { k } = *self {
            let mut rng = rng_from_seed(mix64(seed ^ 0x5354_4152_5453));
            for _ in 0..k {
                out.push(Configuration::from_states(
                    (0..n)
                        .map(|_| if rng.gen::<bool>() { Strategy::A } else { Strategy::B })
                        .collect(),
                ));
            }
        }
        out
    }
}

/// Hitting steps of one start state across replicas.
#[derive(Clone, Debug, PartialEq)]
pub struct StartEstimate {
    pub start: Configuration,
    /// Per replica: steps taken and whether the budget ran out first.
    pub runs: Vec<(u64, bool)>,
    /// Mean over uncensored runs; `None` if every run was censored.
    pub mean: Option<f64>,
    /// 95% normal-approximation half-width over uncensored runs.
    pub ci_half_width: Option<f64>,
    pub censored: usize,
}

impl StartEstimate {
    fn from_runs(start: Configuration, runs: Vec<(u64, bool)>) -> Self {
        let done: Vec<f64> = runs.iter().filter(|r| !r.1).map(|r| r.0 as f64).collect();
        let censored = runs.len() - done.len();
        let (mean, ci_half_width) = match done.len() {
            0 => (None, None),
            1 => (Some(done[0]), None),
            k => {
                let mean = done.iter().sum::<f64>() / k as f64;
                let var = done.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
                (Some(mean), Some(1.96 * var.sqrt() / (k as f64).sqrt()))
            }
        };
        StartEstimate {
            start,
            runs,
            mean,
            ci_half_width,
            censored,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InertiaEstimate {
    pub p: f64,
    pub params: ModelParams,
    pub graph_id: String,
    pub policy: StartPolicy,
    pub replicas: usize,
    pub budget: u64,
    pub per_start: Vec<StartEstimate>,
    /// Index into `per_start` of the start with the largest mean.
    pub worst: Option<usize>,
}

impl InertiaEstimate {
    /// Largest per-start mean, the reported inertia.
    pub fn mean(&self) -> Option<f64> {
        self.worst.and_then(|i| self.per_start[i].mean)
    }

    pub fn ci_half_width(&self) -> Option<f64> {
        self.worst.and_then(|i| self.per_start[i].ci_half_width)
    }

    /// Estimate from the all-B start alone.
    pub fn all_b(&self) -> &StartEstimate {
        &self.per_start[0]
    }

    pub fn censored(&self) -> usize {
        self.per_start.iter().map(|s| s.censored).sum()
    }

    pub fn total_runs(&self) -> usize {
        self.per_start.iter().map(|s| s.runs.len()).sum()
    }

    pub fn censoring_rate(&self) -> f64 {
        self.censored() as f64 / self.total_runs().max(1) as f64
    }

    /// Every run of every start hit the budget.
    pub fn is_unusable(&self) -> bool {
        self.worst.is_none()
    }
}

/// Default step budget: `200 n^2` for contagion walks, `200 n ln n` otherwise.
pub fn default_budget(n: usize, spec: &SchedulerSpec) -> u64 {
    let n = n as f64;
    let b = match spec {
        SchedulerSpec::Contagion { .. } => 200.0 * n * n,
        _ => 200.0 * n * n.ln().max(1.0),
    };
    b.ceil() as u64
}

/// Monte-Carlo p-inertia: expected steps until at least `(1 - p) n`
/// vertices play A, maximised over the starts of `policy`.
#[allow(clippy::too_many_arguments)]
pub fn p_inertia_mc(
    graph: &WeightedGraph,
    graph_id: &str,
    payoff: &PayoffMatrix,
    spec: &SchedulerSpec,
    params: &ModelParams,
    p: f64,
    policy: StartPolicy,
    replicas: usize,
    budget: u64,
    seed: u64,
) -> Result<InertiaEstimate> {
    if !(p > 0.0 && p < 1.0) {
        return Err(invalid(format!("p must lie in (0, 1), got {p}")));
    }
    if replicas < MIN_REPLICAS {
        return Err(invalid(format!("replicas must be at least {MIN_REPLICAS}, got {replicas}")));
    }
    let n = graph.n();
    spec.validate(n)?;
    let starts = policy.starts(n, seed);
    let stop = StoppingRule::FractionA { p };
    let per_start = starts
        .into_iter()
        .enumerate()
        .map(|(s, start)| {
            let start_seed = replica_seed(seed, s as u64);
            let runs = (0..replicas as u64)
                .into_par_iter()
                .map(|i| {
                    let mut rng = replica_rng(start_seed, i);
                    let mut sim = Simulator::new(graph, payoff, params, spec, start.clone())?;
                    let out = sim.run_until(stop, budget, &mut rng, &mut Discard);
                    Ok((out.steps, out.truncated))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(StartEstimate::from_runs(start, runs))
        })
        .collect::<Result<Vec<_>>>()?;
    let worst = per_start
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.mean.map(|m| (i, m)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i);
    Ok(InertiaEstimate {
        p,
        params: *params,
        graph_id: graph_id.to_string(),
        policy,
        replicas,
        budget,
        per_start,
        worst,
    })
}

pub const INERTIA_CSV_HEADER: &str = "family,n,beta,p,replica,steps,censored";

/// Rows of `inertia.csv` for the all-B start of each estimate.
pub fn inertia_csv<'a>(estimates: impl IntoIterator<Item = (&'a str, usize, &'a InertiaEstimate)>) -> String {
    let mut out = String::from(INERTIA_CSV_HEADER);
    out.push('\n');
    for (family, n, est) in estimates {
        for (i, (steps, cens)) in est.all_b().runs.iter().enumerate() {
            out.push_str(&format!(
                "{family},{n},{},{},{i},{steps},{}\n",
                est.params.beta,
                est.p,
                u8::from(*cens)
            ));
        }
    }
    out
}

/// Smallest level in `candidates` whose censoring rate from all-B on `graph`
/// is below [`PILOT_MAX_CENSORING`], with the rates tried so far.
#[allow(clippy::too_many_arguments)]
pub fn pilot_beta(
    graph: &WeightedGraph,
    payoff: &PayoffMatrix,
    spec: &SchedulerSpec,
    p: f64,
    candidates: &[f64],
    replicas: usize,
    budget: u64,
    seed: u64,
) -> Result<(Option<f64>, Vec<(f64, f64)>)> {
    let mut tried = Vec::new();
    for &beta in candidates {
        let params = ModelParams::finite(beta)?;
        let est = p_inertia_mc(graph, "pilot", payoff, spec, &params, p, StartPolicy::AllB, replicas, budget, seed)?;
        let rate = est.censoring_rate();
        tried.push((beta, rate));
        if rate < PILOT_MAX_CENSORING {
            return Ok((Some(beta), tried));
        }
    }
    Ok((None, tried))
}

/// Least-squares fit `y = intercept + slope x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope; zero with exactly two points.
    pub slope_stderr: f64,
}

pub fn least_squares(points: &[(f64, f64)]) -> Result<LineFit> {
    let k = points.len();
    if k < 2 {
        return Err(invalid("line fit needs at least two points"));
    }
    let kf = k as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / kf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / kf;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(invalid("line fit needs two distinct x values"));
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_stderr = if k > 2 {
        let sse: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
        (sse / (kf - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(LineFit {
        slope,
        intercept,
        slope_stderr,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingReport {
    pub family: String,
    pub sizes: Vec<usize>,
    pub estimates: Vec<InertiaEstimate>,
    /// Fit of `ln(mean)` against `ln(n)` over sizes with a usable mean;
    /// `None` if fewer than two sizes are usable.
    pub fit: Option<LineFit>,
}

impl ScalingReport {
    pub fn unusable_sizes(&self) -> Vec<usize> {
        self.sizes
            .iter()
            .zip(&self.estimates)
            .filter(|(_, e)| e.is_unusable())
            .map(|(&n, _)| n)
            .collect()
    }
}

pub const SCALING_CSV_HEADER: &str = "family,slope,stderr,intercept";

pub fn scaling_csv<'a>(reports: impl IntoIterator<Item = &'a ScalingReport>) -> String {
    let mut out = String::from(SCALING_CSV_HEADER);
    out.push('\n');
    for r in reports {
        match r.fit {
            Some(f) => out.push_str(&format!("{},{},{},{}\n", r.family, f.slope, f.slope_stderr, f.intercept)),
            None => out.push_str(&format!("{},,,\n", r.family)),
        }
    }
    out
}

/// Settings shared by every size of a scaling sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingSettings {
    pub params: ModelParams,
    pub p: f64,
    pub policy: StartPolicy,
    pub replicas: usize,
    /// Step budget per size; [`default_budget`] when `None`.
    pub budget: Option<u64>,
    pub seed: u64,
}

/// p-inertia of `family` at each size, then a log-log slope. `spec_for`
/// builds the scheduler for each graph.
pub fn scaling_experiment(
    family: &Family,
    sizes: &[usize],
    payoff: &PayoffMatrix,
    spec_for: impl Fn(&WeightedGraph) -> Result<SchedulerSpec>,
    settings: &ScalingSettings,
) -> Result<ScalingReport> {
    if sizes.len() < 4 {
        return Err(invalid(format!("scaling needs at least 4 sizes, got {}", sizes.len())));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("scaling sizes must be strictly increasing"));
    }
    let mut estimates = Vec::with_capacity(sizes.len());
    for (k, &n) in sizes.iter().enumerate() {
        let fam = family.with_size(n);
        let graph = fam.build()?;
        let spec = spec_for(&graph)?;
        let budget = settings.budget.unwrap_or_else(|| default_budget(graph.n(), &spec));
        estimates.push(p_inertia_mc(
            &graph,
            &fam.to_string(),
            payoff,
            &spec,
            &settings.params,
            settings.p,
            settings.policy,
            settings.replicas,
            budget,
            replica_seed(settings.seed, k as u64),
        )?);
    }
    let points: Vec<(f64, f64)> = estimates
        .iter()
        .filter_map(|e| e.mean().map(|m| (e.per_start[0].start.len() as f64, m)))
        .filter(|&(_, m)| m > 0.0)
        .map(|(n, m)| (n.ln(), m.ln()))
        .collect();
    let fit = if points.len() >= 2 { Some(least_squares(&points)?) } else { None };
    Ok(ScalingReport {
        family: family.kind().to_string(),
        sizes: sizes.to_vec(),
        estimates,
        fit,
    })
}

/// Records kept before the first step whose A-fraction exceeds `r`.
pub const EXCEEDANCE_PREFIX: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct ContainmentReport {
    pub r: f64,
    pub horizon: u64,
    pub replicas: usize,
    /// Largest A-fraction seen at any step of any replica.
    pub max_fraction: f64,
    /// Steps, summed over replicas, whose A-fraction exceeded `r`.
    pub exceedances: u64,
    /// Last records up to and including the first exceedance, if any.
    pub first_exceedance: Option<(usize, Vec<TraceRecord>)>,
    /// Completed round lengths, all replicas concatenated.
    pub round_lengths: Vec<usize>,
    /// `(eps, fraction of rounds longer than eps n ln n)`.
    pub tail: Vec<(f64, f64)>,
    /// Times the adversary gave up hammering a vertex.
    pub hammer_cap_hits: u64,
}

impl ContainmentReport {
    pub fn tail_at(&self, eps: f64) -> Option<f64> {
        self.tail.iter().find(|(e, _)| *e == eps).map(|&(_, g)| g)
    }
}

struct ReplicaContainment {
    max_count: usize,
    exceedances: u64,
    first: Option<Vec<TraceRecord>>,
    rounds: Vec<usize>,
    cap_hits: u64,
}

/// Runs the adaptive adversary from all-B for `horizon` steps per replica and
/// counts steps with more than `r n` A-players.
#[allow(clippy::too_many_arguments)]
pub fn adversary_containment(
    graph: &WeightedGraph,
    payoff: &PayoffMatrix,
    params: &ModelParams,
    r: f64,
    hammer: HammerRule,
    horizon: u64,
    replicas: usize,
    seed: u64,
) -> Result<ContainmentReport> {
    let n = graph.n();
    let spec = SchedulerSpec::AdversarialAdaptive {
        r,
        order: (0..n).collect(),
        hammer,
    };
    spec.validate(n)?;
    if replicas == 0 {
        return Err(invalid("replicas must be positive"));
    }
    let limit = r * n as f64 + 1e-9;
    let results = (0..replicas as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = replica_rng(seed, i);
            let mut sim = Simulator::new(graph, payoff, params, &spec, Configuration::all_b(n))?;
            let mut ring = RingBuffer::new(EXCEEDANCE_PREFIX);
            let mut tracker = RoundTracker::new(n);
            let mut out = ReplicaContainment {
                max_count: 0,
                exceedances: 0,
                first: None,
                rounds: Vec::new(),
                cap_hits: 0,
            };
            for _ in 0..horizon {
                let rec = if out.first.is_none() {
                    sim.step(&mut rng, &mut ring)
                } else {
                    sim.step(&mut rng, &mut Discard)
                };
                tracker.push(rec.vertex);
                out.max_count = out.max_count.max(rec.count_a);
                if rec.count_a as f64 > limit {
                    out.exceedances += 1;
                    if out.first.is_none() {
                        out.first = Some(ring.records().copied().collect());
                    }
                }
            }
            out.cap_hits = sim.scheduler().hammer_cap_hits();
            out.rounds = tracker.into_rounds().lengths;
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let f_n = n as f64 * (n as f64).ln();
    let round_lengths: Vec<usize> = results.iter().flat_map(|r| r.rounds.iter().copied()).collect();
    Ok(ContainmentReport {
        r,
        horizon,
        replicas,
        max_fraction: results.iter().map(|r| r.max_count).max().unwrap_or(0) as f64 / n as f64,
        exceedances: results.iter().map(|r| r.exceedances).sum(),
        first_exceedance: results
            .iter()
            .enumerate()
            .find_map(|(i, r)| r.first.as_ref().map(|t| (i, t.clone()))),
        tail: TAIL_EPS.iter().map(|&e| (e, tail_fraction(&round_lengths, f_n, e))).collect(),
        round_lengths,
        hammer_cap_hits: results.iter().map(|r| r.cap_hits).sum(),
    })
}
