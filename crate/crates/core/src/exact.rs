//! Exact analysis of small instances: the full transition matrix, its
//! stationary distribution, the Gibbs measure, detailed balance, move
//! resistances and the stochastically stable states via minimum-resistance
//! rooted trees.
//!
//! States of a plain chain are packed configurations (vertex `i` in bit `i`,
//! A = 1). Contagion chains pair a configuration with the last scheduled
//! vertex; their state index is `config * n + walker`.

use nalgebra::{DMatrix, DVector};
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use rayon::prelude::*;

use crate::arborescence::min_in_arborescence;
use crate::error::{invalid, Error, Result};
use crate::graph::WeightedGraph;
use crate::model::{log_linear, Beta, Configuration, PayoffMatrix, Strategy, POTENTIAL_TOL};
use crate::scheduler::SchedulerSpec;

/// Largest plain state space (`2^n`).
pub const MAX_PLAIN_STATES: usize = 16_384;
/// Largest contagion state space (`2^n * n`).
pub const MAX_CONTAGION_STATES: usize = 12_288;
/// Largest inverse noise accepted by the exact oracles.
pub const MAX_EXACT_BETA: f64 = 50.0;
/// Largest system handed to the dense linear solver.
pub const MAX_DENSE_STATES: usize = 4_096;

const ROW_SUM_TOL: f64 = 1e-12;
const STATIONARY_RESIDUAL: f64 = 1e-10;

/// Which one-step (or one-round) kernel to build.
#[derive(Clone, Debug, PartialEq)]
pub enum ChainKind {
    /// Uniformly random vertex each step.
    Random,
    /// Only vertex `v` is ever scheduled (reducible on its own).
    SingleVertex(usize),
    /// One full pass of a non-adaptive periodic scheduler: the product of the
    /// per-distribution kernels in permutation order.
    PeriodicRound {
        distributions: Vec<Vec<f64>>,
        order: Vec<usize>,
    },
    /// Kernel on (configuration, last scheduled vertex) pairs.
    Contagion { rows: Vec<Vec<f64>> },
    /// Random scheduling where vertices outside `members` always choose B.
    /// States range over configurations that are B outside `members`.
    RestrictedRandom { members: Vec<usize> },
}

impl ChainKind {
    /// Chain kind for a scheduler spec; the adaptive adversary has none.
    pub fn from_spec(spec: &SchedulerSpec) -> Result<Self> {
        match spec {
            SchedulerSpec::Random => Ok(ChainKind::Random),
            SchedulerSpec::NonAdaptivePeriodic { distributions, order } => Ok(ChainKind::PeriodicRound {
                distributions: distributions.clone(),
                order: order.clone(),
            }),
            SchedulerSpec::Contagion { rows, .. } => Ok(ChainKind::Contagion { rows: rows.clone() }),
            SchedulerSpec::AdversarialAdaptive { .. } => {
                Err(invalid("the adaptive adversary has no configuration-level Markov chain"))
            }
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        match self {
            ChainKind::Random => Ok(()),
            ChainKind::SingleVertex(v) if *v >= n => Err(invalid(format!("vertex {v} outside 0..{n}"))),
            ChainKind::SingleVertex(_) => Ok(()),
            ChainKind::PeriodicRound { distributions, order } => SchedulerSpec::NonAdaptivePeriodic {
                distributions: distributions.clone(),
                order: order.clone(),
            }
            .validate(n),
            ChainKind::Contagion { rows } => SchedulerSpec::Contagion {
                rows: rows.clone(),
                start: 0,
            }
            .validate(n),
            ChainKind::RestrictedRandom { members } => {
                if members.is_empty() {
                    return Err(invalid("restricted set must be nonempty"));
                }
                match members.iter().find(|&&v| v >= n) {
                    Some(v) => Err(invalid(format!("restricted set has vertex {v} outside 0..{n}"))),
                    None => Ok(()),
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ChainState {
    /// Packed configuration.
    pub config: u64,
    pub walker: Option<usize>,
}

impl ChainState {
    pub fn configuration(&self, n: usize) -> Configuration {
        Configuration::from_index(self.config, n)
    }

    /// Bitstring, with `@walker` appended for contagion states.
    pub fn label(&self, n: usize) -> String {
        let bits = self.configuration(n).to_bitstring();
        match self.walker {
            Some(w) => format!("{bits}@{w}"),
            None => bits,
        }
    }
}

/// Row-stochastic transition matrix with sparse rows.
#[derive(Clone, Debug)]
pub struct ChainMatrix {
    n_vertices: usize,
    states: Vec<ChainState>,
    rows: Vec<Vec<(usize, f64)>>,
    irreducible: bool,
    aperiodic: bool,
}

impl ChainMatrix {
    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[ChainState] {
        &self.states
    }

    /// Sparse row `i`, sorted by target state.
    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.rows[from]
            .binary_search_by_key(&to, |&(j, _)| j)
            .map(|k| self.rows[from][k].1)
            .unwrap_or(0.0)
    }

    pub fn is_irreducible(&self) -> bool {
        self.irreducible
    }

    pub fn is_aperiodic(&self) -> bool {
        self.aperiodic
    }

    pub fn state_index(&self, s: &ChainState) -> Option<usize> {
        self.states.iter().position(|x| x == s)
    }

    /// Index of the plain-chain state holding `config`.
    pub fn config_index(&self, config: &Configuration) -> Option<usize> {
        self.state_index(&ChainState {
            config: config.index(),
            walker: None,
        })
    }

    /// Closed communicating classes (those no probability leaves).
    pub fn closed_classes(&self) -> Vec<Vec<usize>> {
        let (sccs, comp) = self.components();
        let mut leaks = vec![false; sccs.len()];
        for (i, row) in self.rows.iter().enumerate() {
            if row.iter().any(|&(j, p)| p > 0.0 && comp[j] != comp[i]) {
                leaks[comp[i]] = true;
            }
        }
        let mut closed: Vec<Vec<usize>> = sccs
            .into_iter()
            .zip(leaks)
            .filter(|(_, l)| !l)
            .map(|(mut c, _)| {
                c.sort_unstable();
                c
            })
            .collect();
        closed.sort();
        closed
    }

    fn components(&self) -> (Vec<Vec<usize>>, Vec<usize>) {
        let mut g = DiGraph::<(), ()>::with_capacity(self.len(), 0);
        let nodes: Vec<_> = (0..self.len()).map(|_| g.add_node(())).collect();
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, p) in row {
                if p > 0.0 {
                    g.add_edge(nodes[i], nodes[j], ());
                }
            }
        }
        let sccs: Vec<Vec<usize>> = tarjan_scc(&g)
            .into_iter()
            .map(|c| c.into_iter().map(|n| n.index()).collect())
            .collect();
        let mut comp = vec![0; self.len()];
        for (k, c) in sccs.iter().enumerate() {
            for &i in c {
                comp[i] = k;
            }
        }
        (sccs, comp)
    }

    fn finish(n_vertices: usize, states: Vec<ChainState>, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            let sum: f64 = row.iter().map(|&(_, p)| p).sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Numerical(format!("row {i} sums to {sum}")));
            }
        }
        let mut chain = ChainMatrix {
            n_vertices,
            states,
            rows,
            irreducible: false,
            aperiodic: false,
        };
        let (sccs, _) = chain.components();
        chain.irreducible = sccs.len() == 1;
        chain.aperiodic = chain.irreducible && chain.period() == 1;
        Ok(chain)
    }

    /// Period of an irreducible chain: gcd of `level(u) + 1 - level(v)` over
    /// arcs, with BFS levels from state 0.
    fn period(&self) -> u64 {
        let mut level = vec![u64::MAX; self.len()];
        level[0] = 0;
        let mut queue = std::collections::VecDeque::from([0usize]);
        while let Some(u) = queue.pop_front() {
            for &(v, p) in &self.rows[u] {
                if p > 0.0 && level[v] == u64::MAX {
                    level[v] = level[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        let gcd = |mut a: u64, mut b: u64| {
            while b != 0 {
                (a, b) = (b, a % b);
            }
            a
        };
        let mut g = 0;
        for (u, row) in self.rows.iter().enumerate() {
            for &(v, p) in row {
                if p > 0.0 {
                    g = gcd(g, (level[u] + 1).abs_diff(level[v]));
                }
            }
        }
        g
    }
}

/// Probability that vertex `v` picks `z` from packed configuration `x`.
struct UpdateTable<'a> {
    graph: &'a WeightedGraph,
    payoff: &'a PayoffMatrix,
    beta: Beta,
}

impl UpdateTable<'_> {
    fn nu(&self, x: u64, v: usize, z: Strategy) -> f64 {
        self.graph
            .neighbors(v)
            .iter()
            .map(|&(j, w)| {
                let xj = if x >> j & 1 == 1 { Strategy::A } else { Strategy::B };
                w * self.payoff.entry(z, xj)
            })
            .sum()
    }

    /// `(next config if v plays A, prob)` and the same for B.
    fn outcomes(&self, x: u64, v: usize) -> [(u64, f64); 2] {
        let cur = if x >> v & 1 == 1 { Strategy::A } else { Strategy::B };
        let pr = log_linear(self.nu(x, v, Strategy::A), self.nu(x, v, Strategy::B), self.beta, cur);
        [(x | 1 << v, pr.a), (x & !(1 << v), pr.b)]
    }
}

fn push_merge(row: &mut Vec<(usize, f64)>) {
    row.sort_by_key(|&(j, _)| j);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(row.len());
    for &(j, p) in row.iter() {
        match out.last_mut() {
            Some(last) if last.0 == j => last.1 += p,
            _ => out.push((j, p)),
        }
    }
    out.retain(|&(_, p)| p > 0.0);
    *row = out;
}

fn check_exact_beta(beta: Beta) -> Result<f64> {
    match beta {
        Beta::Finite(b) if b <= MAX_EXACT_BETA => Ok(b),
        Beta::Finite(b) => Err(invalid(format!("exact oracles accept beta <= {MAX_EXACT_BETA}, got {b}"))),
        Beta::Infinite => Err(invalid("exact oracles need a finite beta")),
    }
}

fn plain_capacity(n: usize) -> Result<usize> {
    let states = if n >= 63 { usize::MAX } else { 1usize << n };
    if states > MAX_PLAIN_STATES {
        return Err(Error::Capacity {
            what: "plain chain states (2^n)",
            needed: if n >= 63 { u64::MAX } else { 1u64 << n },
            bound: MAX_PLAIN_STATES as u64,
        });
    }
    Ok(states)
}

fn contagion_capacity(n: usize) -> Result<usize> {
    let states = if n >= 40 { usize::MAX } else { (1usize << n) * n };
    if states > MAX_CONTAGION_STATES {
        return Err(Error::Capacity {
            what: "contagion chain states (2^n * n)",
            needed: states as u64,
            bound: MAX_CONTAGION_STATES as u64,
        });
    }
    Ok(states)
}

/// States of the restricted chain: every subset of `members` set to A.
fn restricted_states(members: &[usize]) -> Vec<u64> {
    let k = members.len();
    (0..1u64 << k)
        .map(|m| {
            members
                .iter()
                .enumerate()
                .filter(|(i, _)| m >> i & 1 == 1)
                .fold(0u64, |acc, (_, &v)| acc | 1 << v)
        })
        .collect()
}

/// Exact one-step kernel (one round for periodic schedulers).
pub fn build_chain(graph: &WeightedGraph, payoff: &PayoffMatrix, beta: Beta, kind: &ChainKind) -> Result<ChainMatrix> {
    let n = graph.n();
    check_exact_beta(beta)?;
    kind.validate(n)?;
    let table = UpdateTable { graph, payoff, beta };
    match kind {
        ChainKind::Random => {
            let size = plain_capacity(n)?;
            let rows = (0..size as u64)
                .into_par_iter()
                .map(|x| {
                    let mut row = Vec::with_capacity(2 * n);
                    for v in 0..n {
                        for (y, p) in table.outcomes(x, v) {
                            row.push((y as usize, p / n as f64));
                        }
                    }
                    push_merge(&mut row);
                    row
                })
                .collect();
            ChainMatrix::finish(n, plain_states(size), rows)
        }
        ChainKind::SingleVertex(v) => {
            let size = plain_capacity(n)?;
            let rows = (0..size as u64)
                .map(|x| {
                    let mut row: Vec<(usize, f64)> = table.outcomes(x, *v).iter().map(|&(y, p)| (y as usize, p)).collect();
                    push_merge(&mut row);
                    row
                })
                .collect();
            ChainMatrix::finish(n, plain_states(size), rows)
        }
        ChainKind::PeriodicRound { distributions, order } => {
            let size = plain_capacity(n)?;
            let rows = (0..size)
                .into_par_iter()
                .map(|start| {
                    let mut dist = vec![0.0; size];
                    dist[start] = 1.0;
                    for &k in order {
                        let mut next = vec![0.0; size];
                        for (x, &mass) in dist.iter().enumerate().filter(|(_, m)| **m > 0.0) {
                            for (v, &pv) in distributions[k].iter().enumerate().filter(|(_, p)| **p > 0.0) {
                                for (y, p) in table.outcomes(x as u64, v) {
                                    next[y as usize] += mass * pv * p;
                                }
                            }
                        }
                        dist = next;
                    }
                    dist.into_iter().enumerate().filter(|(_, p)| *p > 0.0).collect()
                })
                .collect();
            ChainMatrix::finish(n, plain_states(size), rows)
        }
        ChainKind::Contagion { rows: walk } => {
            let size = contagion_capacity(n)?;
            let states: Vec<ChainState> = (0..size)
                .map(|i| ChainState {
                    config: (i / n) as u64,
                    walker: Some(i % n),
                })
                .collect();
            let rows = states
                .par_iter()
                .map(|s| {
                    let from = s.walker.expect("contagion state");
                    let mut row = Vec::new();
                    for (j, &pj) in walk[from].iter().enumerate().filter(|(_, p)| **p > 0.0) {
                        for (y, p) in table.outcomes(s.config, j) {
                            row.push((y as usize * n + j, pj * p));
                        }
                    }
                    push_merge(&mut row);
                    row
                })
                .collect();
            ChainMatrix::finish(n, states, rows)
        }
        ChainKind::RestrictedRandom { members } => {
            let mut members = members.clone();
            members.sort_unstable();
            members.dedup();
            plain_capacity(members.len())?;
            let configs = restricted_states(&members);
            let index: std::collections::HashMap<u64, usize> =
                configs.iter().enumerate().map(|(i, &c)| (c, i)).collect();
            let inside: Vec<bool> = (0..n).map(|v| members.binary_search(&v).is_ok()).collect();
            let rows = configs
                .iter()
                .map(|&x| {
                    let mut row = Vec::with_capacity(2 * n);
                    for v in 0..n {
                        if inside[v] {
                            for (y, p) in table.outcomes(x, v) {
                                row.push((index[&y], p / n as f64));
                            }
                        } else {
                            row.push((index[&x], 1.0 / n as f64));
                        }
                    }
                    push_merge(&mut row);
                    row
                })
                .collect();
            let states = configs
                .into_iter()
                .map(|config| ChainState { config, walker: None })
                .collect();
            ChainMatrix::finish(n, states, rows)
        }
    }
}

fn plain_states(size: usize) -> Vec<ChainState> {
    (0..size as u64)
        .map(|config| ChainState { config, walker: None })
        .collect()
}

/// Unique stationary distribution of an irreducible chain. Dense LU up to
/// [`MAX_DENSE_STATES`] states, power iteration on the lazy chain beyond.
pub fn stationary(chain: &ChainMatrix) -> Result<Vec<f64>> {
    if !chain.is_irreducible() {
        return Err(Error::Reducible {
            closed_classes: chain.closed_classes(),
        });
    }
    let m = chain.len();
    let mu = if m <= MAX_DENSE_STATES {
        // (P^T - I) mu = 0 with the last equation replaced by sum(mu) = 1
        let mut a = DMatrix::<f64>::zeros(m, m);
        for (i, row) in chain.rows.iter().enumerate() {
            for &(j, p) in row {
                a[(j, i)] += p;
            }
        }
        for i in 0..m {
            a[(i, i)] -= 1.0;
        }
        for j in 0..m {
            a[(m - 1, j)] = 1.0;
        }
        let mut b = DVector::<f64>::zeros(m);
        b[m - 1] = 1.0;
        let x = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Numerical("singular stationary system".into()))?;
        x.iter().map(|v| v.max(0.0)).collect::<Vec<_>>()
    } else {
        power_stationary(chain)
    };
    let total: f64 = mu.iter().sum();
    let mu: Vec<f64> = mu.into_iter().map(|v| v / total).collect();
    let res = stationary_residual(chain, &mu);
    if res > STATIONARY_RESIDUAL {
        return Err(Error::Numerical(format!("stationary residual {res:e} above {STATIONARY_RESIDUAL:e}")));
    }
    Ok(mu)
}

fn power_stationary(chain: &ChainMatrix) -> Vec<f64> {
    let m = chain.len();
    let mut mu = vec![1.0 / m as f64; m];
    for _ in 0..200_000 {
        let mut next = vec![0.0; m];
        for (i, row) in chain.rows.iter().enumerate() {
            let half = 0.5 * mu[i];
            next[i] += half;
            for &(j, p) in row {
                next[j] += half * p;
            }
        }
        let delta = mu.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        mu = next;
        if delta < 1e-15 {
            break;
        }
    }
    mu
}

/// `max_j |(mu P)_j - mu_j|`.
pub fn stationary_residual(chain: &ChainMatrix, mu: &[f64]) -> f64 {
    let mut next = vec![0.0; chain.len()];
    for (i, row) in chain.rows.iter().enumerate() {
        for &(j, p) in row {
            next[j] += mu[i] * p;
        }
    }
    next.iter().zip(mu).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Potential of a packed configuration.
pub fn packed_potential(graph: &WeightedGraph, payoff: &PayoffMatrix, x: u64) -> f64 {
    let s = |v: usize| if x >> v & 1 == 1 { Strategy::A } else { Strategy::B };
    graph
        .edges()
        .iter()
        .map(|e| e.weight * payoff.entry(s(e.lo), s(e.hi)))
        .sum()
}

/// Gibbs measure `exp(beta rho(x)) / Z` over all `2^n` configurations,
/// indexed by packed configuration.
pub fn gibbs(graph: &WeightedGraph, payoff: &PayoffMatrix, beta: f64) -> Result<Vec<f64>> {
    payoff.require_potential("the Gibbs measure")?;
    check_exact_beta(Beta::Finite(beta))?;
    let size = plain_capacity(graph.n())?;
    let configs: Vec<u64> = (0..size as u64).collect();
    Ok(gibbs_over(graph, payoff, beta, &configs))
}

/// Gibbs measure restricted to the given packed configurations.
pub fn gibbs_over(graph: &WeightedGraph, payoff: &PayoffMatrix, beta: f64, configs: &[u64]) -> Vec<f64> {
    let logw: Vec<f64> = configs
        .iter()
        .map(|&x| beta * packed_potential(graph, payoff, x))
        .collect();
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logw.iter().map(|l| (l - max).exp()).sum();
    logw.iter().map(|l| (l - max).exp() / z).collect()
}

/// Detailed-balance residuals over pairs of states that differ in one
/// vertex and have positive transition probability both ways.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetailedBalanceReport {
    /// `max |ln(p_xy / p_yx) - beta (rho(y) - rho(x))|`: the orientation under
    /// which the Gibbs measure is reversible.
    pub max_violation: f64,
    /// Same residual with `rho(x) - rho(y)` in place of `rho(y) - rho(x)`.
    pub max_violation_reversed: f64,
    pub pairs: usize,
}

pub fn detailed_balance_check(
    chain: &ChainMatrix,
    graph: &WeightedGraph,
    payoff: &PayoffMatrix,
    beta: f64,
) -> Result<DetailedBalanceReport> {
    payoff.require_potential("detailed balance")?;
    if chain.states.iter().any(|s| s.walker.is_some()) {
        return Err(invalid("detailed balance is checked on configuration chains only"));
    }
    let mut rep = DetailedBalanceReport {
        max_violation: 0.0,
        max_violation_reversed: 0.0,
        pairs: 0,
    };
    for (i, row) in chain.rows.iter().enumerate() {
        let x = chain.states[i].config;
        for &(j, pxy) in row {
            let y = chain.states[j].config;
            if (x ^ y).count_ones() != 1 || pxy <= 0.0 {
                continue;
            }
            let pyx = chain.prob(j, i);
            if pyx <= 0.0 {
                continue;
            }
            let drho = packed_potential(graph, payoff, y) - packed_potential(graph, payoff, x);
            let lr = (pxy / pyx).ln();
            rep.max_violation = rep.max_violation.max((lr - beta * drho).abs());
            rep.max_violation_reversed = rep.max_violation_reversed.max((lr + beta * drho).abs());
            rep.pairs += 1;
        }
    }
    Ok(rep)
}

/// Resistance of the move where vertex `j2` is scheduled at `a1` and the
/// result is `a2` (either `a1` itself or `a1` with `j2` flipped):
/// the potential drop for a downhill flip, the forgone potential gain for
/// staying put when flipping would have gone uphill, zero otherwise.
/// Potential differences within [`POTENTIAL_TOL`] count as equal.
pub fn move_resistance(
    a1: &Configuration,
    a2: &Configuration,
    j2: usize,
    graph: &WeightedGraph,
    payoff: &PayoffMatrix,
) -> Result<f64> {
    payoff.require_potential("the potential resistance rule")?;
    let n = graph.n();
    if a1.len() != n || a2.len() != n || j2 >= n {
        return Err(invalid("move_resistance: configuration size or vertex out of range"));
    }
    let diff: Vec<usize> = (0..n).filter(|&i| a1.get(i) != a2.get(i)).collect();
    if !(diff.is_empty() || diff == [j2]) {
        return Err(invalid(format!(
            "move_resistance: {a1} -> {a2} is not a single update of vertex {j2}"
        )));
    }
    Ok(packed_move_resistance(graph, payoff, a1.index(), a2.index(), j2))
}

fn packed_move_resistance(graph: &WeightedGraph, payoff: &PayoffMatrix, a1: u64, a2: u64, j2: usize) -> f64 {
    let r1 = packed_potential(graph, payoff, a1);
    if a1 != a2 {
        let drop = r1 - packed_potential(graph, payoff, a2);
        if drop > POTENTIAL_TOL {
            drop
        } else {
            0.0
        }
    } else {
        let gain = packed_potential(graph, payoff, a1 ^ 1 << j2) - r1;
        if gain > POTENTIAL_TOL {
            gain
        } else {
            0.0
        }
    }
}

/// Default inverse-noise grid for exponent fits (`eps = e^-8, e^-12`).
pub const FIT_BETAS: (f64, f64) = (8.0, 12.0);

/// Slope of `ln P_xy` against `ln eps` between two noise levels, where
/// `chain_at(beta)` builds the chain. `None` if the transition has zero
/// probability at either level.
pub fn resistance_by_fit(
    chain_at: impl Fn(f64) -> Result<ChainMatrix>,
    from: usize,
    to: usize,
    betas: (f64, f64),
) -> Result<Option<f64>> {
    let (b1, b2) = betas;
    if b1 == b2 {
        return Err(invalid("exponent fit needs two distinct noise levels"));
    }
    let p1 = chain_at(b1)?.prob(from, to);
    let p2 = chain_at(b2)?.prob(from, to);
    if p1 <= 0.0 || p2 <= 0.0 {
        return Ok(None);
    }
    // ln eps = -beta
    Ok(Some((p2.ln() - p1.ln()) / (b1 - b2)))
}

/// States plus feasible single-update moves weighted by resistance.
#[derive(Clone, Debug)]
pub struct ResistanceDigraph {
    pub n_vertices: usize,
    pub states: Vec<ChainState>,
    /// `(from, to, resistance)` with `from != to`.
    pub arcs: Vec<(usize, usize, f64)>,
    /// Smallest resistance of staying put, per state, if staying is possible.
    pub self_loops: Vec<Option<f64>>,
}

/// Resistances of every feasible transition of the chain `kind` describes.
/// For periodic schedulers this is the one-round chain, whose transition
/// resistances are min-plus products of the per-step resistances.
pub fn resistance_digraph(graph: &WeightedGraph, payoff: &PayoffMatrix, kind: &ChainKind) -> Result<ResistanceDigraph> {
    payoff.require_potential("the potential resistance rule")?;
    let n = graph.n();
    kind.validate(n)?;
    let mut arcs = Vec::new();
    let (states, self_loops) = match kind {
        ChainKind::Random | ChainKind::SingleVertex(_) => {
            let size = plain_capacity(n)?;
            let vertices: Vec<usize> = match kind {
                ChainKind::SingleVertex(v) => vec![*v],
                _ => (0..n).collect(),
            };
            let mut loops = vec![None; size];
            for x in 0..size as u64 {
                for &v in &vertices {
                    let y = x ^ 1 << v;
                    arcs.push((x as usize, y as usize, packed_move_resistance(graph, payoff, x, y, v)));
                    let stay = packed_move_resistance(graph, payoff, x, x, v);
                    loops[x as usize] = Some(loops[x as usize].map_or(stay, |s: f64| s.min(stay)));
                }
            }
            (plain_states(size), loops)
        }
        ChainKind::RestrictedRandom { members } => {
            let mut members = members.clone();
            members.sort_unstable();
            members.dedup();
            plain_capacity(members.len())?;
            let configs = restricted_states(&members);
            let index: std::collections::HashMap<u64, usize> =
                configs.iter().enumerate().map(|(i, &c)| (c, i)).collect();
            let mut loops = vec![None; configs.len()];
            for (i, &x) in configs.iter().enumerate() {
                for &v in &members {
                    let y = x ^ 1 << v;
                    arcs.push((i, index[&y], packed_move_resistance(graph, payoff, x, y, v)));
                    let stay = packed_move_resistance(graph, payoff, x, x, v);
                    loops[i] = Some(loops[i].map_or(stay, |s: f64| s.min(stay)));
                }
                if members.len() < n {
                    // an outside vertex is scheduled and stays B
                    loops[i] = Some(0.0);
                }
            }
            let states = configs.into_iter().map(|config| ChainState { config, walker: None }).collect();
            (states, loops)
        }
        ChainKind::PeriodicRound { distributions, order } => {
            let size = plain_capacity(n)?;
            let rows: Vec<Vec<f64>> = (0..size)
                .into_par_iter()
                .map(|start| {
                    let mut cost = vec![f64::INFINITY; size];
                    cost[start] = 0.0;
                    for &k in order {
                        let mut next = vec![f64::INFINITY; size];
                        for (x, &c) in cost.iter().enumerate().filter(|(_, c)| c.is_finite()) {
                            for (v, _) in distributions[k].iter().enumerate().filter(|(_, p)| **p > 0.0) {
                                let x = x as u64;
                                for y in [x, x ^ 1 << v] {
                                    let r = c + packed_move_resistance(graph, payoff, x, y, v);
                                    if r < next[y as usize] {
                                        next[y as usize] = r;
                                    }
                                }
                            }
                        }
                        cost = next;
                    }
                    cost
                })
                .collect();
            let mut loops = vec![None; size];
            for (x, row) in rows.iter().enumerate() {
                for (y, &r) in row.iter().enumerate() {
                    if !r.is_finite() {
                        continue;
                    }
                    if x == y {
                        loops[x] = Some(r);
                    } else {
                        arcs.push((x, y, r));
                    }
                }
            }
            (plain_states(size), loops)
        }
        ChainKind::Contagion { rows } => {
            let size = contagion_capacity(n)?;
            let mut loops = vec![None; size];
            for i in 0..size {
                let (x, from) = ((i / n) as u64, i % n);
                for (j, _) in rows[from].iter().enumerate().filter(|(_, p)| **p > 0.0) {
                    let flip = x ^ 1 << j;
                    arcs.push((i, flip as usize * n + j, packed_move_resistance(graph, payoff, x, flip, j)));
                    let stay = packed_move_resistance(graph, payoff, x, x, j);
                    let target = x as usize * n + j;
                    if target == i {
                        loops[i] = Some(stay);
                    } else {
                        arcs.push((i, target, stay));
                    }
                }
            }
            let states = (0..size)
                .map(|i| ChainState {
                    config: (i / n) as u64,
                    walker: Some(i % n),
                })
                .collect();
            (states, loops)
        }
    };
    Ok(ResistanceDigraph {
        n_vertices: n,
        states,
        arcs,
        self_loops,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StableSetReport {
    /// Minimum rooted-tree resistance per state; `None` if some state cannot
    /// reach it.
    pub tree_resistance: Vec<Option<f64>>,
    pub min_resistance: f64,
    /// States whose tree resistance is minimal (within [`POTENTIAL_TOL`]).
    pub stable: Vec<usize>,
    /// States whose configuration is all-A, the predicted stable set.
    pub predicted: Vec<usize>,
}

impl StableSetReport {
    pub fn matches_prediction(&self) -> bool {
        self.stable == self.predicted
    }
}

/// Stochastically stable states: roots of minimum-resistance in-trees,
/// solved per root with a directed minimum spanning arborescence.
pub fn stable_states(digraph: &ResistanceDigraph) -> Result<StableSetReport> {
    let m = digraph.states.len();
    let tree_resistance: Vec<Option<f64>> = (0..m)
        .into_par_iter()
        .map(|root| min_in_arborescence(m, &digraph.arcs, root))
        .collect();
    let min_resistance = tree_resistance
        .iter()
        .flatten()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if !min_resistance.is_finite() {
        return Err(invalid("no state is reachable from every other state"));
    }
    let stable = tree_resistance
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_some_and(|r| r - min_resistance <= POTENTIAL_TOL))
        .map(|(i, _)| i)
        .collect();
    let all_a = if digraph.n_vertices >= 64 {
        u64::MAX
    } else {
        (1u64 << digraph.n_vertices) - 1
    };
    let predicted = digraph
        .states
        .iter()
        .enumerate()
        .filter(|(_, s)| s.config == all_a)
        .map(|(i, _)| i)
        .collect();
    Ok(StableSetReport {
        tree_resistance,
        min_resistance,
        stable,
        predicted,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RestrictedArgmax {
    pub best: Configuration,
    pub potential: f64,
    /// Every restricted configuration within [`POTENTIAL_TOL`] of the best.
    pub ties: Vec<Configuration>,
}

/// Highest-potential configuration among those that play B outside `members`.
pub fn restricted_potential_argmax(
    graph: &WeightedGraph,
    members: &[usize],
    payoff: &PayoffMatrix,
) -> Result<RestrictedArgmax> {
    let n = graph.n();
    let mut members = members.to_vec();
    members.sort_unstable();
    members.dedup();
    if let Some(v) = members.iter().find(|&&v| v >= n) {
        return Err(invalid(format!("restricted set has vertex {v} outside 0..{n}")));
    }
    plain_capacity(members.len())?;
    let configs = restricted_states(&members);
    let values: Vec<f64> = configs.iter().map(|&x| packed_potential(graph, payoff, x)).collect();
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ties: Vec<Configuration> = configs
        .iter()
        .zip(&values)
        .filter(|(_, &v)| best - v <= POTENTIAL_TOL)
        .map(|(&x, _)| Configuration::from_index(x, n))
        .collect();
    Ok(RestrictedArgmax {
        best: ties[0].clone(),
        potential: best,
        ties,
    })
}

/// Expected steps to reach a state satisfying `target`, from every state, by
/// solving `(I - Q) h = 1` on the non-target states. States that cannot
/// reach the target get infinity.
pub fn expected_hitting_times(chain: &ChainMatrix, target: impl Fn(&ChainState) -> bool) -> Result<Vec<f64>> {
    let m = chain.len();
    let is_target: Vec<bool> = chain.states.iter().map(&target).collect();
    // states that can reach the target, by reverse search
    let mut reverse: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (i, row) in chain.rows.iter().enumerate() {
        for &(j, p) in row {
            if p > 0.0 {
                reverse[j].push(i);
            }
        }
    }
    let mut reaches = is_target.clone();
    let mut stack: Vec<usize> = (0..m).filter(|&i| is_target[i]).collect();
    while let Some(j) = stack.pop() {
        for &i in &reverse[j] {
            if !reaches[i] {
                reaches[i] = true;
                stack.push(i);
            }
        }
    }
    let unknown: Vec<usize> = (0..m).filter(|&i| !is_target[i] && reaches[i]).collect();
    if unknown.len() > MAX_DENSE_STATES {
        return Err(Error::Capacity {
            what: "hitting-time linear system",
            needed: unknown.len() as u64,
            bound: MAX_DENSE_STATES as u64,
        });
    }
    let mut pos = vec![usize::MAX; m];
    for (k, &i) in unknown.iter().enumerate() {
        pos[i] = k;
    }
    let u = unknown.len();
    let mut h = vec![0.0; m];
    for i in 0..m {
        if !reaches[i] {
            h[i] = f64::INFINITY;
        }
    }
    if u == 0 {
        return Ok(h);
    }
    let mut a = DMatrix::<f64>::identity(u, u);
    for (k, &i) in unknown.iter().enumerate() {
        for &(j, p) in &chain.rows[i] {
            if pos[j] != usize::MAX {
                a[(k, pos[j])] -= p;
            } else if !reaches[j] && p > 0.0 {
                // mass leaking to a state that never hits: the expectation is infinite
                h[i] = f64::INFINITY;
            }
        }
    }
    let b = DVector::<f64>::from_element(u, 1.0);
    let x = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Numerical("singular hitting-time system".into()))?;
    for (k, &i) in unknown.iter().enumerate() {
        if h[i].is_finite() {
            h[i] = x[k];
        }
    }
    Ok(h)
}

pub const REPORT_CSV_HEADER: &str = "state,stationary,potential,tree_resistance";

/// One CSV row per chain state. `stationary` and `stable` are optional
/// columns (left blank when absent).
pub fn report_csv(
    chain_states: &[ChainState],
    n: usize,
    graph: &WeightedGraph,
    payoff: &PayoffMatrix,
    stationary: Option<&[f64]>,
    stable: Option<&StableSetReport>,
) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for (i, s) in chain_states.iter().enumerate() {
        let mu = stationary.map(|m| format!("{:e}", m[i])).unwrap_or_default();
        let tree = stable
            .and_then(|r| r.tree_resistance[i])
            .map(|r| format!("{r}"))
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.label(n),
            mu,
            packed_potential(graph, payoff, s.config),
            tree
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Family;
    use crate::model::potential;

    fn p3200() -> PayoffMatrix {
        PayoffMatrix::new(3.0, 2.0, 0.0, 0.0).unwrap()
    }

    fn k2() -> WeightedGraph {
        Family::Complete(2).build().unwrap()
    }

    fn cfg(s: &str) -> Configuration {
        s.parse().unwrap()
    }

    fn idx(s: &str) -> usize {
        cfg(s).index() as usize
    }

    #[test]
    fn k2_random_chain_shape() {
        let chain = build_chain(&k2(), &p3200(), Beta::Finite(0.0), &ChainKind::Random).unwrap();
        assert_eq!(chain.len(), 4);
        let bb = idx("00");
        assert!((chain.prob(bb, idx("10")) - 0.25).abs() < 1e-15);
        assert!((chain.prob(bb, idx("01")) - 0.25).abs() < 1e-15);
        assert!((chain.prob(bb, bb) - 0.5).abs() < 1e-15);
        assert!(chain.is_irreducible() && chain.is_aperiodic());
        for beta in [0.5, 3.0, 20.0] {
            let c = build_chain(&k2(), &p3200(), Beta::Finite(beta), &ChainKind::Random).unwrap();
            for i in 0..4 {
                let s: f64 = c.row(i).iter().map(|e| e.1).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn contagion_chain_on_triangle_is_strongly_connected() {
        let g = Family::Cycle(3).build().unwrap();
        let SchedulerSpec::Contagion { rows, .. } = SchedulerSpec::lazy_walk(&g, 0) else { unreachable!() };
        let chain = build_chain(&g, &p3200(), Beta::Finite(1.0), &ChainKind::Contagion { rows }).unwrap();
        assert_eq!(chain.len(), 24);
        assert!(chain.is_irreducible());
    }

    #[test]
    fn capacity_errors() {
        let g = Family::Cycle(15).build().unwrap();
        assert!(matches!(
            build_chain(&g, &p3200(), Beta::Finite(1.0), &ChainKind::Random),
            Err(Error::Capacity { .. })
        ));
        let g = Family::Cycle(11).build().unwrap();
        let SchedulerSpec::Contagion { rows, .. } = SchedulerSpec::lazy_walk(&g, 0) else { unreachable!() };
        assert!(matches!(
            build_chain(&g, &p3200(), Beta::Finite(1.0), &ChainKind::Contagion { rows }),
            Err(Error::Capacity { .. })
        ));
        assert!(build_chain(&k2(), &p3200(), Beta::Finite(60.0), &ChainKind::Random).is_err());
        assert!(build_chain(&k2(), &p3200(), Beta::Infinite, &ChainKind::Random).is_err());
    }

    #[test]
    fn stationary_trivial_chains() {
        let one = ChainMatrix::finish(0, plain_states(1), vec![vec![(0, 1.0)]]).unwrap();
        assert_eq!(stationary(&one).unwrap(), vec![1.0]);
        let two = ChainMatrix::finish(1, plain_states(2), vec![vec![(0, 0.7), (1, 0.3)], vec![(0, 0.3), (1, 0.7)]]).unwrap();
        let mu = stationary(&two).unwrap();
        assert!((mu[0] - 0.5).abs() < 1e-14 && (mu[1] - 0.5).abs() < 1e-14);
        let reducible = ChainMatrix::finish(1, plain_states(2), vec![vec![(0, 1.0)], vec![(1, 1.0)]]).unwrap();
        match stationary(&reducible) {
            Err(Error::Reducible { closed_classes }) => assert_eq!(closed_classes, vec![vec![0], vec![1]]),
            other => panic!("expected reducible, got {other:?}"),
        }
    }

    #[test]
    fn k2_gibbs_closed_form() {
        let mu = gibbs(&k2(), &p3200(), 1.0).unwrap();
        let e = std::f64::consts::E;
        let z = e.powi(3) + e.powi(2) + 2.0;
        assert!((mu[idx("11")] - e.powi(3) / z).abs() < 1e-15);
        assert!((mu[idx("00")] - e.powi(2) / z).abs() < 1e-15);
        assert!((mu[idx("10")] - 1.0 / z).abs() < 1e-15);
        assert!((mu[idx("11")] - 0.6815).abs() < 1e-4);
        let chain = build_chain(&k2(), &p3200(), Beta::Finite(1.0), &ChainKind::Random).unwrap();
        let st = stationary(&chain).unwrap();
        for i in 0..4 {
            assert!((st[i] - mu[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn gibbs_limits() {
        let g = Family::Cycle(5).build().unwrap();
        let uniform = gibbs(&g, &p3200(), 0.0).unwrap();
        assert!(uniform.iter().all(|p| (p - 1.0 / 32.0).abs() < 1e-15));
        let sharp = gibbs(&g, &p3200(), 40.0).unwrap();
        assert!(sharp[31] > 1.0 - 1e-12);
        // brute-force argmax of the potential
        let argmax = (0..32u64)
            .max_by(|&a, &b| {
                potential(&g, &Configuration::from_index(a, 5), &p3200())
                    .total_cmp(&potential(&g, &Configuration::from_index(b, 5), &p3200()))
            })
            .unwrap();
        assert_eq!(argmax, 31);
        let np = PayoffMatrix::with_non_potential_override(4.0, 2.0, 1.0, 0.0).unwrap();
        assert!(matches!(gibbs(&g, &np, 1.0), Err(Error::NonPotential(_))));
    }

    #[test]
    fn detailed_balance() {
        for (g, beta) in [(k2(), 1.0), (Family::Cycle(3).build().unwrap(), 2.0), (k2(), 0.0)] {
            let chain = build_chain(&g, &p3200(), Beta::Finite(beta), &ChainKind::Random).unwrap();
            let rep = detailed_balance_check(&chain, &g, &p3200(), beta).unwrap();
            assert!(rep.max_violation <= 1e-12, "{rep:?}");
            assert!(rep.pairs > 0);
            if beta == 0.0 {
                assert_eq!(rep.max_violation, 0.0);
            } else {
                assert!(rep.max_violation_reversed > 0.1);
            }
        }
    }

    #[test]
    fn move_resistance_examples() {
        let g = k2();
        let p = p3200();
        assert_eq!(move_resistance(&cfg("00"), &cfg("10"), 0, &g, &p).unwrap(), 2.0);
        assert_eq!(move_resistance(&cfg("10"), &cfg("10"), 1, &g, &p).unwrap(), 3.0);
        assert_eq!(move_resistance(&cfg("10"), &cfg("11"), 1, &g, &p).unwrap(), 0.0);
        assert!(move_resistance(&cfg("00"), &cfg("11"), 0, &g, &p).is_err());
        assert!(move_resistance(&cfg("00"), &cfg("10"), 1, &g, &p).is_err());
    }

    #[test]
    fn fitted_exponents_k2() {
        let g = k2();
        let p = p3200();
        let random = |b: f64| build_chain(&g, &p, Beta::Finite(b), &ChainKind::Random);
        let fit = resistance_by_fit(random, idx("00"), idx("10"), FIT_BETAS).unwrap().unwrap();
        assert!((fit - 2.0).abs() < 0.05);
        let fit = resistance_by_fit(random, idx("10"), idx("11"), FIT_BETAS).unwrap().unwrap();
        assert!(fit.abs() < 0.05);
        let only_1 = |b: f64| build_chain(&g, &p, Beta::Finite(b), &ChainKind::SingleVertex(1));
        let fit = resistance_by_fit(only_1, idx("10"), idx("10"), FIT_BETAS).unwrap().unwrap();
        assert!((fit - 3.0).abs() < 0.05);
        assert_eq!(resistance_by_fit(random, idx("00"), idx("11"), FIT_BETAS).unwrap(), None);
    }

    #[test]
    fn stable_states_k2() {
        let dg = resistance_digraph(&k2(), &p3200(), &ChainKind::Random).unwrap();
        let rep = stable_states(&dg).unwrap();
        assert_eq!(rep.tree_resistance[idx("11")], Some(2.0));
        assert_eq!(rep.tree_resistance[idx("00")], Some(3.0));
        assert_eq!(rep.stable, vec![idx("11")]);
        assert!(rep.matches_prediction());
    }

    #[test]
    fn restricted_argmax_examples() {
        let c8 = Family::Cycle(8).build().unwrap();
        let p2100 = PayoffMatrix::new(2.0, 1.0, 0.0, 0.0).unwrap();
        let seg = [0, 1, 2, 3];
        let r = restricted_potential_argmax(&c8, &seg, &p2100).unwrap();
        assert_eq!(r.best.to_bitstring(), "11110000");
        assert_eq!(r.ties.len(), 1);
        let all: Vec<usize> = (0..8).collect();
        assert_eq!(restricted_potential_argmax(&c8, &all, &p3200()).unwrap().best, Configuration::all_a(8));
        let single = restricted_potential_argmax(&c8, &[5], &p3200()).unwrap();
        assert_eq!(single.best, Configuration::all_b(8));
    }

    #[test]
    fn hitting_times_k2() {
        // from (B,B) at beta = 2, target both A; closed form by first-step analysis
        let chain = build_chain(&k2(), &p3200(), Beta::Finite(2.0), &ChainKind::Random).unwrap();
        let h = expected_hitting_times(&chain, |s| s.config == 3).unwrap();
        let up = 1.0 / (1.0 + (4.0f64).exp()); // B -> A against a B neighbor
        let join = 1.0 / (1.0 + (-6.0f64).exp()); // B -> A next to an A
        let leave = 1.0 / (1.0 + (4.0f64).exp()); // A -> B... A stays with prob 1/(1+e^{-2*(0-2)})
        // h_bb = 1 + (1 - up) h_bb + up h_ab ; h_ab = 1 + 0.5 (1 - leave_a) h_ab ... solve numerically
        // mixed state (A,B): vertex A (nbr B): A w.p. 1/(1+e^{4}); vertex B (nbr A): A w.p. join
        let stay_a = 1.0 / (1.0 + (4.0f64).exp());
        let _ = leave;
        // h_m = 1 + 0.5[(stay_a) h_m + (1-stay_a) h_bb] + 0.5[(1-join) h_m]
        // h_bb = 1 + up h_m + (1-up) h_bb  =>  h_bb = 1/up + h_m
        let a = 1.0 - 0.5 * stay_a - 0.5 * (1.0 - join);
        let h_m = (1.0 + 0.5 * (1.0 - stay_a) / up) / (a - 0.5 * (1.0 - stay_a));
        let h_bb = 1.0 / up + h_m;
        assert!((h[0] - h_bb).abs() / h_bb < 1e-10, "{} vs {h_bb}", h[0]);
        assert_eq!(h[3], 0.0);
    }

    #[test]
    fn unreachable_target_is_infinite() {
        let chain = build_chain(&k2(), &p3200(), Beta::Finite(1.0), &ChainKind::SingleVertex(0)).unwrap();
        let h = expected_hitting_times(&chain, |s| s.config == 3).unwrap();
        assert!(h[0].is_infinite());
        assert!(h[2].is_finite());
    }

    #[test]
    fn report_csv_rows() {
        let chain = build_chain(&k2(), &p3200(), Beta::Finite(1.0), &ChainKind::Random).unwrap();
        let mu = stationary(&chain).unwrap();
        let dg = resistance_digraph(&k2(), &p3200(), &ChainKind::Random).unwrap();
        let st = stable_states(&dg).unwrap();
        let csv = report_csv(chain.states(), 2, &k2(), &p3200(), Some(&mu), Some(&st));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], REPORT_CSV_HEADER);
        assert_eq!(lines.len(), 5);
        assert!(lines[4].starts_with("11,"));
        assert!(lines[4].ends_with(",3,2"));
    }
}
