//! The coordination game, configurations, the potential and the log-linear
//! update rule.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::graph::WeightedGraph;

/// Absolute tolerance under which two potential (or payoff) values count as equal.
pub const POTENTIAL_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    A,
    B,
}

impl Strategy {
    pub fn other(self) -> Strategy {
        match self {
            Strategy::A => Strategy::B,
            Strategy::B => Strategy::A,
        }
    }

    /// Canonical serialization symbol: A is `1`, B is `0`.
    pub fn bit(self) -> char {
        match self {
            Strategy::A => '1',
            Strategy::B => '0',
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::A => "A",
            Strategy::B => "B",
        })
    }
}

/// Symmetric 2x2 coordination game.
///
/// Row player's payoffs: `m[A][A] = a`, `m[A][B] = c`, `m[B][A] = d`,
/// `m[B][B] = b`. Construction enforces strict risk dominance of `(A, A)`,
/// i.e. `a - d > b - c > 0`.
///
/// The edge-sum potential is only an exact potential when `c == d`, so
/// [`PayoffMatrix::new`] insists on it. Matrices with `c != d` can be built
/// with [`PayoffMatrix::with_non_potential_override`]; Gibbs-based oracles
/// then refuse them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PayoffMatrix {
    a: f64,
    b: f64,
    c: f64,
    d: f64,
    potential: bool,
}

impl PayoffMatrix {
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Result<Self> {
        Self::validate(a, b, c, d)?;
        if c != d {
            return Err(invalid(format!(
                "c = {c} and d = {d} differ; the game has no edge-sum potential \
                 (use the non-potential override to accept it)"
            )));
        }
        Ok(PayoffMatrix {
            a,
            b,
            c,
            d,
            potential: true,
        })
    }

    pub fn with_non_potential_override(a: f64, b: f64, c: f64, d: f64) -> Result<Self> {
        Self::validate(a, b, c, d)?;
        Ok(PayoffMatrix {
            a,
            b,
            c,
            d,
            potential: c == d,
        })
    }

    fn validate(a: f64, b: f64, c: f64, d: f64) -> Result<()> {
        if ![a, b, c, d].iter().all(|x| x.is_finite()) {
            return Err(invalid("payoff entries must be finite"));
        }
        if !(a - d > b - c && b - c > 0.0) {
            return Err(invalid(format!(
                "risk dominance violated: need a - d > b - c > 0, got a - d = {}, b - c = {}",
                a - d,
                b - c
            )));
        }
        Ok(())
    }

    pub fn a(&self) -> f64 {
        self.a
    }
    pub fn b(&self) -> f64 {
        self.b
    }
    pub fn c(&self) -> f64 {
        self.c
    }
    pub fn d(&self) -> f64 {
        self.d
    }

    pub fn is_potential_game(&self) -> bool {
        self.potential
    }

    pub(crate) fn require_potential(&self, what: &'static str) -> Result<()> {
        if self.potential {
            Ok(())
        } else {
            Err(Error::NonPotential(what))
        }
    }

    /// Payoff to a player using `own` against a partner using `other`.
    #[inline]
    pub fn entry(&self, own: Strategy, other: Strategy) -> f64 {
        match (own, other) {
            (Strategy::A, Strategy::A) => self.a,
            (Strategy::A, Strategy::B) => self.c,
            (Strategy::B, Strategy::A) => self.d,
            (Strategy::B, Strategy::B) => self.b,
        }
    }

    /// `(b - c) / ((a - d) + (b - c))`, always in `(0, 1/2)`.
    pub fn r_star(&self) -> f64 {
        let bc = self.b - self.c;
        bc / ((self.a - self.d) + bc)
    }
}

/// Inverse noise level. `Infinite` is pure best response, with ties resolved
/// by keeping the current strategy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Beta {
    Finite(f64),
    Infinite,
}

impl Beta {
    pub fn finite(self) -> Option<f64> {
        match self {
            Beta::Finite(b) => Some(b),
            Beta::Infinite => None,
        }
    }
}

impl fmt::Display for Beta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Beta::Finite(b) => write!(f, "{b}"),
            Beta::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Beta {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("inf") || s.eq_ignore_ascii_case("infinity") {
            return Ok(Beta::Infinite);
        }
        let b: f64 = s
            .parse()
            .map_err(|_| invalid(format!("beta: cannot parse {s:?}")))?;
        ModelParams::new(Beta::Finite(b)).map(|p| p.beta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelParams {
    pub beta: Beta,
}

impl ModelParams {
    pub fn new(beta: Beta) -> Result<Self> {
        if let Beta::Finite(b) = beta {
            if !(b >= 0.0) || b.is_infinite() {
                return Err(invalid(format!("beta must be finite and >= 0, got {b}")));
            }
        }
        Ok(ModelParams { beta })
    }

    pub fn finite(beta: f64) -> Result<Self> {
        Self::new(Beta::Finite(beta))
    }

    /// `exp(-beta)`; zero for infinite beta.
    pub fn epsilon(&self) -> f64 {
        match self.beta {
            Beta::Finite(b) => (-b).exp(),
            Beta::Infinite => 0.0,
        }
    }
}

pub fn epsilon_from_beta(beta: f64) -> Result<f64> {
    if !(beta >= 0.0) || beta.is_infinite() {
        return Err(invalid(format!("beta must be finite and >= 0, got {beta}")));
    }
    Ok((-beta).exp())
}

pub fn beta_from_epsilon(epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(invalid(format!("epsilon must lie in (0, 1], got {epsilon}")));
    }
    // -ln(1) is -0.0
    Ok((-epsilon.ln()).max(0.0))
}

/// Strategy assignment, indexed by vertex id.
///
/// The canonical text form is a bitstring with vertex 0 leftmost and `1` for
/// A. The packed integer form used by the exact chains puts vertex 0 in the
/// least significant bit, again with A as 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Configuration {
    states: Vec<Strategy>,
}

impl Configuration {
    pub fn uniform(n: usize, s: Strategy) -> Self {
        Configuration { states: vec![s; n] }
    }

    pub fn all_a(n: usize) -> Self {
        Self::uniform(n, Strategy::A)
    }

    pub fn all_b(n: usize) -> Self {
        Self::uniform(n, Strategy::B)
    }

    pub fn from_states(states: Vec<Strategy>) -> Self {
        Configuration { states }
    }

    /// Unpacks the integer form. Panics if `n > 64`.
    pub fn from_index(index: u64, n: usize) -> Self {
        assert!(n <= 64, "packed configurations hold at most 64 vertices");
        let states = (0..n)
            .map(|i| {
                if index >> i & 1 == 1 {
                    Strategy::A
                } else {
                    Strategy::B
                }
            })
            .collect();
        Configuration { states }
    }

    /// Packed integer form. Panics if the configuration has more than 64 vertices.
    pub fn index(&self) -> u64 {
        assert!(self.states.len() <= 64);
        self.states
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == Strategy::A)
            .fold(0u64, |acc, (i, _)| acc | 1 << i)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> Strategy {
        self.states[i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, s: Strategy) {
        self.states[i] = s;
    }

    pub fn with(&self, i: usize, s: Strategy) -> Self {
        let mut c = self.clone();
        c.set(i, s);
        c
    }

    pub fn flipped(&self, i: usize) -> Self {
        self.with(i, self.get(i).other())
    }

    pub fn states(&self) -> &[Strategy] {
        &self.states
    }

    pub fn count_a(&self) -> usize {
        self.states.iter().filter(|s| **s == Strategy::A).count()
    }

    pub fn hamming(&self, other: &Configuration) -> usize {
        self.states
            .iter()
            .zip(&other.states)
            .filter(|(x, y)| x != y)
            .count()
    }

    pub fn to_bitstring(&self) -> String {
        self.states.iter().map(|s| s.bit()).collect()
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_bitstring())
    }
}

impl FromStr for Configuration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|ch| match ch {
                '1' => Ok(Strategy::A),
                '0' => Ok(Strategy::B),
                _ => Err(invalid(format!("configuration bitstring has bad symbol {ch:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Configuration::from_states)
    }
}

/// `nu_i(z, x_{-i})`: what vertex `i` earns against its neighbors by playing `z`.
pub fn node_payoff(
    graph: &WeightedGraph,
    config: &Configuration,
    i: usize,
    z: Strategy,
    payoff: &PayoffMatrix,
) -> f64 {
    graph
        .neighbors(i)
        .iter()
        .map(|&(j, w)| w * payoff.entry(z, config.get(j)))
        .sum()
}

/// Edge-sum potential. Each undirected edge is evaluated once, in canonical
/// endpoint order (smaller vertex id first).
pub fn potential(graph: &WeightedGraph, config: &Configuration, payoff: &PayoffMatrix) -> f64 {
    graph
        .edges()
        .iter()
        .map(|e| e.weight * payoff.entry(config.get(e.lo), config.get(e.hi)))
        .sum()
}

/// Potential change caused by setting vertex `i` to `to`, evaluated in O(deg i).
pub fn potential_delta(
    graph: &WeightedGraph,
    config: &Configuration,
    i: usize,
    to: Strategy,
    payoff: &PayoffMatrix,
) -> f64 {
    let from = config.get(i);
    if from == to {
        return 0.0;
    }
    graph
        .neighbors(i)
        .iter()
        .map(|&(j, w)| {
            let xj = config.get(j);
            if i < j {
                w * (payoff.entry(to, xj) - payoff.entry(from, xj))
            } else {
                w * (payoff.entry(xj, to) - payoff.entry(xj, from))
            }
        })
        .sum()
}

/// Probabilities of the scheduled vertex choosing A and B.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateProbs {
    pub a: f64,
    pub b: f64,
}

impl UpdateProbs {
    pub fn of(&self, s: Strategy) -> f64 {
        match s {
            Strategy::A => self.a,
            Strategy::B => self.b,
        }
    }
}

/// Log-linear choice between two payoffs. `current` only matters for the tie
/// at infinite beta.
pub fn log_linear(nu_a: f64, nu_b: f64, beta: Beta, current: Strategy) -> UpdateProbs {
    let diff = nu_a - nu_b;
    match beta {
        Beta::Infinite => {
            let choice = if diff > POTENTIAL_TOL {
                Strategy::A
            } else if diff < -POTENTIAL_TOL {
                Strategy::B
            } else {
                current
            };
            match choice {
                Strategy::A => UpdateProbs { a: 1.0, b: 0.0 },
                Strategy::B => UpdateProbs { a: 0.0, b: 1.0 },
            }
        }
        Beta::Finite(beta) => {
            let x = beta * diff;
            if x == 0.0 {
                return UpdateProbs { a: 0.5, b: 0.5 };
            }
            // small = e^{-|x|} / (1 + e^{-|x|}); the larger one is its complement
            let t = (-x.abs()).exp();
            let small = t / (1.0 + t);
            let large = 1.0 - small;
            if x > 0.0 {
                UpdateProbs { a: large, b: small }
            } else {
                UpdateProbs { a: small, b: large }
            }
        }
    }
}

pub fn update_distribution(
    graph: &WeightedGraph,
    config: &Configuration,
    i: usize,
    params: &ModelParams,
    payoff: &PayoffMatrix,
) -> UpdateProbs {
    let nu_a = node_payoff(graph, config, i, Strategy::A, payoff);
    let nu_b = node_payoff(graph, config, i, Strategy::B, payoff);
    log_linear(nu_a, nu_b, params.beta, config.get(i))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Family;
    use proptest::prelude::*;
    use crate::model::Strategy;

    fn p3200() -> PayoffMatrix {
        PayoffMatrix::new(3.0, 2.0, 0.0, 0.0).unwrap()
    }

    fn cfg(s: &str) -> Configuration {
        s.parse().unwrap()
    }

    #[test]
    fn r_star_values() {
        assert!((p3200().r_star() - 0.4).abs() < 1e-15);
        let p = PayoffMatrix::new(2.0, 1.0, 0.0, 0.0).unwrap();
        assert!((p.r_star() - 1.0 / 3.0).abs() < 1e-15);
        let mut prev = 0.0;
        for t in [1.0, 0.1, 1e-3, 1e-6] {
            let r = PayoffMatrix::new(1.0 + t, 1.0, 0.0, 0.0).unwrap().r_star();
            assert!(r < 0.5 && r > prev);
            prev = r;
        }
        assert!(0.5 - prev < 1e-6);
    }

    #[test]
    fn risk_dominance_is_enforced() {
        let err = PayoffMatrix::new(1.0, 2.0, 0.0, 0.0).unwrap_err();
        assert!(err.to_string().contains("risk dominance"));
        assert!(PayoffMatrix::new(2.0, 2.0, 0.0, 0.0).is_err());
        assert!(PayoffMatrix::new(3.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn non_potential_needs_override() {
        assert!(PayoffMatrix::new(4.0, 2.0, 1.0, 0.0).is_err());
        let p = PayoffMatrix::with_non_potential_override(4.0, 2.0, 1.0, 0.0).unwrap();
        assert!(!p.is_potential_game());
        assert!(p.require_potential("gibbs").is_err());
    }

    #[test]
    fn node_payoff_examples() {
        let k2 = Family::Complete(2).build().unwrap();
        let k3 = Family::Complete(3).build().unwrap();
        let p = p3200();
        assert_eq!(node_payoff(&k2, &cfg("00"), 0, Strategy::B, &p), 2.0);
        assert_eq!(node_payoff(&k2, &cfg("10"), 0, Strategy::A, &p), 0.0);
        assert_eq!(node_payoff(&k3, &cfg("110"), 0, Strategy::A, &p), 3.0);
        let isolated = WeightedGraph::new(3, &[(0, 1, 1.0)]).unwrap();
        assert_eq!(node_payoff(&isolated, &cfg("000"), 2, Strategy::B, &p), 0.0);
    }

    #[test]
    fn potential_examples() {
        let k3 = Family::Complete(3).build().unwrap();
        let k2 = Family::Complete(2).build().unwrap();
        let p = p3200();
        assert_eq!(potential(&k3, &cfg("111"), &p), 9.0);
        assert_eq!(potential(&k3, &cfg("000"), &p), 6.0);
        assert_eq!(potential(&k2, &cfg("10"), &p), 0.0);
    }

    #[test]
    fn mixed_edges_use_canonical_order() {
        let k2 = Family::Complete(2).build().unwrap();
        let p = PayoffMatrix::with_non_potential_override(4.0, 2.0, 1.0, 0.0).unwrap();
        // edge (0, 1): m[x0][x1]
        assert_eq!(potential(&k2, &cfg("10"), &p), 1.0);
        assert_eq!(potential(&k2, &cfg("01"), &p), 0.0);
    }

    #[test]
    fn update_distribution_examples() {
        let k2 = Family::Complete(2).build().unwrap();
        let p = p3200();
        let pr = update_distribution(&k2, &cfg("00"), 0, &ModelParams::finite(0.0).unwrap(), &p);
        assert_eq!((pr.a, pr.b), (0.5, 0.5));

        let pr = log_linear(3.0, 2.0, Beta::Finite(1.0), Strategy::B);
        assert!((pr.a - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert!((pr.a - 0.73106).abs() < 1e-5);

        let pr = update_distribution(&k2, &cfg("00"), 0, &ModelParams::finite(1e4).unwrap(), &p);
        assert_eq!(pr.a, 0.0);
        let pr = update_distribution(&k2, &cfg("00"), 0, &ModelParams::new(Beta::Infinite).unwrap(), &p);
        assert_eq!((pr.a, pr.b), (0.0, 1.0));
    }

    #[test]
    fn infinite_beta_tie_keeps_current() {
        for s in [Strategy::A, Strategy::B] {
            let pr = log_linear(1.0, 1.0, Beta::Infinite, s);
            assert_eq!(pr.of(s), 1.0);
        }
    }

    #[test]
    fn epsilon_beta_roundtrip() {
        assert_eq!(epsilon_from_beta(0.0).unwrap(), 1.0);
        assert_eq!(beta_from_epsilon(1.0).unwrap(), 0.0);
        assert!((epsilon_from_beta(2f64.ln()).unwrap() - 0.5).abs() < 1e-15);
        assert!(beta_from_epsilon(0.0).is_err());
        assert!(beta_from_epsilon(1.5).is_err());
        assert!(epsilon_from_beta(-1.0).is_err());
        assert!(ModelParams::finite(-0.5).is_err());
    }

    #[test]
    fn bitstring_and_index() {
        let c = cfg("1011");
        assert_eq!(c.index(), 0b1101);
        assert_eq!(Configuration::from_index(0b1101, 4), c);
        assert_eq!(c.to_bitstring(), "1011");
        assert!("10x".parse::<Configuration>().is_err());
    }

    /// Every graph on <= 6 vertices reachable from the family generators plus a
    /// few irregular weighted ones.
    fn small_graphs() -> Vec<WeightedGraph> {
        let mut v: Vec<WeightedGraph> = [
            Family::Complete(2),
            Family::Complete(4),
            Family::Cycle(5),
            Family::Line(6),
            Family::Grid(2, 3),
        ]
        .iter()
        .map(|f| f.build().unwrap())
        .collect();
        v.push(WeightedGraph::new(5, &[(0, 1, 0.5), (1, 2, 2.0), (0, 3, 1.5), (3, 4, 1.0), (1, 4, 0.25)]).unwrap());
        v.push(WeightedGraph::new(6, &[(0, 5, 3.0), (2, 4, 1.0), (1, 3, 0.7)]).unwrap());
        v
    }

    #[test]
    fn potential_game_identity_exhaustive() {
        for p in [p3200(), PayoffMatrix::new(5.0, 1.5, -0.5, -0.5).unwrap()] {
            for g in small_graphs() {
                let n = g.n();
                for idx in 0..1u64 << n {
                    let x = Configuration::from_index(idx, n);
                    for i in 0..n {
                        let lhs = node_payoff(&g, &x, i, Strategy::A, &p)
                            - node_payoff(&g, &x, i, Strategy::B, &p);
                        let rhs = potential(&g, &x.with(i, Strategy::A), &p)
                            - potential(&g, &x.with(i, Strategy::B), &p);
                        assert!((lhs - rhs).abs() < 1e-12);
                        let delta = potential_delta(&g, &x, i, x.get(i).other(), &p);
                        let direct = potential(&g, &x.flipped(i), &p) - potential(&g, &x, &p);
                        assert!((delta - direct).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn update_sums_to_one() {
        for beta in [0.0, 1.0, 10.0, 100.0, 1e4] {
            for (na, nb) in [(3.0, 2.0), (0.0, 4.0), (1.5, 1.5), (-2.0, 7.0)] {
                let pr = log_linear(na, nb, Beta::Finite(beta), Strategy::A);
                assert!((pr.a + pr.b - 1.0).abs() <= f64::EPSILON);
            }
        }
    }

    proptest! {
        #[test]
        fn log_odds_identity(na in -20.0f64..20.0, nb in -20.0f64..20.0, beta in 0.0f64..30.0) {
            let pr = log_linear(na, nb, Beta::Finite(beta), Strategy::B);
            prop_assume!(pr.a > 1e-300 && pr.b > 1e-300);
            prop_assert!(((pr.a / pr.b).ln() - beta * (na - nb)).abs() < 1e-9);
        }

        #[test]
        fn monotone_in_beta(na in -10.0f64..10.0, nb in -10.0f64..10.0, b1 in 0.0f64..20.0, b2 in 0.0f64..20.0) {
            let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
            let p_lo = log_linear(na, nb, Beta::Finite(lo), Strategy::A).a;
            let p_hi = log_linear(na, nb, Beta::Finite(hi), Strategy::A).a;
            if na > nb {
                prop_assert!(p_hi >= p_lo);
            } else if na < nb {
                prop_assert!(p_hi <= p_lo);
            } else {
                prop_assert_eq!(p_lo, 0.5);
                prop_assert_eq!(p_hi, 0.5);
            }
        }

        #[test]
        fn bitstring_roundtrip(idx in 0u64..1 << 20, n in 20usize..=24) {
            let c = Configuration::from_index(idx, n);
            prop_assert_eq!(c.to_bitstring().parse::<Configuration>().unwrap().index(), idx);
        }
    }
}
