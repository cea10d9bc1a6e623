//! Weighted undirected graphs, the standard families, the text file format,
//! and close-knittedness.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};

/// Undirected edge stored with `lo < hi`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub lo: usize,
    pub hi: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightedGraph {
    n: usize,
    edges: Vec<Edge>,
    adj: Vec<Vec<(usize, f64)>>,
    label_offset: i64,
}

impl WeightedGraph {
    /// Builds a graph from `(h, k, w)` triples. Rejects self-loops, duplicate
    /// edges (in either orientation), out-of-range endpoints and non-positive
    /// weights.
    pub fn new(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut stored = Vec::with_capacity(edges.len());
        let mut adj = vec![Vec::new(); n];
        for &(h, k, w) in edges {
            if h >= n || k >= n {
                return Err(invalid(format!("edge ({h}, {k}) has an endpoint outside 0..{n}")));
            }
            if h == k {
                return Err(invalid(format!("self-loop at vertex {h}")));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(invalid(format!("edge ({h}, {k}) has non-positive weight {w}")));
            }
            let (lo, hi) = (h.min(k), h.max(k));
            if !seen.insert((lo, hi)) {
                return Err(invalid(format!("duplicate edge ({lo}, {hi})")));
            }
            stored.push(Edge { lo, hi, weight: w });
            adj[lo].push((hi, w));
            adj[hi].push((lo, w));
        }
        for row in &mut adj {
            row.sort_by_key(|&(j, _)| j);
        }
        Ok(WeightedGraph {
            n,
            edges: stored,
            adj,
            label_offset: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Neighbors of `v` with edge weights, sorted by vertex id.
    #[inline]
    pub fn neighbors(&self, v: usize) -> &[(usize, f64)] {
        &self.adj[v]
    }

    /// Number of incident edges (weights ignored).
    pub fn degree(&self, v: usize) -> usize {
        self.adj[v].len()
    }

    pub fn has_edge(&self, h: usize, k: usize) -> bool {
        self.adj[h].binary_search_by_key(&k, |&(j, _)| j).is_ok()
    }

    /// Display label of vertex `v`. Lines are labelled `-n..=n` around the
    /// center; everything else uses the vertex id.
    pub fn label(&self, v: usize) -> i64 {
        v as i64 + self.label_offset
    }

    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return true;
        }
        let mut seen = vec![false; self.n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &(u, _) in &self.adj[v] {
                if !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Serializes to the line-oriented text format (`n m` header, then `h k w`).
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.n, self.edges.len());
        for e in &self.edges {
            out.push_str(&format!("{} {} {}\n", e.lo, e.hi, e.weight));
        }
        out
    }
}

/// Contents of a graph file: the graph plus an optional row-stochastic
/// contagion matrix given after a `contagion:` line.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphFile {
    pub graph: WeightedGraph,
    pub contagion: Option<Vec<Vec<f64>>>,
}

impl GraphFile {
    pub fn to_text(&self) -> String {
        let mut out = self.graph.to_text();
        if let Some(rows) = &self.contagion {
            out.push_str("contagion:\n");
            for row in rows {
                let cells: Vec<String> = row.iter().map(|p| p.to_string()).collect();
                out.push_str(&cells.join(" "));
                out.push('\n');
            }
        }
        out
    }
}

impl FromStr for GraphFile {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());

        let perr = |line: usize, msg: String| Error::Parse { line, msg };

        let (hline, header) = lines
            .next()
            .ok_or_else(|| perr(0, "empty graph file".into()))?;
        let head: Vec<&str> = header.split_whitespace().collect();
        let [n, m] = head[..] else {
            return Err(perr(hline, format!("expected header \"n m\", got {header:?}")));
        };
        let n: usize = n.parse().map_err(|_| perr(hline, format!("bad vertex count {n:?}")))?;
        let m: usize = m.parse().map_err(|_| perr(hline, format!("bad edge count {m:?}")))?;

        let mut edges = Vec::with_capacity(m);
        for _ in 0..m {
            let (ln, l) = lines
                .next()
                .ok_or_else(|| perr(0, format!("expected {m} edge lines")))?;
            let parts: Vec<&str> = l.split_whitespace().collect();
            let [h, k, w] = parts[..] else {
                return Err(perr(ln, format!("expected \"h k w\", got {l:?}")));
            };
            let h = h.parse().map_err(|_| perr(ln, format!("bad vertex {h:?}")))?;
            let k = k.parse().map_err(|_| perr(ln, format!("bad vertex {k:?}")))?;
            let w = w.parse().map_err(|_| perr(ln, format!("bad weight {w:?}")))?;
            edges.push((h, k, w));
        }
        let graph = WeightedGraph::new(n, &edges)?;

        let contagion = match lines.next() {
            None => None,
            Some((ln, "contagion:")) => {
                let mut rows = Vec::with_capacity(n);
                for _ in 0..n {
                    let (rl, l) = lines
                        .next()
                        .ok_or_else(|| perr(ln, format!("contagion section needs {n} rows")))?;
                    let row = l
                        .split_whitespace()
                        .map(|x| x.parse::<f64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| perr(rl, format!("bad probability row {l:?}")))?;
                    if row.len() != n {
                        return Err(perr(rl, format!("contagion row has {} entries, need {n}", row.len())));
                    }
                    rows.push(row);
                }
                Some(rows)
            }
            Some((ln, l)) => return Err(perr(ln, format!("unexpected trailing line {l:?}"))),
        };
        if let Some((ln, l)) = lines.next() {
            return Err(perr(ln, format!("unexpected trailing line {l:?}")));
        }
        Ok(GraphFile { graph, contagion })
    }
}

/// Unit-weight graph families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    /// Cycle `C_n`, `n >= 3`.
    Cycle(usize),
    /// Path on `n` vertices, labelled symmetrically around the center.
    Line(usize),
    Complete(usize),
    /// `rows x cols` grid.
    Grid(usize, usize),
}

impl Family {
    pub fn build(&self) -> Result<WeightedGraph> {
        match *self {
            Family::Cycle(n) => {
                if n < 3 {
                    return Err(invalid(format!("cycle needs at least 3 vertices, got {n}")));
                }
                let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n, 1.0)).collect();
                WeightedGraph::new(n, &edges)
            }
            Family::Line(n) => {
                if n == 0 {
                    return Err(invalid("line of size 0"));
                }
                let edges: Vec<_> = (1..n).map(|i| (i - 1, i, 1.0)).collect();
                let mut g = WeightedGraph::new(n, &edges)?;
                g.label_offset = -(((n - 1) / 2) as i64);
                Ok(g)
            }
            Family::Complete(n) => {
                if n == 0 {
                    return Err(invalid("complete graph of size 0"));
                }
                let mut edges = Vec::new();
                for h in 0..n {
                    for k in h + 1..n {
                        edges.push((h, k, 1.0));
                    }
                }
                WeightedGraph::new(n, &edges)
            }
            Family::Grid(r, c) => {
                if r == 0 || c == 0 {
                    return Err(invalid("grid with a zero dimension"));
                }
                let id = |i: usize, j: usize| i * c + j;
                let mut edges = Vec::new();
                for i in 0..r {
                    for j in 0..c {
                        if j + 1 < c {
                            edges.push((id(i, j), id(i, j + 1), 1.0));
                        }
                        if i + 1 < r {
                            edges.push((id(i, j), id(i + 1, j), 1.0));
                        }
                    }
                }
                WeightedGraph::new(r * c, &edges)
            }
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Family::Cycle(_) => "cycle",
            Family::Line(_) => "line",
            Family::Complete(_) => "complete",
            Family::Grid(..) => "grid",
        }
    }

    /// Same family at a different size (grids become square).
    pub fn with_size(&self, n: usize) -> Family {
        match self {
            Family::Cycle(_) => Family::Cycle(n),
            Family::Line(_) => Family::Line(n),
            Family::Complete(_) => Family::Complete(n),
            Family::Grid(..) => Family::Grid(n, n),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Cycle(n) => write!(f, "cycle:{n}"),
            Family::Line(n) => write!(f, "line:{n}"),
            Family::Complete(n) => write!(f, "complete:{n}"),
            Family::Grid(r, c) => write!(f, "grid:{r}x{c}"),
        }
    }
}

impl FromStr for Family {
    type Err = Error;

    /// `cycle:8`, `line:5`, `complete:4`, `grid:3x4`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, size) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| invalid(format!("graph family {s:?}: expected kind:size")))?;
        let num = |x: &str| {
            x.trim()
                .parse::<usize>()
                .map_err(|_| invalid(format!("graph family {s:?}: bad size {x:?}")))
        };
        match kind.trim() {
            "cycle" => Ok(Family::Cycle(num(size)?)),
            "line" => Ok(Family::Line(num(size)?)),
            "complete" => Ok(Family::Complete(num(size)?)),
            "grid" => {
                let (r, c) = size
                    .split_once('x')
                    .ok_or_else(|| invalid(format!("grid size {size:?}: expected RxC")))?;
                Ok(Family::Grid(num(r)?, num(c)?))
            }
            other => Err(invalid(format!("unknown graph family {other:?}"))),
        }
    }
}

/// Largest set handled by the exhaustive subset scan.
pub const MAX_CLOSE_KNIT_SET: usize = 24;

/// Result of the close-knit subset scan over `set`.
#[derive(Clone, Debug, PartialEq)]
pub struct CloseKnitReport {
    pub set: Vec<usize>,
    pub min_ratio: f64,
    pub witness: Vec<usize>,
}

impl CloseKnitReport {
    pub fn is_close_knit(&self, r: f64) -> bool {
        self.min_ratio >= r - 1e-12
    }
}

fn member_mask(n: usize, vs: &[usize], what: &str) -> Result<Vec<bool>> {
    let mut mask = vec![false; n];
    for &v in vs {
        if v >= n {
            return Err(invalid(format!("{what} contains vertex {v} outside 0..{n}")));
        }
        mask[v] = true;
    }
    Ok(mask)
}

/// `e(S', S)`: edges with one endpoint in `S'` and the other in `S`, each
/// unordered edge counted once (so an edge inside `S'` counts once).
pub fn boundary_count(graph: &WeightedGraph, s_prime: &[usize], s: &[usize]) -> Result<usize> {
    if s_prime.is_empty() {
        return Err(invalid("S' must be nonempty"));
    }
    let in_s = member_mask(graph.n(), s, "S")?;
    let in_sp = member_mask(graph.n(), s_prime, "S'")?;
    if let Some(v) = s_prime.iter().find(|&&v| !in_s[v]) {
        return Err(invalid(format!("S' is not a subset of S (vertex {v})")));
    }
    Ok(graph
        .edges()
        .iter()
        .filter(|e| in_s[e.lo] && in_s[e.hi] && (in_sp[e.lo] || in_sp[e.hi]))
        .count())
}

/// Minimum of `e(S', S) / sum_{i in S'} deg(i)` over nonempty `S' ⊆ S`, by
/// exhaustive scan. Ties keep the first minimizer in subset-mask order.
pub fn close_knit_ratio(graph: &WeightedGraph, set: &[usize]) -> Result<CloseKnitReport> {
    let mut s: Vec<usize> = set.to_vec();
    s.sort_unstable();
    s.dedup();
    if s.is_empty() {
        return Err(invalid("close-knit set must be nonempty"));
    }
    if s.len() > MAX_CLOSE_KNIT_SET {
        return Err(Error::Capacity {
            what: "close-knit subset scan",
            needed: s.len() as u64,
            bound: MAX_CLOSE_KNIT_SET as u64,
        });
    }
    member_mask(graph.n(), &s, "S")?;
    let k = s.len();
    let pos = |v: usize| s.binary_search(&v).ok();
    // neighbors inside S as a bitmask over positions
    let inner: Vec<u32> = s
        .iter()
        .map(|&v| {
            graph
                .neighbors(v)
                .iter()
                .filter_map(|&(u, _)| pos(u))
                .fold(0u32, |m, p| m | 1 << p)
        })
        .collect();
    let deg: Vec<u64> = s.iter().map(|&v| graph.degree(v) as u64).collect();
    let full: u32 = if k == 32 { u32::MAX } else { (1u32 << k) - 1 };
    let internal = |t: u32| -> u64 {
        let twice: u32 = (0..k)
            .filter(|&i| t >> i & 1 == 1)
            .map(|i| (inner[i] & t).count_ones())
            .sum();
        u64::from(twice / 2)
    };
    let total_internal = internal(full);

    // (numerator, denominator, mask) of the best ratio so far
    let mut best: Option<(u64, u64, u32)> = None;
    for t in 1..=full {
        let d: u64 = (0..k).filter(|&i| t >> i & 1 == 1).map(|i| deg[i]).sum();
        if d == 0 {
            return Err(invalid(format!(
                "ratio undefined: subset {:?} has zero total degree",
                mask_members(&s, t)
            )));
        }
        let e = total_internal - internal(full & !t);
        let better = match best {
            None => true,
            Some((be, bd, _)) => u128::from(e) * u128::from(bd) < u128::from(be) * u128::from(d),
        };
        if better {
            best = Some((e, d, t));
        }
    }
    let (e, d, t) = best.expect("at least one subset");
    Ok(CloseKnitReport {
        min_ratio: e as f64 / d as f64,
        witness: mask_members(&s, t),
        set: s,
    })
}

fn mask_members(s: &[usize], t: u32) -> Vec<usize> {
    s.iter()
        .enumerate()
        .filter(|(i, _)| t >> i & 1 == 1)
        .map(|(_, &v)| v)
        .collect()
}

/// Default per-vertex enumeration budget for [`is_rk_close_knit`].
pub const DEFAULT_SUBSET_BUDGET: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq)]
pub enum VertexSearch {
    Found(CloseKnitReport),
    /// Every connected size-k set containing the vertex was scanned.
    NotFound,
    /// Budget ran out first.
    Exhausted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloseKnitVerdict {
    Yes,
    No,
    Indeterminate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CloseKnitSearch {
    pub verdict: CloseKnitVerdict,
    pub per_vertex: Vec<VertexSearch>,
}

/// Is every vertex in some connected `r`-close-knit set of exactly `k`
/// vertices? Answers `Indeterminate` only when no vertex is a definite
/// failure and at least one search ran out of budget.
pub fn is_rk_close_knit(graph: &WeightedGraph, r: f64, k: usize, budget: u64) -> Result<CloseKnitSearch> {
    if k == 0 || k > graph.n() {
        return Err(invalid(format!("k must lie in 1..={}, got {k}", graph.n())));
    }
    if k > MAX_CLOSE_KNIT_SET {
        return Err(Error::Capacity {
            what: "close-knit subset scan",
            needed: k as u64,
            bound: MAX_CLOSE_KNIT_SET as u64,
        });
    }
    let per_vertex = (0..graph.n())
        .into_par_iter()
        .map(|v| search_vertex(graph, v, r, k, budget))
        .collect::<Result<Vec<_>>>()?;
    let verdict = if per_vertex.contains(&VertexSearch::NotFound) {
        CloseKnitVerdict::No
    } else if per_vertex.iter().all(|s| matches!(s, VertexSearch::Found(_))) {
        CloseKnitVerdict::Yes
    } else {
        CloseKnitVerdict::Indeterminate
    };
    Ok(CloseKnitSearch { verdict, per_vertex })
}

fn search_vertex(graph: &WeightedGraph, v: usize, r: f64, k: usize, budget: u64) -> Result<VertexSearch> {
    let mut found = None;
    let mut failure = None;
    let complete = for_each_connected_set(graph, v, k, budget, |set| {
        match close_knit_ratio(graph, set) {
            Ok(rep) if rep.is_close_knit(r) => {
                found = Some(rep);
                true
            }
            Ok(_) => false,
            // zero-degree subsets only occur for k = 1 on an isolated vertex
            Err(e) => {
                failure = Some(e);
                true
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(match (found, complete) {
        (Some(rep), _) => VertexSearch::Found(rep),
        (None, true) => VertexSearch::NotFound,
        (None, false) => VertexSearch::Exhausted,
    })
}

/// Visits every connected vertex set of size `k` containing `root`, each
/// exactly once, growing sets from the smallest available frontier vertex.
/// `visit` returns true to stop early. Returns false iff the budget ran out.
pub fn for_each_connected_set(
    graph: &WeightedGraph,
    root: usize,
    k: usize,
    budget: u64,
    mut visit: impl FnMut(&[usize]) -> bool,
) -> bool {
    struct Walk<'g, F> {
        graph: &'g WeightedGraph,
        k: usize,
        budget: u64,
        visited: u64,
        members: Vec<usize>,
        in_set: Vec<bool>,
        banned: Vec<bool>,
        visit: F,
    }

    enum Flow {
        Continue,
        Stop,
        OutOfBudget,
    }

    impl<F: FnMut(&[usize]) -> bool> Walk<'_, F> {
        fn grow(&mut self, frontier: BTreeSet<usize>) -> Flow {
            if self.members.len() == self.k {
                if self.visited >= self.budget {
                    return Flow::OutOfBudget;
                }
                self.visited += 1;
                let mut sorted = self.members.clone();
                sorted.sort_unstable();
                return if (self.visit)(&sorted) { Flow::Stop } else { Flow::Continue };
            }
            let mut frontier = frontier;
            let mut banned_here = Vec::new();
            let mut flow = Flow::Continue;
            while let Some(w) = frontier.pop_first() {
                let mut next = frontier.clone();
                for &(u, _) in self.graph.neighbors(w) {
                    if !self.in_set[u] && !self.banned[u] {
                        next.insert(u);
                    }
                }
                self.members.push(w);
                self.in_set[w] = true;
                flow = self.grow(next);
                self.members.pop();
                self.in_set[w] = false;
                if !matches!(flow, Flow::Continue) {
                    break;
                }
                self.banned[w] = true;
                banned_here.push(w);
            }
            for w in banned_here {
                self.banned[w] = false;
            }
            flow
        }
    }

    let n = graph.n();
    let mut walk = Walk {
        graph,
        k,
        budget,
        visited: 0,
        members: vec![root],
        in_set: vec![false; n],
        banned: vec![false; n],
        visit: &mut visit,
    };
    walk.in_set[root] = true;
    let frontier: BTreeSet<usize> = graph.neighbors(root).iter().map(|&(u, _)| u).collect();
    !matches!(walk.grow(frontier), Flow::OutOfBudget)
}
