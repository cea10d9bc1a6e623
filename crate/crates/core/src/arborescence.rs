//! Minimum-cost spanning arborescences (Chu-Liu/Edmonds, contraction form).

/// Cost of the cheapest arborescence rooted at `root` whose arcs point away
/// from the root, over `arcs = (from, to, cost)`. `None` if some vertex is
/// unreachable from `root`. Self-loops are ignored. Runs in O(V E).
pub fn min_out_arborescence(n: usize, arcs: &[(usize, usize, f64)], root: usize) -> Option<f64> {
    assert!(root < n, "root {root} outside 0..{n}");
    let mut edges: Vec<(usize, usize, f64)> = arcs.iter().copied().filter(|&(u, v, _)| u != v).collect();
    let mut n = n;
    let mut root = root;
    let mut total = 0.0;
    loop {
        // cheapest incoming arc per vertex
        let mut best_in = vec![f64::INFINITY; n];
        let mut pred = vec![usize::MAX; n];
        for &(u, v, w) in &edges {
            if u != v && w < best_in[v] {
                best_in[v] = w;
                pred[v] = u;
            }
        }
        if (0..n).any(|v| v != root && pred[v] == usize::MAX) {
            return None;
        }
        best_in[root] = 0.0;

        // find cycles among the chosen arcs
        let mut comp = vec![usize::MAX; n];
        let mut mark = vec![usize::MAX; n];
        let mut count = 0;
        for v in 0..n {
            total += best_in[v];
            let mut x = v;
            while mark[x] != v && comp[x] == usize::MAX && x != root {
                mark[x] = v;
                x = pred[x];
            }
            if x != root && comp[x] == usize::MAX {
                let mut y = pred[x];
                while y != x {
                    comp[y] = count;
                    y = pred[y];
                }
                comp[x] = count;
                count += 1;
            }
        }
        if count == 0 {
            return Some(total);
        }
        for c in comp.iter_mut().filter(|c| **c == usize::MAX) {
            *c = count;
            count += 1;
        }

        // contract: reweight arcs entering a cycle by the arc they would replace
        edges = edges
            .into_iter()
            .filter_map(|(u, v, w)| {
                let (cu, cv) = (comp[u], comp[v]);
                (cu != cv).then(|| (cu, cv, w - best_in[v]))
            })
            .collect();
        n = count;
        root = comp[root];
    }
}

/// Cost of the cheapest spanning tree in which every vertex has a directed
/// path *to* `root` along `arcs`. `None` if some vertex cannot reach `root`.
pub fn min_in_arborescence(n: usize, arcs: &[(usize, usize, f64)], root: usize) -> Option<f64> {
    let reversed: Vec<_> = arcs.iter().map(|&(u, v, w)| (v, u, w)).collect();
    min_out_arborescence(n, &reversed, root)
}
