//! Fill-reducing orderings on the adjacency graph of a symmetric matrix.
//!
//! Every ordering returns `perm` with `perm[new] = old`.

use std::collections::{BTreeSet, VecDeque};

/// Parts at or below this size are ordered by minimum degree.
const LEAF_SIZE: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderingKind {
    NestedDissection,
    MinimumDegree,
}

impl OrderingKind {
    pub fn name(self) -> &'static str {
        match self {
            OrderingKind::NestedDissection => "nested-dissection",
            OrderingKind::MinimumDegree => "minimum-degree",
        }
    }
}

pub fn compute(adj: &[Vec<usize>]) -> (Vec<usize>, OrderingKind) {
    let nodes: Vec<usize> = (0..adj.len()).collect();
    if adj.len() <= LEAF_SIZE {
        return (minimum_degree(adj, &nodes), OrderingKind::MinimumDegree);
    }
    (nested_dissection(adj), OrderingKind::NestedDissection)
}

pub fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

/// Exact minimum-degree elimination restricted to the induced subgraph on `nodes`.
/// Ties go to the smallest index.
pub fn minimum_degree(adj: &[Vec<usize>], nodes: &[usize]) -> Vec<usize> {
    let mut local = vec![usize::MAX; adj.len()];
    for (k, &v) in nodes.iter().enumerate() {
        local[v] = k;
    }
    let mut graph: Vec<BTreeSet<usize>> = nodes
        .iter()
        .map(|&v| {
            adj[v]
                .iter()
                .filter_map(|&u| (u != v && local[u] != usize::MAX).then_some(local[u]))
                .collect()
        })
        .collect();
    let mut alive: BTreeSet<(usize, usize)> = graph.iter().enumerate().map(|(k, s)| (s.len(), k)).collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(&(deg, k)) = alive.iter().next() {
        alive.remove(&(deg, k));
        order.push(nodes[k]);
        let nbrs: Vec<usize> = graph[k].iter().copied().collect();
        for &a in &nbrs {
            alive.remove(&(graph[a].len(), a));
            graph[a].remove(&k);
        }
        for (i, &a) in nbrs.iter().enumerate() {
            for &b in &nbrs[i + 1..] {
                graph[a].insert(b);
                graph[b].insert(a);
            }
        }
        for &a in &nbrs {
            alive.insert((graph[a].len(), a));
        }
        graph[k].clear();
    }
    order
}

struct Dissector<'a> {
    adj: &'a [Vec<usize>],
    /// Generation stamp marking membership of the part being processed.
    member: Vec<usize>,
    visited: Vec<usize>,
    stamp: usize,
}

impl<'a> Dissector<'a> {
    fn mark(&mut self, nodes: &[usize]) -> usize {
        self.stamp += 1;
        for &v in nodes {
            self.member[v] = self.stamp;
        }
        self.stamp
    }

    /// Breadth-first levels from `root` inside the currently marked part.
    fn levels(&mut self, root: usize, part: usize) -> Vec<Vec<usize>> {
        self.stamp += 1;
        let seen = self.stamp;
        self.visited[root] = seen;
        let mut levels = vec![vec![root]];
        loop {
            let mut next = Vec::new();
            for &v in levels.last().unwrap() {
                for &u in &self.adj[v] {
                    if self.member[u] == part && self.visited[u] != seen {
                        self.visited[u] = seen;
                        next.push(u);
                    }
                }
            }
            if next.is_empty() {
                return levels;
            }
            next.sort_unstable();
            levels.push(next);
        }
    }

    fn components(&mut self, nodes: &[usize], part: usize) -> Vec<Vec<usize>> {
        self.stamp += 1;
        let seen = self.stamp;
        let mut comps = Vec::new();
        for &start in nodes {
            if self.visited[start] == seen {
                continue;
            }
            self.visited[start] = seen;
            let mut comp = vec![start];
            let mut queue = VecDeque::from([start]);
            while let Some(v) = queue.pop_front() {
                for &u in &self.adj[v] {
                    if self.member[u] == part && self.visited[u] != seen {
                        self.visited[u] = seen;
                        comp.push(u);
                        queue.push_back(u);
                    }
                }
            }
            comp.sort_unstable();
            comps.push(comp);
        }
        comps
    }

    fn dissect(&mut self, nodes: Vec<usize>, out: &mut Vec<usize>) {
        if nodes.len() <= LEAF_SIZE {
            out.extend(minimum_degree(self.adj, &nodes));
            return;
        }
        let part = self.mark(&nodes);
        let comps = self.components(&nodes, part);
        if comps.len() > 1 {
            for comp in comps {
                self.dissect(comp, out);
            }
            return;
        }
        // pseudo-peripheral root: restart from the far end while the depth grows
        let mut levels = self.levels(nodes[0], part);
        for _ in 0..4 {
            let far = *levels.last().unwrap().iter().min_by_key(|&&v| self.adj[v].len()).unwrap();
            let trial = self.levels(far, part);
            if trial.len() <= levels.len() {
                break;
            }
            levels = trial;
        }
        let depth = levels.len();
        if depth < 3 {
            out.extend(minimum_degree(self.adj, &nodes));
            return;
        }
        let lo = (depth / 3).max(1);
        let hi = (2 * depth / 3).min(depth - 2).max(lo);
        let mid = depth / 2;
        let s = (lo..=hi).min_by_key(|&l| (levels[l].len(), l.abs_diff(mid))).unwrap();
        let mut first: Vec<usize> = levels[..s].concat();
        let second: Vec<usize> = levels[s + 1..].concat();
        // separator vertices that do not touch the second half can join the first
        let second_part = self.mark(&second);
        let mut sep = Vec::new();
        for &v in &levels[s] {
            if self.adj[v].iter().any(|&u| self.member[u] == second_part) {
                sep.push(v);
            } else {
                first.push(v);
            }
        }
        first.sort_unstable();
        self.dissect(first, out);
        self.dissect(second, out);
        out.extend(sep);
    }
}

pub fn nested_dissection(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let mut d = Dissector {
        adj,
        member: vec![0; n],
        visited: vec![0; n],
        stamp: 0,
    };
    let mut out = Vec::with_capacity(n);
    d.dissect((0..n).collect(), &mut out);
    out
}
