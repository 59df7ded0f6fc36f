//! Dinic's max-flow over an adjacency-list residual graph with integer
//! capacities. Small and exact; the energy minimization needs nothing more.

use std::collections::VecDeque;

/// Residual graph. Edges are stored in pairs: edge `2i` and its reverse
/// `2i + 1`, so `e ^ 1` is always the companion edge.
pub struct FlowGraph {
    adj: Vec<Vec<usize>>,
    to: Vec<usize>,
    cap: Vec<i64>,
}

impl FlowGraph {
    pub fn new(num_nodes: usize) -> Self {
        FlowGraph {
            adj: vec![Vec::new(); num_nodes],
            to: Vec::new(),
            cap: Vec::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.adj.len()
    }

    /// Edge `u -> v` with capacity `cap`; `rev_cap` on the companion edge
    /// makes the pair undirected when both are equal.
    pub fn add_edge(&mut self, u: usize, v: usize, cap: i64, rev_cap: i64) {
        debug_assert!(cap >= 0 && rev_cap >= 0);
        let e = self.to.len();
        self.to.push(v);
        self.cap.push(cap);
        self.to.push(u);
        self.cap.push(rev_cap);
        self.adj[u].push(e);
        self.adj[v].push(e + 1);
    }

    fn levels(&self, s: usize) -> Vec<i32> {
        let mut level = vec![-1; self.adj.len()];
        let mut queue = VecDeque::new();
        level[s] = 0;
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            for &e in &self.adj[u] {
                let v = self.to[e];
                if self.cap[e] > 0 && level[v] < 0 {
                    level[v] = level[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        level
    }

    pub fn max_flow(&mut self, s: usize, t: usize) -> i64 {
        assert_ne!(s, t);
        let mut flow = 0i64;
        loop {
            let mut level = self.levels(s);
            if level[t] < 0 {
                return flow;
            }
            // Blocking flow with current-arc pointers; the walk is iterative
            // so deep level graphs cannot overflow the stack.
            let mut it = vec![0usize; self.adj.len()];
            let mut path: Vec<usize> = Vec::new();
            let mut u = s;
            loop {
                if u == t {
                    let bottleneck = path.iter().map(|&e| self.cap[e]).min().unwrap();
                    for &e in &path {
                        self.cap[e] -= bottleneck;
                        self.cap[e ^ 1] += bottleneck;
                    }
                    flow += bottleneck;
                    let keep = path.iter().position(|&e| self.cap[e] == 0).unwrap();
                    path.truncate(keep);
                    u = path.last().map_or(s, |&e| self.to[e]);
                    continue;
                }
                let mut advanced = false;
                while it[u] < self.adj[u].len() {
                    let e = self.adj[u][it[u]];
                    let v = self.to[e];
                    if self.cap[e] > 0 && level[v] == level[u] + 1 {
                        path.push(e);
                        u = v;
                        advanced = true;
                        break;
                    }
                    it[u] += 1;
                }
                if advanced {
                    continue;
                }
                if u == s {
                    break;
                }
                level[u] = -1;
                path.pop();
                u = path.last().map_or(s, |&e| self.to[e]);
                it[u] += 1;
            }
        }
    }

    /// Source side of the canonical minimum cut: nodes reachable from `s` in
    /// the residual graph after [`max_flow`]. This is the unique minimal
    /// source side over all minimum cuts, independent of edge insertion order.
    pub fn min_cut_source_side(&self, s: usize) -> Vec<bool> {
        let level = self.levels(s);
        level.into_iter().map(|l| l >= 0).collect()
    }
}
