//! Bounded-Lipschitz distance as an uncapacitated transportation problem.
//!
//! By duality, `sup{∫ f dw : |f| ≤ 1, Lip f ≤ 1}` equals the cheapest way of
//! moving the positive part of `w` onto its negative part with cost
//! `min(|x - y|, 2)`, where any imbalance is absorbed by a ground node at cost 1.
//! The problem is solved with a primal network simplex on the complete
//! bipartite graph; arc costs are computed from coordinates on demand.

use std::collections::HashMap;

const NONE: usize = usize::MAX;

#[derive(Clone, Debug)]
pub struct TransportSolution {
    pub value: f64,
    pub pivots: usize,
}

/// Merges identical sites and returns the bounded-Lipschitz norm of the signed
/// weights. `coords` holds `weights.len()` points of dimension `d`.
pub fn bl_norm(d: usize, coords: &[f64], weights: &[f64]) -> TransportSolution {
    assert_eq!(coords.len(), d * weights.len());
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut pts: Vec<f64> = Vec::new();
    let mut net: Vec<f64> = Vec::new();
    for (i, &w) in weights.iter().enumerate() {
        let p = &coords[i * d..(i + 1) * d];
        let key: Vec<u64> = p.iter().map(|x| (x + 0.0).to_bits()).collect();
        match index.get(&key) {
            Some(&k) => net[k] += w,
            None => {
                index.insert(key, net.len());
                pts.extend_from_slice(p);
                net.push(w);
            }
        }
    }
    let scale = net.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    if scale == 0.0 {
        return TransportSolution { value: 0.0, pivots: 0 };
    }
    let cut = 1e-14 * scale;
    let mut sources = Vec::new();
    let mut sinks = Vec::new();
    for (k, &w) in net.iter().enumerate() {
        if w > cut {
            sources.push((Some(k), w));
        } else if w < -cut {
            sinks.push((Some(k), -w));
        }
    }
    let imbalance: f64 = sources.iter().map(|s| s.1).sum::<f64>() - sinks.iter().map(|s| s.1).sum::<f64>();
    if imbalance > 0.0 {
        sinks.push((None, imbalance));
    } else if imbalance < 0.0 {
        sources.push((None, -imbalance));
    }
    if sources.is_empty() || sinks.is_empty() {
        return TransportSolution { value: 0.0, pivots: 0 };
    }
    let mut solver = Simplex::new(d, &pts, sources, sinks);
    solver.run();
    TransportSolution { value: solver.objective(), pivots: solver.pivots }
}

struct Simplex<'a> {
    d: usize,
    pts: &'a [f64],
    site: Vec<Option<usize>>,
    n_src: usize,
    n_snk: usize,
    root: usize,
    big: f64,
    parent: Vec<usize>,
    // entering arc stored as (source node, sink node); NONE marks an artificial root arc
    arc: Vec<(usize, usize)>,
    up: Vec<bool>,
    flow: Vec<f64>,
    depth: Vec<usize>,
    pi: Vec<f64>,
    first_child: Vec<usize>,
    next_sib: Vec<usize>,
    prev_sib: Vec<usize>,
    pivots: usize,
    flow_eps: f64,
}

impl<'a> Simplex<'a> {
    fn new(d: usize, pts: &'a [f64], sources: Vec<(Option<usize>, f64)>, sinks: Vec<(Option<usize>, f64)>) -> Self {
        let n_src = sources.len();
        let n_snk = sinks.len();
        let n = n_src + n_snk;
        let root = n;
        let big = 4.0 * n as f64 + 10.0;
        let total: f64 = sources.iter().map(|s| s.1).sum();
        let mut s = Simplex {
            d,
            pts,
            site: sources.iter().chain(&sinks).map(|s| s.0).collect(),
            n_src,
            n_snk,
            root,
            big,
            parent: vec![root; n + 1],
            arc: vec![(NONE, NONE); n + 1],
            up: vec![false; n + 1],
            flow: vec![0.0; n + 1],
            depth: vec![1; n + 1],
            pi: vec![0.0; n + 1],
            first_child: vec![NONE; n + 1],
            next_sib: vec![NONE; n + 1],
            prev_sib: vec![NONE; n + 1],
            pivots: 0,
            flow_eps: 1e-15 * total,
        };
        s.parent[root] = NONE;
        s.depth[root] = 0;
        for (v, &(_, b)) in sources.iter().enumerate() {
            s.up[v] = true;
            s.flow[v] = b;
            s.pi[v] = -big;
            s.attach(v, root);
        }
        for (j, &(_, b)) in sinks.iter().enumerate() {
            let v = n_src + j;
            s.up[v] = false;
            s.flow[v] = b;
            s.pi[v] = big;
            s.attach(v, root);
        }
        s
    }

    fn cost(&self, u: usize, v: usize) -> f64 {
        match (self.site[u], self.site[v]) {
            (Some(a), Some(b)) => {
                let pa = &self.pts[a * self.d..(a + 1) * self.d];
                let pb = &self.pts[b * self.d..(b + 1) * self.d];
                let r: f64 = pa.iter().zip(pb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                r.min(2.0)
            }
            _ => 1.0,
        }
    }

    fn tree_cost(&self, v: usize) -> f64 {
        let (a, b) = self.arc[v];
        if a == NONE {
            self.big
        } else {
            self.cost(a, b)
        }
    }

    fn attach(&mut self, v: usize, p: usize) {
        self.parent[v] = p;
        self.prev_sib[v] = NONE;
        self.next_sib[v] = self.first_child[p];
        if self.first_child[p] != NONE {
            self.prev_sib[self.first_child[p]] = v;
        }
        self.first_child[p] = v;
    }

    fn detach(&mut self, v: usize) {
        let p = self.parent[v];
        let (pr, nx) = (self.prev_sib[v], self.next_sib[v]);
        if pr != NONE {
            self.next_sib[pr] = nx;
        } else {
            self.first_child[p] = nx;
        }
        if nx != NONE {
            self.prev_sib[nx] = pr;
        }
        self.prev_sib[v] = NONE;
        self.next_sib[v] = NONE;
    }

    fn run(&mut self) {
        let total = self.n_src * self.n_snk;
        let block = ((total as f64).sqrt().ceil() as usize).max(32).min(total);
        let tol = 1e-12 * self.big;
        let mut cursor = 0usize;
        let max_pivots = 50 * (self.n_src + self.n_snk) * (self.n_src + self.n_snk).max(64);
        loop {
            let mut best = (-tol, NONE, NONE);
            let mut scanned = 0usize;
            while scanned < total {
                let s = cursor / self.n_snk;
                let t = self.n_src + cursor % self.n_snk;
                cursor += 1;
                if cursor == total {
                    cursor = 0;
                }
                scanned += 1;
                let rc = self.cost(s, t) + self.pi[s] - self.pi[t];
                if rc < best.0 {
                    best = (rc, s, t);
                }
                if scanned % block == 0 && best.1 != NONE {
                    break;
                }
            }
            if best.1 == NONE || self.pivots >= max_pivots {
                return;
            }
            self.pivot(best.1, best.2);
        }
    }

    fn pivot(&mut self, s: usize, t: usize) {
        self.pivots += 1;
        let (mut a, mut b) = (s, t);
        while a != b {
            if self.depth[a] > self.depth[b] {
                a = self.parent[a];
            } else if self.depth[b] > self.depth[a] {
                b = self.parent[b];
            } else {
                a = self.parent[a];
                b = self.parent[b];
            }
        }
        let apex = a;
        let eps = self.flow_eps;
        // last blocking arc in cycle order (apex, down to s, s->t, up to apex)
        let mut theta = f64::INFINITY;
        let mut leave = NONE;
        let mut leave_on_t = false;
        let mut v = s;
        while v != apex {
            if self.up[v] && self.flow[v] < theta - eps {
                theta = self.flow[v];
                leave = v;
            }
            v = self.parent[v];
        }
        v = t;
        while v != apex {
            if !self.up[v] && self.flow[v] <= theta + eps {
                theta = self.flow[v];
                leave = v;
                leave_on_t = true;
            }
            v = self.parent[v];
        }
        debug_assert!(leave != NONE, "uncapacitated cycle without blocking arc");
        let theta = theta.max(0.0);
        v = s;
        while v != apex {
            self.flow[v] += if self.up[v] { -theta } else { theta };
            self.flow[v] = self.flow[v].max(0.0);
            v = self.parent[v];
        }
        v = t;
        while v != apex {
            self.flow[v] += if self.up[v] { theta } else { -theta };
            self.flow[v] = self.flow[v].max(0.0);
            v = self.parent[v];
        }
        // re-hang the path between the entering endpoint and the leaving node
        let (start, mut new_parent, mut new_up) = if leave_on_t { (t, s, false) } else { (s, t, true) };
        let mut new_arc = (s, t);
        let mut new_flow = theta;
        let mut v = start;
        loop {
            let (op, oa, ou, of) = (self.parent[v], self.arc[v], self.up[v], self.flow[v]);
            self.detach(v);
            self.attach(v, new_parent);
            self.arc[v] = new_arc;
            self.up[v] = new_up;
            self.flow[v] = new_flow;
            if v == leave {
                break;
            }
            new_parent = v;
            new_arc = oa;
            new_up = !ou;
            new_flow = of;
            v = op;
        }
        self.refresh_subtree(start);
    }

    fn refresh_subtree(&mut self, top: usize) {
        let mut stack = vec![top];
        while let Some(v) = stack.pop() {
            let p = self.parent[v];
            self.depth[v] = self.depth[p] + 1;
            let c = self.tree_cost(v);
            self.pi[v] = if self.up[v] { self.pi[p] - c } else { self.pi[p] + c };
            let mut ch = self.first_child[v];
            while ch != NONE {
                stack.push(ch);
                ch = self.next_sib[ch];
            }
        }
    }

    fn objective(&self) -> f64 {
        let mut value = 0.0;
        for v in 0..self.root {
            let (a, b) = self.arc[v];
            if a != NONE && self.flow[v] > 0.0 {
                value += self.flow[v] * self.cost(a, b);
            }
        }
        value
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_diracs() {
        let near = bl_norm(3, &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0], &[1.0, -1.0]);
        assert!((near.value - 1.0).abs() < 1e-12);
        let far = bl_norm(3, &[0.0, 0.0, 0.0, 5.0, 0.0, 0.0], &[1.0, -1.0]);
        assert!((far.value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn unbalanced_mass_costs_one_per_unit() {
        let r = bl_norm(2, &[0.0, 0.0], &[0.7]);
        assert!((r.value - 0.7).abs() < 1e-12);
    }

    #[test]
    fn merged_sites_cancel() {
        let r = bl_norm(1, &[0.5, 0.5], &[1.0, -1.0]);
        assert_eq!(r.value, 0.0);
    }
}
