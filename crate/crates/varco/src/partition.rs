//! Node-to-worker assignment, halo sets, and cut statistics.
//!
//! A partition assigns every node to exactly one worker. For each worker the
//! halo-in set lists the remote nodes adjacent to its owned nodes (whose
//! activations it must fetch), and `halo_out[q][q']` lists the nodes owned by
//! `q` that `q'` needs — the per-pair routing tables used by the exchange.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    num_workers: usize,
    /// Worker id per node.
    owner: Vec<u32>,
    /// Sorted owned node ids per worker.
    local_nodes: Vec<Vec<u32>>,
    /// Sorted remote node ids adjacent to each worker's owned nodes.
    halo_in: Vec<Vec<u32>>,
    /// `halo_out[q][q']`: sorted node ids owned by `q` that `q'` needs.
    halo_out: Vec<Vec<Vec<u32>>>,
    /// Directed edges whose endpoints share an owner.
    self_edges: usize,
    /// Directed edges whose endpoints differ in owner.
    cross_edges: usize,
}

impl Partition {
    /// Build a partition from an explicit owner vector, computing halo sets
    /// and cut counts against the graph.
    pub fn from_owner(g: &Graph, owner: Vec<u32>, num_workers: usize) -> Result<Self> {
        let n = g.num_nodes();
        if owner.len() != n {
            return Err(Error::Shape(format!(
                "owner vector length {} != {} nodes",
                owner.len(),
                n
            )));
        }
        if num_workers == 0 {
            return Err(Error::InvalidArgument("need at least one worker".into()));
        }
        if let Some(&bad) = owner.iter().find(|&&w| w as usize >= num_workers) {
            return Err(Error::InvalidArgument(format!(
                "owner id {bad} >= {num_workers} workers"
            )));
        }

        let mut local_nodes: Vec<Vec<u32>> = vec![Vec::new(); num_workers];
        for (i, &w) in owner.iter().enumerate() {
            local_nodes[w as usize].push(i as u32);
        }

        let mut halo_in: Vec<Vec<u32>> = vec![Vec::new(); num_workers];
        let mut self_edges = 0usize;
        let mut cross_edges = 0usize;
        for u in 0..n {
            let wu = owner[u] as usize;
            for &v in g.neighbors(u) {
                if owner[v as usize] as usize == wu {
                    self_edges += 1;
                } else {
                    cross_edges += 1;
                    halo_in[wu].push(v);
                }
            }
        }
        for h in &mut halo_in {
            h.sort_unstable();
            h.dedup();
        }

        let mut halo_out: Vec<Vec<Vec<u32>>> =
            vec![vec![Vec::new(); num_workers]; num_workers];
        for (dst, halo) in halo_in.iter().enumerate() {
            for &v in halo {
                let src = owner[v as usize] as usize;
                halo_out[src][dst].push(v);
            }
        }
        // halo_in is sorted, so each halo_out list is too.

        Ok(Partition {
            num_workers,
            owner,
            local_nodes,
            halo_in,
            halo_out,
            self_edges,
            cross_edges,
        })
    }

    pub fn num_workers(&self) -> usize {
        self.num_workers
    }

    pub fn owner(&self) -> &[u32] {
        &self.owner
    }

    pub fn owner_of(&self, node: usize) -> usize {
        self.owner[node] as usize
    }

    pub fn local_nodes(&self, q: usize) -> &[u32] {
        &self.local_nodes[q]
    }

    pub fn halo_in(&self, q: usize) -> &[u32] {
        &self.halo_in[q]
    }

    pub fn halo_out(&self, src: usize, dst: usize) -> &[u32] {
        &self.halo_out[src][dst]
    }

    pub fn self_edges(&self) -> usize {
        self.self_edges
    }

    pub fn cross_edges(&self) -> usize {
        self.cross_edges
    }
}

/// Balanced uniform-random assignment: a seeded shuffle dealt round-robin,
/// so owned counts differ by at most one.
pub fn partition_random(g: &Graph, num_workers: usize, seed: u64) -> Result<Partition> {
    let n = g.num_nodes();
    if num_workers == 0 || num_workers > n {
        return Err(Error::InvalidArgument(format!(
            "worker count must be in [1, {n}]; got {num_workers}"
        )));
    }
    let mut order: Vec<u32> = (0..n as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut owner = vec![0u32; n];
    for (pos, &node) in order.iter().enumerate() {
        owner[node as usize] = (pos % num_workers) as u32;
    }
    Partition::from_owner(g, owner, num_workers)
}

/// Locality-aware assignment: each worker grows a BFS region from a seeded
/// root until it reaches its quota, restarting at unvisited nodes when a
/// component is exhausted. Quotas are balanced to within one node.
pub fn partition_greedy_bfs(g: &Graph, num_workers: usize, seed: u64) -> Result<Partition> {
    let n = g.num_nodes();
    if num_workers == 0 || num_workers > n {
        return Err(Error::InvalidArgument(format!(
            "worker count must be in [1, {n}]; got {num_workers}"
        )));
    }
    let base = n / num_workers;
    let extra = n % num_workers;
    let quota = |q: usize| base + usize::from(q < extra);

    // Seeded preference order for roots and restarts.
    let mut pref: Vec<u32> = (0..n as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pref.shuffle(&mut rng);

    let mut owner = vec![u32::MAX; n];
    let mut pref_cursor = 0usize;
    for q in 0..num_workers {
        let mut claimed = 0usize;
        let mut queue = std::collections::VecDeque::new();
        while claimed < quota(q) {
            if queue.is_empty() {
                while pref_cursor < n && owner[pref[pref_cursor] as usize] != u32::MAX {
                    pref_cursor += 1;
                }
                // Quotas sum to n, so an unassigned node always exists here.
                let root = pref[pref_cursor] as usize;
                owner[root] = q as u32;
                claimed += 1;
                queue.push_back(root);
                continue;
            }
            let u = queue.pop_front().unwrap();
            for &v in g.neighbors(u) {
                let v = v as usize;
                if owner[v] == u32::MAX && claimed < quota(q) {
                    owner[v] = q as u32;
                    claimed += 1;
                    queue.push_back(v);
                }
            }
        }
    }
    Partition::from_owner(g, owner, num_workers)
}

/// Self/cross cut statistics in directed-edge counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEdgeStats {
    pub self_count: usize,
    pub cross_count: usize,
    pub self_fraction: f64,
    pub cross_fraction: f64,
}

pub fn cross_edge_stats(p: &Partition) -> CrossEdgeStats {
    let total = p.self_edges() + p.cross_edges();
    let (self_fraction, cross_fraction) = if total == 0 {
        (1.0, 0.0)
    } else {
        (
            p.self_edges() as f64 / total as f64,
            p.cross_edges() as f64 / total as f64,
        )
    };
    CrossEdgeStats {
        self_count: p.self_edges(),
        cross_count: p.cross_edges(),
        self_fraction,
        cross_fraction,
    }
}
