//! Graph representation, synthetic data, and graph shift operators.
//!
//! Graphs are immutable after construction: CSR adjacency (symmetric closure,
//! every undirected edge stored in both directions), row-normalized node
//! features, per-node class labels, and disjoint train/val/test masks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Immutable partition-agnostic graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    /// CSR row offsets, length `n + 1`.
    row_offsets: Vec<usize>,
    /// CSR column indices; strictly increasing within each row.
    col_indices: Vec<u32>,
    /// Dense `n x feat_dim` feature matrix; every row has l2 norm <= 1 + 1e-9.
    features: Mat,
    /// Class id per node, in `[0, num_classes)`.
    labels: Vec<u32>,
    num_classes: usize,
    train_mask: Vec<bool>,
    val_mask: Vec<bool>,
    test_mask: Vec<bool>,
}

impl Graph {
    /// Assemble a graph from parts, enforcing the structural invariants.
    pub fn new(
        n: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<u32>,
        features: Mat,
        labels: Vec<u32>,
        num_classes: usize,
        train_mask: Vec<bool>,
        val_mask: Vec<bool>,
        test_mask: Vec<bool>,
    ) -> Result<Self> {
        if row_offsets.len() != n + 1 {
            return Err(Error::Shape("row_offsets length must be n + 1".into()));
        }
        if *row_offsets.last().unwrap_or(&0) != col_indices.len() {
            return Err(Error::Shape("row_offsets do not cover col_indices".into()));
        }
        for u in 0..n {
            let row = &col_indices[row_offsets[u]..row_offsets[u + 1]];
            for (i, &v) in row.iter().enumerate() {
                if v as usize >= n {
                    return Err(Error::Shape(format!("column {v} out of range in row {u}")));
                }
                if i > 0 && row[i - 1] >= v {
                    return Err(Error::Shape(format!(
                        "row {u} columns not strictly increasing"
                    )));
                }
            }
        }
        if features.rows() != n {
            return Err(Error::Shape("feature row count != n".into()));
        }
        if labels.len() != n {
            return Err(Error::Shape("label count != n".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c as usize >= num_classes) {
            return Err(Error::Shape(format!("label {bad} >= {num_classes} classes")));
        }
        for m in [&train_mask, &val_mask, &test_mask] {
            if m.len() != n {
                return Err(Error::Shape("mask length != n".into()));
            }
        }
        for i in 0..n {
            if (train_mask[i] as u8 + val_mask[i] as u8 + test_mask[i] as u8) > 1 {
                return Err(Error::Shape(format!("node {i} in more than one split")));
            }
        }
        for i in 0..n {
            let nrm: f64 = features.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if nrm > 1.0 + 1e-9 {
                return Err(Error::Shape(format!("feature row {i} has norm {nrm} > 1")));
            }
        }
        Ok(Graph {
            n,
            row_offsets,
            col_indices,
            features,
            labels,
            num_classes,
            train_mask,
            val_mask,
            test_mask,
        })
    }

    /// Build CSR from an undirected edge set; both directions are stored.
    /// Duplicate pairs collapse to one edge.
    pub(crate) fn csr_from_undirected(n: usize, edges: &[(u32, u32)]) -> (Vec<usize>, Vec<u32>) {
        let mut adj: Vec<Vec<u32>> = vec![Vec::new(); n];
        for &(u, v) in edges {
            adj[u as usize].push(v);
            if u != v {
                adj[v as usize].push(u);
            }
        }
        let mut row_offsets = Vec::with_capacity(n + 1);
        let mut col_indices = Vec::new();
        row_offsets.push(0);
        for row in &mut adj {
            row.sort_unstable();
            row.dedup();
            col_indices.extend_from_slice(row);
            row_offsets.push(col_indices.len());
        }
        (row_offsets, col_indices)
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    /// Number of directed edges (twice the undirected count).
    pub fn num_directed_edges(&self) -> usize {
        self.col_indices.len()
    }

    pub fn neighbors(&self, u: usize) -> &[u32] {
        &self.col_indices[self.row_offsets[u]..self.row_offsets[u + 1]]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.row_offsets[u + 1] - self.row_offsets[u]
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[u32] {
        &self.col_indices
    }

    pub fn features(&self) -> &Mat {
        &self.features
    }

    pub fn feat_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn train_mask(&self) -> &[bool] {
        &self.train_mask
    }

    pub fn val_mask(&self) -> &[bool] {
        &self.val_mask
    }

    pub fn test_mask(&self) -> &[bool] {
        &self.test_mask
    }

    /// Relabel nodes: old node `i` becomes `perm[i]`. Used to check that the
    /// model commutes with node relabeling.
    pub fn permuted(&self, perm: &[u32]) -> Result<Graph> {
        if perm.len() != self.n {
            return Err(Error::Shape("permutation length != n".into()));
        }
        let mut seen = vec![false; self.n];
        for &p in perm {
            let p = p as usize;
            if p >= self.n || seen[p] {
                return Err(Error::InvalidArgument("not a permutation".into()));
            }
            seen[p] = true;
        }
        let mut edges = Vec::with_capacity(self.col_indices.len() / 2);
        for u in 0..self.n {
            for &v in self.neighbors(u) {
                if (v as usize) >= u {
                    edges.push((perm[u], perm[v as usize]));
                }
            }
        }
        let (row_offsets, col_indices) = Graph::csr_from_undirected(self.n, &edges);
        let mut features = Mat::zeros(self.n, self.feat_dim());
        let mut labels = vec![0u32; self.n];
        let mut train = vec![false; self.n];
        let mut val = vec![false; self.n];
        let mut test = vec![false; self.n];
        for i in 0..self.n {
            let p = perm[i] as usize;
            features.row_mut(p).copy_from_slice(self.features.row(i));
            labels[p] = self.labels[i];
            train[p] = self.train_mask[i];
            val[p] = self.val_mask[i];
            test[p] = self.test_mask[i];
        }
        Graph::new(
            self.n,
            row_offsets,
            col_indices,
            features,
            labels,
            self.num_classes,
            train,
            val,
            test,
        )
    }
}

/// Scale any feature row with l2 norm above `1 + 1e-9` down to unit norm.
/// Rows already inside that ball are left bit-identical, so normalized data
/// survives a write/load round trip exactly.
pub fn clamp_feature_norms(features: &mut Mat) {
    for i in 0..features.rows() {
        let nrm: f64 = features.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if nrm > 1.0 + 1e-9 {
            for v in features.row_mut(i) {
                *v /= nrm;
            }
        }
    }
}

/// Deterministic 60/20/20 split of `0..n` by seeded shuffle.
pub fn split_masks(n: usize, seed: u64) -> (Vec<bool>, Vec<bool>, Vec<bool>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let train_count = n * 6 / 10;
    let val_count = n * 2 / 10;
    let mut train = vec![false; n];
    let mut val = vec![false; n];
    let mut test = vec![false; n];
    for (pos, &i) in order.iter().enumerate() {
        if pos < train_count {
            train[i] = true;
        } else if pos < train_count + val_count {
            val[i] = true;
        } else {
            test[i] = true;
        }
    }
    (train, val, test)
}

/// Stochastic-block-model graph with noisy class-mean features.
///
/// Nodes are divided into `classes` contiguous blocks; an undirected edge
/// joins a same-block pair with probability `p_in` and a cross-block pair
/// with probability `p_out`. Features are a per-class mean direction plus
/// isotropic Gaussian noise, row-normalized. Labels are the block ids and
/// the train/val/test masks are a seeded 60/20/20 shuffle split.
pub fn synth_sbm(
    n: usize,
    classes: usize,
    p_in: f64,
    p_out: f64,
    feat_dim: usize,
    noise: f64,
    seed: u64,
) -> Result<Graph> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be positive".into()));
    }
    if classes == 0 || classes > n {
        return Err(Error::InvalidArgument(format!(
            "classes must be in [1, n]; got {classes} for n={n}"
        )));
    }
    if n % classes != 0 {
        return Err(Error::InvalidArgument(format!(
            "classes ({classes}) must divide n ({n}) evenly"
        )));
    }
    if !(0.0..=1.0).contains(&p_out) || !(0.0..=1.0).contains(&p_in) || p_out > p_in {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= p_out <= p_in <= 1; got p_in={p_in}, p_out={p_out}"
        )));
    }
    if feat_dim == 0 {
        return Err(Error::InvalidArgument("feat_dim must be positive".into()));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidArgument("noise must be finite and >= 0".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = n / classes;
    let label_of = |i: usize| (i / block) as u32;

    // Class mean directions: random unit vectors.
    let mut means = Mat::zeros(classes, feat_dim);
    for c in 0..classes {
        let row = means.row_mut(c);
        for v in row.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let nrm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nrm > 0.0 {
            for v in row.iter_mut() {
                *v /= nrm;
            }
        }
    }

    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if label_of(u) == label_of(v) { p_in } else { p_out };
            if p > 0.0 && rng.random_bool(p) {
                edges.push((u as u32, v as u32));
            }
        }
    }
    let (row_offsets, col_indices) = Graph::csr_from_undirected(n, &edges);

    let mut features = Mat::zeros(n, feat_dim);
    for i in 0..n {
        let c = label_of(i) as usize;
        let row = features.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *v = means.get(c, j) + noise * z;
        }
        let nrm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nrm > 0.0 {
            for v in row.iter_mut() {
                *v /= nrm;
            }
        }
    }

    let labels: Vec<u32> = (0..n).map(label_of).collect();
    let (train, val, test) = split_masks(n, rng.random());

    Graph::new(
        n,
        row_offsets,
        col_indices,
        features,
        labels,
        classes,
        train,
        val,
        test,
    )
}

/// Which normalization the graph shift operator applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GsoKind {
    /// Row-stochastic: each row averages over its neighbors. Rows of
    /// isolated nodes are all-zero.
    MeanNeighbor,
    /// Entry `(u, v)` is `1 / sqrt(deg(u) * deg(v))`.
    SymmetricNormalized,
    /// Plain 0/1 adjacency.
    RawAdjacency,
}

/// Sparse graph shift operator sharing the graph's CSR sparsity pattern.
#[derive(Debug, Clone)]
pub struct Gso {
    kind: GsoKind,
    n: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<u32>,
    values: Vec<f64>,
}

/// Build the shift operator of the given kind for a graph.
pub fn build_gso(g: &Graph, kind: GsoKind) -> Gso {
    let n = g.num_nodes();
    let row_offsets = g.row_offsets().to_vec();
    let col_indices = g.col_indices().to_vec();
    let mut values = vec![0.0; col_indices.len()];
    for u in 0..n {
        let deg_u = g.degree(u);
        for idx in row_offsets[u]..row_offsets[u + 1] {
            let v = col_indices[idx] as usize;
            values[idx] = match kind {
                GsoKind::MeanNeighbor => 1.0 / deg_u as f64,
                GsoKind::SymmetricNormalized => 1.0 / ((deg_u * g.degree(v)) as f64).sqrt(),
                GsoKind::RawAdjacency => 1.0,
            };
        }
    }
    Gso {
        kind,
        n,
        row_offsets,
        col_indices,
        values,
    }
}

impl Gso {
    /// Assemble an operator from raw CSR parts. Useful for custom operators
    /// and worker-local slices.
    pub fn from_parts(
        kind: GsoKind,
        n: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<u32>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_offsets.len() != n + 1
            || *row_offsets.last().unwrap_or(&0) != col_indices.len()
            || col_indices.len() != values.len()
        {
            return Err(Error::Shape("inconsistent CSR parts".into()));
        }
        if col_indices.iter().any(|&v| v as usize >= n) {
            return Err(Error::Shape("CSR column out of range".into()));
        }
        Ok(Gso {
            kind,
            n,
            row_offsets,
            col_indices,
            values,
        })
    }

    pub fn kind(&self) -> GsoKind {
        self.kind
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[u32] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Row `u` as parallel (column, value) slices.
    pub fn row(&self, u: usize) -> (&[u32], &[f64]) {
        let lo = self.row_offsets[u];
        let hi = self.row_offsets[u + 1];
        (&self.col_indices[lo..hi], &self.values[lo..hi])
    }

    /// `S * x` for a dense `n x f` matrix.
    pub fn apply(&self, x: &Mat) -> Result<Mat> {
        if x.rows() != self.n {
            return Err(Error::Shape(format!(
                "gso apply: {} rows expected, got {}",
                self.n,
                x.rows()
            )));
        }
        let f = x.cols();
        let mut out = Mat::zeros(self.n, f);
        for u in 0..self.n {
            let (cols, vals) = self.row(u);
            let out_row = out.row_mut(u);
            for (&v, &s) in cols.iter().zip(vals) {
                let x_row = x.row(v as usize);
                for (o, &xv) in out_row.iter_mut().zip(x_row) {
                    *o += s * xv;
                }
            }
        }
        Ok(out)
    }

    /// `S^T * x`; scatters row contributions to columns.
    pub fn apply_transpose(&self, x: &Mat) -> Result<Mat> {
        if x.rows() != self.n {
            return Err(Error::Shape(format!(
                "gso apply_transpose: {} rows expected, got {}",
                self.n,
                x.rows()
            )));
        }
        let f = x.cols();
        let mut out = Mat::zeros(self.n, f);
        for u in 0..self.n {
            let (cols, vals) = self.row(u);
            let x_row = x.row(u).to_vec();
            for (&v, &s) in cols.iter().zip(vals) {
                let out_row = out.row_mut(v as usize);
                for (o, &xv) in out_row.iter_mut().zip(&x_row) {
                    *o += s * xv;
                }
            }
        }
        Ok(out)
    }

    /// Dense copy; test/diagnostic use only.
    pub fn to_dense(&self) -> Mat {
        let mut m = Mat::zeros(self.n, self.n);
        for u in 0..self.n {
            let (cols, vals) = self.row(u);
            for (&v, &s) in cols.iter().zip(vals) {
                m.set(u, v as usize, s);
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> Graph {
        // 0 - 1 - 2
        let (ro, ci) = Graph::csr_from_undirected(3, &[(0, 1), (1, 2)]);
        Graph::new(
            3,
            ro,
            ci,
            Mat::zeros(3, 2),
            vec![0, 0, 0],
            1,
            vec![true, false, false],
            vec![false, true, false],
            vec![false, false, true],
        )
        .unwrap()
    }

    #[test]
    fn sbm_degenerate_probabilities_force_structure() {
        let g = synth_sbm(4, 2, 1.0, 0.0, 2, 0.0, 0).unwrap();
        assert_eq!(g.labels(), &[0, 0, 1, 1]);
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(1), &[0]);
        assert_eq!(g.neighbors(2), &[3]);
        assert_eq!(g.neighbors(3), &[2]);
        // noise = 0: both nodes of a class share the class-mean feature
        assert_eq!(g.features().row(0), g.features().row(1));
    }

    #[test]
    fn sbm_deterministic_per_seed() {
        let a = synth_sbm(120, 3, 0.2, 0.02, 5, 0.3, 42).unwrap();
        let b = synth_sbm(120, 3, 0.2, 0.02, 5, 0.3, 42).unwrap();
        assert_eq!(a, b);
        let c = synth_sbm(120, 3, 0.2, 0.02, 5, 0.3, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sbm_within_block_density_matches_binomial_model() {
        // Oracle: within-block undirected pair count is Binomial(m, p_in)
        // with m = classes * C(block, 2); check the empirical density lies
        // within 3 sigma of p_in.
        let (n, classes, p_in) = (300usize, 3usize, 0.1f64);
        let g = synth_sbm(n, classes, p_in, 0.01, 4, 0.1, 7).unwrap();
        let block = n / classes;
        let mut within = 0usize;
        for u in 0..n {
            for &v in g.neighbors(u) {
                let v = v as usize;
                if v > u && g.labels()[u] == g.labels()[v] {
                    within += 1;
                }
            }
        }
        let m = classes * block * (block - 1) / 2;
        let mean = m as f64 * p_in;
        let sigma = (m as f64 * p_in * (1.0 - p_in)).sqrt();
        assert!(
            (within as f64 - mean).abs() <= 3.0 * sigma,
            "within-block edges {within} outside 3 sigma of {mean} (sigma {sigma})"
        );
    }

    #[test]
    fn sbm_masks_disjoint_and_split_60_20_20() {
        let g = synth_sbm(300, 3, 0.05, 0.01, 4, 0.2, 3).unwrap();
        let train = g.train_mask().iter().filter(|&&b| b).count();
        let val = g.val_mask().iter().filter(|&&b| b).count();
        let test = g.test_mask().iter().filter(|&&b| b).count();
        assert_eq!((train, val, test), (180, 60, 60));
    }

    #[test]
    fn sbm_rejects_bad_arguments() {
        assert!(synth_sbm(10, 3, 0.5, 0.1, 2, 0.0, 0).is_err()); // 3 does not divide 10
        assert!(synth_sbm(10, 11, 0.5, 0.1, 2, 0.0, 0).is_err()); // classes > n
        assert!(synth_sbm(10, 2, 0.1, 0.5, 2, 0.0, 0).is_err()); // p_out > p_in
        assert!(synth_sbm(10, 2, 1.5, 0.1, 2, 0.0, 0).is_err()); // p_in > 1
    }

    #[test]
    fn mean_neighbor_rows() {
        let g = path3();
        let s = build_gso(&g, GsoKind::MeanNeighbor);
        let dense = s.to_dense();
        assert_eq!(dense.row(1), &[0.5, 0.0, 0.5]);
        assert_eq!(dense.row(0), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn symmetric_normalized_entries() {
        let g = path3();
        let s = build_gso(&g, GsoKind::SymmetricNormalized);
        let expect = 1.0 / 2f64.sqrt();
        assert!((s.to_dense().get(0, 1) - expect).abs() < 1e-15);
    }

    #[test]
    fn raw_adjacency_values_are_ones() {
        let g = path3();
        let s = build_gso(&g, GsoKind::RawAdjacency);
        assert!(s.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn isolated_node_gets_zero_row_under_mean() {
        let (ro, ci) = Graph::csr_from_undirected(3, &[(0, 1)]);
        let g = Graph::new(
            3,
            ro,
            ci,
            Mat::zeros(3, 1),
            vec![0, 0, 0],
            1,
            vec![true; 3],
            vec![false; 3],
            vec![false; 3],
        )
        .unwrap();
        let s = build_gso(&g, GsoKind::MeanNeighbor);
        let x = Mat::from_vec(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let y = s.apply(&x).unwrap();
        assert_eq!(y.row(2), &[0.0]);
        // rows with degree >= 1 sum to 1
        assert_eq!(y.row(0), &[2.0]);
    }

    #[test]
    fn apply_transpose_matches_dense_transpose() {
        let g = synth_sbm(20, 2, 0.4, 0.1, 3, 0.2, 5).unwrap();
        let s = build_gso(&g, GsoKind::SymmetricNormalized);
        let x = g.features().clone();
        let dense = s.to_dense();
        let mut dense_t = Mat::zeros(20, 20);
        for i in 0..20 {
            for j in 0..20 {
                dense_t.set(j, i, dense.get(i, j));
            }
        }
        let fast = s.apply_transpose(&x).unwrap();
        let slow = dense_t.matmul(&x).unwrap();
        assert!(fast.max_abs_diff(&slow) < 1e-12);
    }

    #[test]
    fn feature_norm_clamp_scales_only_large_rows() {
        let mut f = Mat::from_vec(2, 2, vec![3.0, 4.0, 0.3, 0.4]).unwrap();
        clamp_feature_norms(&mut f);
        assert_eq!(f.row(0), &[0.6, 0.8]);
        assert_eq!(f.row(1), &[0.3, 0.4]);
    }

    #[test]
    fn permuted_graph_roundtrip() {
        let g = synth_sbm(12, 2, 0.5, 0.1, 3, 0.2, 9).unwrap();
        let perm: Vec<u32> = (0..12).map(|i| ((i + 5) % 12) as u32).collect();
        let p = g.permuted(&perm).unwrap();
        let mut inv = vec![0u32; 12];
        for (i, &pi) in perm.iter().enumerate() {
            inv[pi as usize] = i as u32;
        }
        let back = p.permuted(&inv).unwrap();
        assert_eq!(g, back);
    }
}
