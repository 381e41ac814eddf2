//! Graph representation, CSR sparse matrices, the symmetric normalized
//! adjacency, and the neighbor-consistency penalty.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Undirected attributed graph with optional labels and disjoint split masks.
///
/// Edges are stored canonically: `(i, j)` with `i < j`, sorted, deduplicated.
/// Self-loops are rejected at construction; the normalized adjacency adds its
/// own.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    features: DenseMatrix,
    labels: Vec<Option<usize>>,
    train_mask: Vec<usize>,
    val_mask: Vec<usize>,
    test_mask: Vec<usize>,
}

impl Graph {
    pub fn new(
        edges: Vec<(usize, usize)>,
        features: DenseMatrix,
        labels: Vec<Option<usize>>,
        train_mask: Vec<usize>,
        val_mask: Vec<usize>,
        test_mask: Vec<usize>,
    ) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n {
            return Err(Error::InvalidGraph(format!(
                "{} label entries for {} nodes",
                labels.len(),
                n
            )));
        }
        let mut canonical = Vec::with_capacity(edges.len());
        for (a, b) in edges {
            if a == b {
                return Err(Error::InvalidGraph(format!("self-loop on node {a}")));
            }
            if a >= n || b >= n {
                return Err(Error::InvalidGraph(format!(
                    "edge ({a}, {b}) out of range for {n} nodes"
                )));
            }
            canonical.push((a.min(b), a.max(b)));
        }
        canonical.sort_unstable();
        canonical.dedup();

        let train_mask = canonical_mask(train_mask, n, "train_mask")?;
        let val_mask = canonical_mask(val_mask, n, "val_mask")?;
        let test_mask = canonical_mask(test_mask, n, "test_mask")?;
        check_disjoint(&train_mask, &val_mask, "train_mask", "val_mask")?;
        check_disjoint(&train_mask, &test_mask, "train_mask", "test_mask")?;
        check_disjoint(&val_mask, &test_mask, "val_mask", "test_mask")?;
        for &i in &train_mask {
            if labels[i].is_none() {
                return Err(Error::InvalidGraph(format!(
                    "train_mask node {i} has no label"
                )));
            }
        }

        Ok(Graph {
            n,
            edges: canonical,
            features,
            labels,
            train_mask,
            val_mask,
            test_mask,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn train_mask(&self) -> &[usize] {
        &self.train_mask
    }

    pub fn val_mask(&self) -> &[usize] {
        &self.val_mask
    }

    pub fn test_mask(&self) -> &[usize] {
        &self.test_mask
    }

    /// Nodes outside the training mask, in ascending order. These are the
    /// nodes that receive pseudo-labels.
    pub fn unlabeled_nodes(&self) -> Vec<usize> {
        let mut in_train = vec![false; self.n];
        for &i in &self.train_mask {
            in_train[i] = true;
        }
        (0..self.n).filter(|&i| !in_train[i]).collect()
    }

    /// Replaces the split masks, revalidating the invariants.
    pub fn with_masks(
        &self,
        train_mask: Vec<usize>,
        val_mask: Vec<usize>,
        test_mask: Vec<usize>,
    ) -> Result<Self> {
        Graph::new(
            self.edges.clone(),
            self.features.clone(),
            self.labels.clone(),
            train_mask,
            val_mask,
            test_mask,
        )
    }
}

fn canonical_mask(mut mask: Vec<usize>, n: usize, name: &str) -> Result<Vec<usize>> {
    mask.sort_unstable();
    mask.dedup();
    if let Some(&last) = mask.last() {
        if last >= n {
            return Err(Error::InvalidGraph(format!(
                "{name} references node {last}, graph has {n} nodes"
            )));
        }
    }
    Ok(mask)
}

fn check_disjoint(a: &[usize], b: &[usize], an: &str, bn: &str) -> Result<()> {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            core::cmp::Ordering::Less => i += 1,
            core::cmp::Ordering::Greater => j += 1,
            core::cmp::Ordering::Equal => {
                return Err(Error::InvalidGraph(format!(
                    "{an} and {bn} both contain node {}",
                    a[i]
                )));
            }
        }
    }
    Ok(())
}

/// General CSR matrix, used for sparse feature inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a CSR matrix from a dense one, dropping exact zeros.
    pub fn from_dense(m: &DenseMatrix) -> CsrMatrix {
        let mut row_offsets = Vec::with_capacity(m.rows() + 1);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        for i in 0..m.rows() {
            for (j, &v) in m.row(i).iter().enumerate() {
                if v != 0.0 {
                    col_indices.push(j);
                    values.push(v);
                }
            }
            row_offsets.push(col_indices.len());
        }
        CsrMatrix {
            rows: m.rows(),
            cols: m.cols(),
            row_offsets,
            col_indices,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Fraction of entries that are nonzero.
    pub fn density(&self) -> f64 {
        if self.rows == 0 || self.cols == 0 {
            return 0.0;
        }
        self.nnz() as f64 / (self.rows * self.cols) as f64
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut counts = vec![0usize; self.cols];
        for &j in &self.col_indices {
            counts[j] += 1;
        }
        let mut row_offsets = Vec::with_capacity(self.cols + 1);
        row_offsets.push(0);
        for c in &counts {
            row_offsets.push(row_offsets.last().unwrap() + c);
        }
        let mut cursor = row_offsets.clone();
        let mut col_indices = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for i in 0..self.rows {
            for k in self.row_offsets[i]..self.row_offsets[i + 1] {
                let j = self.col_indices[k];
                let slot = cursor[j];
                col_indices[slot] = i;
                values[slot] = self.values[k];
                cursor[j] += 1;
            }
        }
        CsrMatrix {
            rows: self.cols,
            cols: self.rows,
            row_offsets,
            col_indices,
            values,
        }
    }

    /// `self * dense`, the sparse-times-dense product.
    pub fn matmul_dense(&self, m: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != m.rows() {
            return Err(Error::dim_mismatch(
                "csr matmul",
                (self.rows, self.cols),
                m.shape(),
            ));
        }
        let mut out = DenseMatrix::zeros(self.rows, m.cols());
        for i in 0..self.rows {
            let out_row = out.row_mut(i);
            for k in self.row_offsets[i]..self.row_offsets[i + 1] {
                let v = self.values[k];
                let src = m.row(self.col_indices[k]);
                for (o, &s) in out_row.iter_mut().zip(src) {
                    *o += v * s;
                }
            }
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for k in self.row_offsets[i]..self.row_offsets[i + 1] {
                out.set(i, self.col_indices[k], self.values[k]);
            }
        }
        out
    }
}

/// Symmetric normalized adjacency with self-loops in CSR form:
/// `A_hat = D^{-1/2} (A + I) D^{-1/2}` where `D` is the degree matrix of
/// `A + I`.
///
/// Column indices are sorted within each row with no duplicates, the matrix
/// is structurally symmetric with matching values, and every value is
/// positive.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdjacency {
    n: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseAdjacency {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for k in self.row_offsets[i]..self.row_offsets[i + 1] {
                out.set(i, self.col_indices[k], self.values[k]);
            }
        }
        out
    }
}

/// Builds the symmetric normalized adjacency for a graph.
///
/// Isolated nodes keep only their self-loop with value 1.
pub fn build_normalized_adjacency(g: &Graph) -> SparseAdjacency {
    let n = g.n();
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(a, b) in g.edges() {
        neighbors[a].push(b);
        neighbors[b].push(a);
    }
    // Degrees of A + I. Each value is 1 / sqrt(d_i * d_j); the integer
    // degree product is exact and commutes, so the result is bitwise
    // symmetric and hits analytic values (1/2, 1) exactly.
    let degree: Vec<u64> = neighbors.iter().map(|adj| adj.len() as u64 + 1).collect();

    let mut row_offsets = Vec::with_capacity(n + 1);
    let mut col_indices = Vec::new();
    let mut values = Vec::new();
    row_offsets.push(0);
    for i in 0..n {
        let mut cols = neighbors[i].clone();
        cols.push(i);
        cols.sort_unstable();
        for j in cols {
            col_indices.push(j);
            values.push(1.0 / libm::sqrt((degree[i] * degree[j]) as f64));
        }
        row_offsets.push(col_indices.len());
    }
    SparseAdjacency {
        n,
        row_offsets,
        col_indices,
        values,
    }
}

/// Sparse-times-dense product `A_hat * m`.
pub fn spmm(adj: &SparseAdjacency, m: &DenseMatrix) -> Result<DenseMatrix> {
    if adj.n != m.rows() {
        return Err(Error::dim_mismatch(
            "spmm",
            (adj.n, adj.n),
            m.shape(),
        ));
    }
    let mut out = DenseMatrix::zeros(adj.n, m.cols());
    for i in 0..adj.n {
        let out_row = out.row_mut(i);
        for k in adj.row_offsets[i]..adj.row_offsets[i + 1] {
            let v = adj.values[k];
            let src = m.row(adj.col_indices[k]);
            for (o, &s) in out_row.iter_mut().zip(src) {
                *o += v * s;
            }
        }
    }
    Ok(out)
}

/// Sum over the undirected edge list of the squared row differences,
/// `sum_{(i,j) in E} ||q_i - q_j||^2`, each edge counted once.
pub fn smoothness_penalty(q: &DenseMatrix, edges: &[(usize, usize)]) -> f64 {
    let mut total = 0.0;
    for &(a, b) in edges {
        let (ra, rb) = (q.row(a), q.row(b));
        let mut acc = 0.0;
        for (&x, &y) in ra.iter().zip(rb) {
            let d = x - y;
            acc += d * d;
        }
        total += acc;
    }
    total
}

/// Gradient of [`smoothness_penalty`] with respect to `q`, scaled by
/// `upstream` and accumulated into `grad`.
pub(crate) fn smoothness_backward(
    q: &DenseMatrix,
    edges: &[(usize, usize)],
    upstream: f64,
    grad: &mut DenseMatrix,
) {
    let cols = q.cols();
    for &(a, b) in edges {
        for c in 0..cols {
            let d = 2.0 * upstream * (q.get(a, c) - q.get(b, c));
            grad.set(a, c, grad.get(a, c) + d);
            grad.set(b, c, grad.get(b, c) - d);
        }
    }
}
