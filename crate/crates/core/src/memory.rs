//! Prototype memory: matching, reading, the nearest-query update, and the
//! regular-score gate for test-time updates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};
use crate::graph::{softmax_in_place, Graph, Var};
use crate::tensor::Tensor;

/// `I` unit-norm prototype vectors of dimension `C`, stored as rows of an
/// `[I, C]` tensor.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MemoryPool {
    prototypes: Tensor,
}

impl MemoryPool {
    /// Isotropic Gaussian samples, normalized to the unit sphere.
    pub fn init(size: usize, dim: usize, seed: u64) -> Result<Self> {
        if size < 2 {
            return Err(Error::Config(format!(
                "memory pool needs at least 2 prototypes for a second-nearest match, got {size}"
            )));
        }
        if dim == 0 {
            return Err(Error::Config("memory feature dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..size * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut prototypes = Tensor::from_vec(&[size, dim], data);
        for row in prototypes.data_mut().chunks_mut(dim) {
            normalize(row);
        }
        Ok(Self { prototypes })
    }

    /// Wrap existing rows. Rows are used as given.
    pub fn from_tensor(prototypes: Tensor) -> Result<Self> {
        if prototypes.shape().len() != 2 || prototypes.dim(0) < 2 {
            return shape_err("memory pool", format!("{:?}", prototypes.shape()));
        }
        Ok(Self { prototypes })
    }

    pub fn size(&self) -> usize {
        self.prototypes.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.prototypes.dim(1)
    }

    pub fn prototype(&self, i: usize) -> &[f64] {
        let c = self.dim();
        &self.prototypes.data()[i * c..(i + 1) * c]
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.prototypes
    }

    pub fn norms(&self) -> Vec<f64> {
        self.prototypes
            .data()
            .chunks(self.dim())
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }
}

/// Query vectors from the cells of one or more feature maps.
///
/// Row `r` comes from sample `r / (h·w)` at grid cell `r % (h·w)` in
/// row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryGrid {
    pub queries: Tensor,
    pub samples: usize,
    pub height: usize,
    pub width: usize,
}

impl QueryGrid {
    /// Expand `[B, C, h, w]` into `B·h·w` unit-norm queries.
    pub fn from_feature_map(map: &Tensor) -> Result<Self> {
        let s = map.shape();
        if s.len() != 4 {
            return shape_err("query grid", format!("{s:?}"));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let p = h * w;
        let mut rows = vec![0.0; map.len()];
        for bi in 0..b {
            for ci in 0..c {
                for pi in 0..p {
                    rows[(bi * p + pi) * c + ci] = map.data()[(bi * c + ci) * p + pi];
                }
            }
        }
        for row in rows.chunks_mut(c) {
            normalize(row);
        }
        Ok(Self {
            queries: Tensor::from_vec(&[b * p, c], rows),
            samples: b,
            height: h,
            width: w,
        })
    }

    /// Rows used as given (no normalization).
    pub fn from_rows(queries: Tensor, samples: usize, height: usize, width: usize) -> Result<Self> {
        if queries.shape().len() != 2 || queries.dim(0) != samples * height * width {
            return shape_err("query grid", format!("{:?} for {samples}x{height}x{width}", queries.shape()));
        }
        Ok(Self {
            queries,
            samples,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.queries.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.queries.dim(1)
    }

    pub fn query(&self, k: usize) -> &[f64] {
        let c = self.dim();
        &self.queries.data()[k * c..(k + 1) * c]
    }

    /// Concatenate grids with identical spatial layout.
    pub fn concat(grids: &[QueryGrid]) -> Result<Self> {
        let first = grids.first().ok_or_else(|| Error::Config("no query grids".into()))?;
        let mut data = Vec::new();
        let mut samples = 0;
        for q in grids {
            if (q.height, q.width, q.dim()) != (first.height, first.width, first.dim()) {
                return shape_err("query grid concat", "mismatched layouts");
            }
            data.extend_from_slice(q.queries.data());
            samples += q.samples;
        }
        let k = samples * first.height * first.width;
        Ok(Self {
            queries: Tensor::from_vec(&[k, first.dim()], data),
            samples,
            height: first.height,
            width: first.width,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `[K, I]` matching probabilities; every row sums to 1.
    pub weights: Tensor,
    pub nearest: Vec<usize>,
    pub second: Vec<usize>,
}

fn check_dims(queries: &QueryGrid, pool: &MemoryPool) -> Result<()> {
    if queries.dim() != pool.dim() {
        return shape_err(
            "memory match",
            format!("query dimension {} vs prototype dimension {}", queries.dim(), pool.dim()),
        );
    }
    Ok(())
}

/// Indices of the largest and second-largest entries; ties go to the lower index.
pub(crate) fn top_two(row: &[f64]) -> (usize, usize) {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    let mut second = if best == 0 { 1 } else { 0 };
    for (i, &v) in row.iter().enumerate() {
        if i != best && v > row[second] {
            second = i;
        }
    }
    (best, second)
}

/// Softmax over prototypes of the prototype–query inner products.
pub fn match_queries(queries: &QueryGrid, pool: &MemoryPool) -> Result<MatchResult> {
    check_dims(queries, pool)?;
    let (k, i, c) = (queries.len(), pool.size(), pool.dim());
    let mut logits = vec![0.0; k * i];
    crate::tensor::gemm(k, c, i, queries.queries.data(), false, pool.prototypes.data(), true, &mut logits, 0.0);
    let mut nearest = Vec::with_capacity(k);
    let mut second = Vec::with_capacity(k);
    for row in logits.chunks_mut(i) {
        softmax_in_place(row);
        let (a, b) = top_two(row);
        nearest.push(a);
        second.push(b);
    }
    Ok(MatchResult {
        weights: Tensor::from_vec(&[k, i], logits),
        nearest,
        second,
    })
}

/// Reconstruct each query as the matching-weighted combination of prototypes
/// and reassemble the result as a `[B, C, h, w]` feature map.
pub fn read(queries: &QueryGrid, pool: &MemoryPool) -> Result<Tensor> {
    let m = match_queries(queries, pool)?;
    let (k, i, c) = (queries.len(), pool.size(), pool.dim());
    let mut rows = vec![0.0; k * c];
    crate::tensor::gemm(k, i, c, m.weights.data(), false, pool.prototypes.data(), false, &mut rows, 0.0);
    let (b, p) = (queries.samples, queries.height * queries.width);
    let mut map = vec![0.0; k * c];
    for bi in 0..b {
        for pi in 0..p {
            for ci in 0..c {
                map[(bi * c + ci) * p + pi] = rows[(bi * p + pi) * c + ci];
            }
        }
    }
    Ok(Tensor::from_vec(&[b, c, queries.height, queries.width], map))
}

/// Move every prototype toward the queries that chose it as nearest.
///
/// For prototype `i` with claimant set `U_i`, each claimant is weighted by its
/// column-softmax score (softmax over all queries) divided by the largest such
/// score within `U_i`; the prototype plus the weighted sum is renormalized.
/// Prototypes nobody claims are left untouched.
pub fn update(queries: &QueryGrid, pool: &MemoryPool) -> Result<MemoryPool> {
    let m = match_queries(queries, pool)?;
    let (k, i, c) = (queries.len(), pool.size(), pool.dim());
    let mut logits = vec![0.0; k * i];
    crate::tensor::gemm(k, c, i, queries.queries.data(), false, pool.prototypes.data(), true, &mut logits, 0.0);
    let mut out = pool.prototypes.clone();
    for proto in 0..i {
        let claimants: Vec<usize> = (0..k).filter(|&q| m.nearest[q] == proto).collect();
        if claimants.is_empty() {
            continue;
        }
        // column softmax over all K queries
        let mut column: Vec<f64> = (0..k).map(|q| logits[q * i + proto]).collect();
        softmax_in_place(&mut column);
        let peak = claimants.iter().map(|&q| column[q]).fold(f64::MIN, f64::max);
        let mut acc = pool.prototype(proto).to_vec();
        for &q in &claimants {
            let weight = column[q] / peak;
            for (a, v) in acc.iter_mut().zip(queries.query(q)) {
                *a += weight * v;
            }
        }
        normalize(&mut acc);
        out.data_mut()[proto * c..(proto + 1) * c].copy_from_slice(&acc);
    }
    Ok(MemoryPool { prototypes: out })
}

/// Test-time update gate: frames whose regular score exceeds `gamma` are
/// treated as possibly abnormal and must not update the pool.
pub fn gate_allows(regular_score: f64, gamma: f64) -> bool {
    regular_score <= gamma
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n > 0.0 {
        for a in v {
            *a /= n;
        }
    }
}

/// Differentiable memory read on the graph.
#[derive(Clone, Copy, Debug)]
pub struct MemoryRead {
    /// Unit-norm queries `[K, C]`.
    pub queries: Var,
    /// Matching probabilities `[K, I]`.
    pub weights: Var,
    /// Reconstructed feature map `[B, C, h, w]`.
    pub read: Var,
}

/// Queries from `F_lat`, softmax matching against `pool` and the weighted read.
pub fn read_in_graph(g: &mut Graph, f_lat: Var, pool: Var) -> Result<MemoryRead> {
    let s = g.value(f_lat).shape().to_vec();
    if s.len() != 4 || g.value(pool).dim(1) != s[1] {
        return shape_err(
            "memory read",
            format!("F_lat {s:?} against pool {:?}", g.value(pool).shape()),
        );
    }
    let rows = g.to_rows(f_lat)?;
    let queries = g.normalize_rows(rows)?;
    let logits = g.matmul_nt(queries, pool)?;
    let weights = g.softmax_rows(logits)?;
    let recon = g.matmul(weights, pool)?;
    let read = g.from_rows(recon, s[0], s[2], s[3])?;
    Ok(MemoryRead { queries, weights, read })
}

/// Nearest and second-nearest prototype per row of a `[K, I]` weight matrix.
pub fn rank_rows(weights: &Tensor) -> (Vec<usize>, Vec<usize>) {
    let i = weights.dim(1);
    weights.data().chunks(i).map(top_two).unzip()
}
