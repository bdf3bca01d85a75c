//! Codebook quantization of weight matrices.
//!
//! Weights are sorted and split into `2^b` bins of equal population; each bin's
//! mean becomes a centroid. The assignment is then refined k-means style under
//! the L1 objective: every weight moves to its closest centroid, centroids are
//! recomputed as cluster means, and the loop stops as soon as the total L1
//! distance no longer strictly decreases. The best state seen is kept.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bitcodec::{self, CodecError, PackedBuffer};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuantError {
    #[error("cannot cluster an empty weight set")]
    Empty,
    #[error("cluster count {0} outside 1..=256")]
    ClusterCount(usize),
    #[error("non-finite weight {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("matrix data has {actual} elements, {rows}x{cols} requires {expected}")]
    Shape {
        rows: usize,
        cols: usize,
        expected: usize,
        actual: usize,
    },
    #[error("codebook must hold {expected} ascending centroids, got {actual}")]
    Codebook { expected: usize, actual: usize },
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, QuantError> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(QuantError::Shape {
                rows,
                cols,
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Element-wise conversion to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_nearest(v.to_f64_exact()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bit_width: u8,
    pub max_iterations: usize,
    /// Allows distinct tensors of one checkpoint to be quantized concurrently.
    pub parallel: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bit_width: 3,
            max_iterations: 100,
            parallel: true,
        }
    }
}

impl QuantConfig {
    pub fn with_bits(bit_width: u8) -> Self {
        Self {
            bit_width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        if (1..=bitcodec::MAX_BIT_WIDTH).contains(&self.bit_width) {
            Ok(())
        } else {
            Err(CodecError::BitWidth(self.bit_width).into())
        }
    }
}

/// A cluster assignment: one centroid index per weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering<T> {
    pub assignments: Vec<u8>,
    pub centroids: Vec<T>,
}

impl<T: Scalar> Clustering<T> {
    /// Total L1 distance between every weight and its centroid.
    pub fn objective(&self, weights: &[T]) -> f64 {
        l1_objective(weights, &self.assignments, &self.centroids)
    }

    /// Largest per-weight error, rounded up so it bounds every entry.
    pub fn max_error(&self, weights: &[T]) -> T {
        let max = weights
            .iter()
            .zip(&self.assignments)
            .map(|(&w, &a)| (w.to_f64_exact() - self.centroids[a as usize].to_f64_exact()).abs())
            .fold(0.0f64, f64::max);
        T::from_f64_upward(max)
    }
}

pub fn l1_objective<T: Scalar>(weights: &[T], assignments: &[u8], centroids: &[T]) -> f64 {
    weights
        .iter()
        .zip(assignments)
        .map(|(&w, &a)| (w.to_f64_exact() - centroids[a as usize].to_f64_exact()).abs())
        .sum()
}

fn check_finite<T: Scalar>(weights: &[T]) -> Result<(), QuantError> {
    match weights.iter().position(|w| !w.is_finite()) {
        Some(index) => Err(QuantError::NonFinite {
            index,
            value: weights[index].to_f64_exact(),
        }),
        None => Ok(()),
    }
}

fn mean<T: Scalar>(values: impl Iterator<Item = T>) -> Option<T> {
    let (sum, n) = values.fold((0.0f64, 0usize), |(s, n), v| (s + v.to_f64_exact(), n + 1));
    (n > 0).then(|| T::from_f64_nearest(sum / n as f64))
}

/// Sorts the weights and splits them into `clusters` contiguous bins whose
/// sizes differ by at most one (the first `n % clusters` bins are larger).
/// Each bin's centroid is the mean of its members; a bin left empty because
/// there are fewer weights than clusters repeats the largest weight.
pub fn init_equal_population<T: Scalar>(
    weights: &[T],
    clusters: usize,
) -> Result<Clustering<T>, QuantError> {
    if weights.is_empty() {
        return Err(QuantError::Empty);
    }
    if clusters == 0 || clusters > 256 {
        return Err(QuantError::ClusterCount(clusters));
    }
    check_finite(weights)?;

    let n = weights.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| weights[a].total_cmp(&weights[b]).then(a.cmp(&b)));

    let base = n / clusters;
    let extra = n % clusters;
    let mut assignments = vec![0u8; n];
    let mut centroids = Vec::with_capacity(clusters);
    let mut start = 0usize;
    for bin in 0..clusters {
        let len = base + usize::from(bin < extra);
        let members = &order[start..start + len];
        for &idx in members {
            assignments[idx] = bin as u8;
        }
        let centroid = mean(members.iter().map(|&i| weights[i]))
            .unwrap_or_else(|| weights[order[start.saturating_sub(1)]]);
        centroids.push(centroid);
        start += len;
    }
    // Bins are contiguous ranges of the sorted weights, so centroid order is bin order.
    debug_assert!(centroids.windows(2).all(|w| w[0] <= w[1]));
    Ok(Clustering {
        assignments,
        centroids,
    })
}

/// Result of [`refine`].
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement<T> {
    pub clustering: Clustering<T>,
    pub epsilon: T,
    pub objective: f64,
    /// Objective of every accepted state, starting with the initial one.
    pub trajectory: Vec<f64>,
}

/// Linear-scan reference for [`NearestCentroid`].
#[cfg(test)]
fn nearest<T: Scalar>(w: T, centroids: &[T]) -> u8 {
    let mut best = 0usize;
    let mut best_d = (w - centroids[0]).abs();
    for (k, &c) in centroids.iter().enumerate().skip(1) {
        let d = (w - c).abs();
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best as u8
}

/// Nearest-centroid search by bisection over the sorted codebook.
///
/// Agrees with [`nearest`] exactly, including its tie-breaking: among equally
/// distant centroids the lowest index wins.
struct NearestCentroid<T> {
    values: Vec<T>,
    /// Original index of the first centroid in the run of equal values that
    /// contains each sorted position.
    run_index: Vec<usize>,
}

impl<T: Scalar> NearestCentroid<T> {
    fn new(centroids: &[T]) -> Self {
        let mut order: Vec<usize> = (0..centroids.len()).collect();
        order.sort_by(|&a, &b| centroids[a].total_cmp(&centroids[b]).then(a.cmp(&b)));
        let values: Vec<T> = order.iter().map(|&i| centroids[i]).collect();
        let mut run_index = Vec::with_capacity(order.len());
        for (j, &i) in order.iter().enumerate() {
            let same = j > 0 && values[j - 1] == values[j];
            run_index.push(if same { run_index[j - 1] } else { i });
        }
        Self { values, run_index }
    }

    fn nearest(&self, w: T) -> u8 {
        let pos = self.values.partition_point(|&c| c < w);
        let right = (pos < self.values.len()).then(|| (self.values[pos] - w).abs());
        let left = (pos > 0).then(|| (w - self.values[pos - 1]).abs());
        let best = match (left, right) {
            (Some(l), Some(r)) if l == r => self.run_index[pos - 1].min(self.run_index[pos]),
            (Some(l), Some(r)) if l < r => self.run_index[pos - 1],
            (Some(_), None) => self.run_index[pos - 1],
            _ => self.run_index[pos],
        };
        best as u8
    }
}

fn update_centroids<T: Scalar>(weights: &[T], assignments: &[u8], previous: &[T]) -> Vec<T> {
    let mut sums = vec![0.0f64; previous.len()];
    let mut counts = vec![0usize; previous.len()];
    for (&w, &a) in weights.iter().zip(assignments) {
        sums[a as usize] += w.to_f64_exact();
        counts[a as usize] += 1;
    }
    previous
        .iter()
        .zip(sums.iter().zip(&counts))
        .map(|(&prev, (&s, &c))| {
            if c == 0 {
                prev
            } else {
                T::from_f64_nearest(s / c as f64)
            }
        })
        .collect()
}

/// Iterative L1 refinement of an initial clustering.
///
/// Centroids keep their identity (index) while refining; call
/// [`Clustering`]-level sorting separately if an ascending codebook is needed.
pub fn refine<T: Scalar>(
    weights: &[T],
    init: Clustering<T>,
    max_iterations: usize,
) -> Refinement<T> {
    let mut best_objective = init.objective(weights);
    let mut best = init;
    let mut trajectory = vec![best_objective];

    for _ in 0..max_iterations {
        let lookup = NearestCentroid::new(&best.centroids);
        let assignments: Vec<u8> = weights.iter().map(|&w| lookup.nearest(w)).collect();
        let centroids = update_centroids(weights, &assignments, &best.centroids);
        let objective = l1_objective(weights, &assignments, &centroids);
        if objective < best_objective {
            best = Clustering {
                assignments,
                centroids,
            };
            best_objective = objective;
            trajectory.push(objective);
        } else {
            break;
        }
    }

    Refinement {
        epsilon: best.max_error(weights),
        clustering: best,
        objective: best_objective,
        trajectory,
    }
}

/// Reorders centroids ascending (stable) and remaps the assignments.
pub fn sort_codebook<T: Scalar>(clustering: Clustering<T>) -> Clustering<T> {
    let mut order: Vec<usize> = (0..clustering.centroids.len()).collect();
    order.sort_by(|&a, &b| {
        clustering.centroids[a]
            .total_cmp(&clustering.centroids[b])
            .then(a.cmp(&b))
    });
    let mut remap = vec![0u8; order.len()];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new as u8;
    }
    Clustering {
        assignments: clustering
            .assignments
            .iter()
            .map(|&a| remap[a as usize])
            .collect(),
        centroids: order.iter().map(|&i| clustering.centroids[i]).collect(),
    }
}

/// When the input has no more distinct values than there are centroids, the
/// distinct values themselves are an exact codebook.
fn exact_codebook<T: Scalar>(weights: &[T], clusters: usize) -> Option<Clustering<T>> {
    let mut distinct: Vec<T> = Vec::with_capacity(clusters + 1);
    let mut sorted = weights.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    for w in sorted {
        if distinct.last() != Some(&w) {
            if distinct.len() == clusters {
                return None;
            }
            distinct.push(w);
        }
    }
    let assignments = weights
        .iter()
        .map(|w| {
            distinct
                .binary_search_by(|c| c.total_cmp(w))
                .expect("value present") as u8
        })
        .collect();
    let last = *distinct.last()?;
    distinct.resize(clusters, last);
    Some(Clustering {
        assignments,
        centroids: distinct,
    })
}

/// `2^b` ascending centroids shared by every weight of one matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centroids: Vec<f32>,
    bit_width: u8,
}

impl Codebook {
    pub fn new(centroids: Vec<f32>, bit_width: u8) -> Result<Self, QuantError> {
        if !(1..=bitcodec::MAX_BIT_WIDTH).contains(&bit_width) {
            return Err(CodecError::BitWidth(bit_width).into());
        }
        let expected = 1usize << bit_width;
        if centroids.len() != expected || !centroids.windows(2).all(|w| w[0] <= w[1]) {
            return Err(QuantError::Codebook {
                expected,
                actual: centroids.len(),
            });
        }
        Ok(Self {
            centroids,
            bit_width,
        })
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn bit_width(&self) -> u8 {
        self.bit_width
    }

    #[inline]
    pub fn value(&self, code: u8) -> f32 {
        self.centroids[code as usize]
    }
}

/// Storage form of one weight matrix: codebook plus packed indices.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    rows: usize,
    cols: usize,
    codebook: Codebook,
    indices: PackedBuffer,
    epsilon: f32,
}

impl QuantizedMatrix {
    pub fn from_parts(
        rows: usize,
        cols: usize,
        codebook: Codebook,
        indices: PackedBuffer,
        epsilon: f32,
    ) -> Result<Self, QuantError> {
        if rows == 0 || cols == 0 || indices.count() != rows * cols {
            return Err(QuantError::Shape {
                rows,
                cols,
                expected: rows * cols,
                actual: indices.count(),
            });
        }
        if indices.bit_width() != codebook.bit_width() {
            return Err(CodecError::BitWidth(indices.bit_width()).into());
        }
        Ok(Self {
            rows,
            cols,
            codebook,
            indices,
            epsilon,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn indices(&self) -> &PackedBuffer {
        &self.indices
    }

    pub fn bit_width(&self) -> u8 {
        self.codebook.bit_width
    }

    /// Maximum absolute per-weight error against the source matrix.
    pub fn epsilon(&self) -> f32 {
        self.epsilon
    }

    /// Dequantized value at `(i, j)`.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.get_flat(i * self.cols + j)
    }

    #[inline]
    pub fn get_flat(&self, index: usize) -> f32 {
        self.codebook
            .value(self.indices.get(index).expect("index within matrix"))
    }

    /// Reconstructs row `i` into `out` using `codes` as decode scratch.
    pub fn decode_row(
        &self,
        i: usize,
        codes: &mut [u8],
        out: &mut [f32],
    ) -> Result<(), QuantError> {
        let codes = &mut codes[..self.cols];
        self.indices.unpack_range(i * self.cols, codes)?;
        for (o, &c) in out[..self.cols].iter_mut().zip(codes.iter()) {
            *o = self.codebook.value(c);
        }
        Ok(())
    }

    /// Serialized record size: bit width, two dimensions, codebook, payload and guard.
    pub fn storage_bytes(&self) -> usize {
        1 + 4 + 4 + 4 * self.codebook.centroids.len() + self.indices.as_bytes().len()
    }
}

/// Quantizes one matrix with a single shared codebook.
pub fn quantize_matrix(w: &Matrix<f32>, cfg: &QuantConfig) -> Result<QuantizedMatrix, QuantError> {
    cfg.validate()?;
    let weights = w.as_slice();
    check_finite(weights)?;
    let clusters = 1usize << cfg.bit_width;

    let clustering = match exact_codebook(weights, clusters) {
        Some(exact) => exact,
        None => {
            let init = init_equal_population(weights, clusters)?;
            refine(weights, init, cfg.max_iterations).clustering
        }
    };
    let clustering = sort_codebook(clustering);
    let epsilon = clustering.max_error(weights);
    let indices = bitcodec::pack_bits(&clustering.assignments, cfg.bit_width)?;
    let codebook = Codebook::new(clustering.centroids, cfg.bit_width)?;
    QuantizedMatrix::from_parts(w.rows(), w.cols(), codebook, indices, epsilon)
}

/// Expands every index through the codebook.
pub fn dequantize(q: &QuantizedMatrix) -> Matrix<f32> {
    let codes = bitcodec::unpack_bits(&q.indices);
    Matrix {
        rows: q.rows,
        cols: q.cols,
        data: codes.iter().map(|&c| q.codebook.value(c)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const WORKED_WEIGHTS: [f32; 9] = [0.91, 0.92, 0.89, -0.05, -0.06, -0.04, 1.20, 1.21, 1.19];

    #[test]
    fn equal_population_worked_example() {
        let c = init_equal_population(&WORKED_WEIGHTS, 3).unwrap();
        assert_eq!(c.assignments, vec![1, 1, 1, 0, 0, 0, 2, 2, 2]);
        let exact_mid = (0.89f64 + 0.91 + 0.92) / 3.0;
        assert!((c.centroids[0] as f64 + 0.05).abs() < 1e-6);
        assert!((c.centroids[1] as f64 - exact_mid).abs() < 1e-6);
        assert!((c.centroids[2] as f64 - 1.20).abs() < 1e-6);
        assert_eq!(bitcodec::bits_for_clusters(3), 2);
    }

    #[test]
    fn worked_example_is_a_fixed_point() {
        let init = init_equal_population(&WORKED_WEIGHTS, 3).unwrap();
        // one manual sweep: every weight is already closest to its own bin's centroid
        for (&w, &a) in WORKED_WEIGHTS.iter().zip(&init.assignments) {
            assert_eq!(nearest(w, &init.centroids), a);
        }
        let r = refine(&WORKED_WEIGHTS, init.clone(), 100);
        assert_eq!(r.clustering, init);
        assert_eq!(r.trajectory.len(), 1);
    }

    #[test]
    fn remainder_goes_to_leading_bins() {
        let w: Vec<f64> = (0..10).map(f64::from).collect();
        let c = init_equal_population(&w, 4).unwrap();
        assert_eq!(c.assignments, vec![0, 0, 0, 1, 1, 1, 2, 2, 3, 3]);
        assert_eq!(c.centroids, vec![1.0, 4.0, 6.5, 8.5]);
    }

    #[test]
    fn refine_reaches_zero_objective() {
        let w = [0.0f64, 1.0, 1.0, 1.0];
        let init = init_equal_population(&w, 2).unwrap();
        assert_eq!(init.assignments, vec![0, 0, 1, 1]);
        assert_eq!(init.objective(&w), 1.0);

        // Exhaustive search over all 2-cluster assignments finds objective 0 as the optimum.
        let best = (0u32..16)
            .map(|mask| {
                let a: Vec<u8> = (0..4).map(|i| ((mask >> i) & 1) as u8).collect();
                let cents = update_centroids(&w, &a, &[0.0, 0.0]);
                l1_objective(&w, &a, &cents)
            })
            .fold(f64::INFINITY, f64::min);
        assert_eq!(best, 0.0);

        let r = refine(&w, init, 100);
        assert_eq!(r.clustering.assignments, vec![0, 1, 1, 1]);
        assert_eq!(r.clustering.centroids, vec![0.0, 1.0]);
        assert_eq!(r.objective, 0.0);
        assert_eq!(r.epsilon, 0.0);
    }

    #[test]
    fn single_weight_and_constant_inputs() {
        for bits in [1u8, 3, 8] {
            let m = Matrix::new(1, 1, vec![0.37f32]).unwrap();
            let q = quantize_matrix(&m, &QuantConfig::with_bits(bits)).unwrap();
            assert_eq!(q.indices().get(0), Some(0));
            assert_eq!(q.epsilon(), 0.0);

            let m = Matrix::new(2, 2, vec![-1.5f32; 4]).unwrap();
            let q = quantize_matrix(&m, &QuantConfig::with_bits(bits)).unwrap();
            let codes = bitcodec::unpack_bits(q.indices());
            assert!(codes.iter().all(|&c| c == codes[0]));
            assert_eq!(q.epsilon(), 0.0);
            assert_eq!(dequantize(&q), m);
        }
        let init = init_equal_population(&[2.0f32], 8).unwrap();
        let r = refine(&[2.0f32], init, 10);
        assert_eq!(r.clustering.assignments, vec![0]);
        assert_eq!(r.epsilon, 0.0);
    }

    #[test]
    fn empty_cluster_keeps_previous_centroid() {
        let cents = update_centroids(&[1.0f32, 2.0], &[0, 0], &[7.0, 9.0]);
        assert_eq!(cents, vec![1.5, 9.0]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        assert_eq!(nearest(1.0f32, &[0.0, 2.0]), 0);
        assert_eq!(nearest(1.0f32, &[2.0, 0.0]), 0);
        assert_eq!(nearest(5.0f32, &[3.0, 5.0, 5.0]), 1);
    }

    #[test]
    fn dequantize_worked_example() {
        let m = Matrix::new(3, 3, WORKED_WEIGHTS.to_vec()).unwrap();
        let init = init_equal_population(m.as_slice(), 3).unwrap();
        let mut cents = init.centroids.clone();
        cents.push(cents[2]); // pad to 2^2
        let q = QuantizedMatrix::from_parts(
            3,
            3,
            Codebook::new(cents, 2).unwrap(),
            bitcodec::pack_bits(&init.assignments, 2).unwrap(),
            init.max_error(m.as_slice()),
        )
        .unwrap();
        let dq = dequantize(&q);
        let mid = init.centroids[1];
        assert_eq!(
            dq.as_slice(),
            &[
                mid,
                mid,
                mid,
                init.centroids[0],
                init.centroids[0],
                init.centroids[0],
                init.centroids[2],
                init.centroids[2],
                init.centroids[2]
            ]
        );
        let direct = m
            .as_slice()
            .iter()
            .zip(dq.as_slice())
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max);
        assert!((direct - 0.0166667).abs() < 1e-5, "{direct}");
        assert_eq!(q.epsilon(), f32::from_f64_upward(direct));
    }

    #[test]
    fn centroid_matrix_round_trips_exactly() {
        let vals = [-1.0f32, -0.25, 0.5, 2.0];
        let m = Matrix::from_fn(8, 16, |i, j| vals[(i * 3 + j) % 4]);
        let q = quantize_matrix(&m, &QuantConfig::with_bits(2)).unwrap();
        assert_eq!(dequantize(&q), m);
        assert_eq!(q.epsilon(), 0.0);
    }

    #[test]
    fn rejects_non_finite_and_bad_config() {
        let m = Matrix::new(1, 3, vec![0.0f32, f32::NAN, 1.0]).unwrap();
        assert!(matches!(
            quantize_matrix(&m, &QuantConfig::default()),
            Err(QuantError::NonFinite { index: 1, .. })
        ));
        let m = Matrix::new(1, 2, vec![0.0f32, 1.0]).unwrap();
        assert!(quantize_matrix(&m, &QuantConfig::with_bits(9)).is_err());
        assert!(Matrix::<f32>::new(2, 2, vec![0.0; 3]).is_err());
        assert_eq!(init_equal_population::<f32>(&[], 2), Err(QuantError::Empty));
    }

    fn lcg_matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f32> {
        let mut s = seed;
        Matrix::from_fn(rows, cols, |_, _| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            let u = (s >> 40) as f32 / (1u64 << 24) as f32;
            // skewed distribution so refinement has work to do
            (u * 2.0 - 1.0).powi(3)
        })
    }

    #[test]
    fn deterministic_output() {
        let m = lcg_matrix(16, 40, 7);
        let a = quantize_matrix(&m, &QuantConfig::default()).unwrap();
        let b = quantize_matrix(&m, &QuantConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn bisection_matches_linear_scan(
            centroids in prop::collection::vec(-4i8..4, 1..40),
            weights in prop::collection::vec(-10i16..10, 1..60),
        ) {
            // Coarse grids make duplicate centroids and exact ties common.
            let centroids: Vec<f32> = centroids.iter().map(|&c| c as f32 * 0.5).collect();
            let lookup = NearestCentroid::new(&centroids);
            for w in weights {
                let w = w as f32 * 0.25;
                prop_assert_eq!(lookup.nearest(w), nearest(w, &centroids));
            }
        }

        #[test]
        fn refinement_is_monotone_and_bounded(seed in any::<u64>(), rows in 1usize..12, cols in 1usize..40, bits in 1u8..=4) {
            let m = lcg_matrix(rows, cols, seed);
            let w = m.as_slice();
            let init = init_equal_population(w, 1 << bits).unwrap();
            let init_obj = init.objective(w);
            let r = refine(w, init, 100);
            prop_assert!(r.trajectory.windows(2).all(|t| t[1] <= t[0]));
            prop_assert!(r.objective <= init_obj);

            let q = quantize_matrix(&m, &QuantConfig { bit_width: bits, ..QuantConfig::default() }).unwrap();
            let dq = dequantize(&q);
            let mut max = 0.0f64;
            for (&a, &b) in w.iter().zip(dq.as_slice()) {
                let d = (a as f64 - b as f64).abs();
                prop_assert!(d <= q.epsilon() as f64);
                max = max.max(d);
            }
            prop_assert_eq!(q.epsilon(), f32::from_f64_upward(max));
            let codes = bitcodec::unpack_bits(q.indices());
            prop_assert!(l1_objective(w, &codes, q.codebook().centroids()) <= init_obj + 1e-9);
        }
    }
}
