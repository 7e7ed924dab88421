//! Discrete representation codebook.
//!
//! Features are replaced by their L2-nearest codeword (lowest index wins a
//! tie). Gradients cross the quantization step unchanged through
//! [`Graph::straight_through`]; codewords are maintained either by an
//! exponential moving average of assigned features or by gradient descent
//! on the VQ loss.
//!
//! Squared-norm losses here are means over all entries, not raw sums.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{invalid, Error, Result};
use crate::rng::Prng;
use crate::scalar::Scalar;

/// Weight of the commitment term inside `L_vq + eta * L_comm`.
pub const DEFAULT_ETA: f64 = 0.25;
pub const DEFAULT_GAMMA: f64 = 0.99;
pub const DEFAULT_SIZE: usize = 256;

/// Smallest count used as a divisor when recomputing codewords.
const COUNT_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateMode {
    Ema,
    SgdVq,
    Frozen,
}

impl UpdateMode {
    pub fn name(self) -> &'static str {
        match self {
            UpdateMode::Ema => "ema",
            UpdateMode::SgdVq => "sgd-vq",
            UpdateMode::Frozen => "frozen",
        }
    }

    pub fn code(self) -> u64 {
        match self {
            UpdateMode::Ema => 0,
            UpdateMode::SgdVq => 1,
            UpdateMode::Frozen => 2,
        }
    }

    pub fn from_code(code: u64) -> Option<Self> {
        match code {
            0 => Some(UpdateMode::Ema),
            1 => Some(UpdateMode::SgdVq),
            2 => Some(UpdateMode::Frozen),
            _ => None,
        }
    }
}

/// `N` codewords of dimension `d_c` plus EMA accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    codewords: Tensor<T>,
    ema_counts: Vec<T>,
    ema_sums: Vec<T>,
    gamma: T,
    mode: UpdateMode,
}

/// `h x w` grid of `d_c`-dimensional vectors, row-major, channels last.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<T>,
    pub assignment: Option<Vec<usize>>,
}

impl<T: Scalar> FeatureGrid<T> {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<T>) -> Result<Self> {
        if height * width * channels != values.len() || channels == 0 {
            return Err(Error::ShapeMismatch {
                op: "feature_grid",
                detail: format!("{height}x{width}x{channels} vs {} values", values.len()),
            });
        }
        Ok(Self { height, width, channels, values, assignment: None })
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn cell(&self, i: usize, j: usize) -> &[T] {
        let start = (i * self.width + j) * self.channels;
        &self.values[start..start + self.channels]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizeResult<T> {
    pub quantized: FeatureGrid<T>,
    pub indices: Vec<usize>,
    pub sq_distances: Vec<T>,
}

/// Usage summary of a set of assignments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodewordStats {
    pub histogram: Vec<u64>,
    pub perplexity: f64,
    pub dead: usize,
}

impl<T: Scalar> Codebook<T> {
    /// `N_v = 1`, `m_v ~ N(0, I)` drawn row-major from `seed`, `e_v = m_v`.
    pub fn init(size: usize, dim: usize, gamma: T, mode: UpdateMode, seed: u64) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(invalid(format!("codebook needs N >= 1 and d_c >= 1, got {size}x{dim}")));
        }
        if !(gamma >= T::zero() && gamma <= T::one()) {
            return Err(invalid(format!("codebook decay must lie in [0, 1], got {gamma}")));
        }
        let mut rng = Prng::new(seed);
        let sums: Vec<T> = (0..size * dim).map(|_| T::of(rng.normal())).collect();
        Ok(Self {
            codewords: Tensor::matrix(size, dim, sums.clone())?,
            ema_counts: vec![T::one(); size],
            ema_sums: sums,
            gamma,
            mode,
        })
    }

    /// Assembles a codebook from stored parts (checkpoint loading).
    pub fn from_parts(codewords: Tensor<T>, ema_counts: Vec<T>, ema_sums: Vec<T>, gamma: T, mode: UpdateMode) -> Result<Self> {
        let (size, _) = codewords.rows_cols();
        if codewords.shape().len() != 2 || ema_counts.len() != size || ema_sums.len() != codewords.len() {
            return Err(invalid("codebook parts have inconsistent sizes"));
        }
        Ok(Self { codewords, ema_counts, ema_sums, gamma, mode })
    }

    pub fn size(&self) -> usize {
        self.codewords.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.codewords.shape()[1]
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    pub fn mode(&self) -> UpdateMode {
        self.mode
    }

    pub fn codewords(&self) -> &Tensor<T> {
        &self.codewords
    }

    /// Mutable codewords for gradient training (SGD-VQ).
    pub fn codewords_mut(&mut self) -> &mut Tensor<T> {
        &mut self.codewords
    }

    pub fn codeword(&self, v: usize) -> &[T] {
        let d = self.dim();
        &self.codewords.values()[v * d..(v + 1) * d]
    }

    pub fn ema_counts(&self) -> &[T] {
        &self.ema_counts
    }

    pub fn ema_sums(&self) -> &[T] {
        &self.ema_sums
    }

    /// Nearest codeword and its squared distance for one vector.
    pub fn nearest(&self, x: &[T]) -> (usize, T) {
        let mut best = (0, T::infinity());
        for (v, e) in self.codewords.values().chunks_exact(self.dim()).enumerate() {
            let mut d = T::zero();
            for (&a, &b) in x.iter().zip(e) {
                let diff = a - b;
                d = d + diff * diff;
            }
            if d < best.1 {
                best = (v, d);
            }
        }
        best
    }

    /// Quantizes consecutive `d_c`-vectors of `rows`.
    pub fn quantize_rows(&self, rows: &[T]) -> Result<(Vec<usize>, Vec<T>)> {
        let d = self.dim();
        if rows.len() % d != 0 {
            return Err(Error::ShapeMismatch {
                op: "quantize",
                detail: format!("{} values are not a multiple of d_c = {d}", rows.len()),
            });
        }
        Ok(rows.chunks_exact(d).map(|x| self.nearest(x)).unzip())
    }

    /// Codewords for the given indices, concatenated.
    pub fn lookup(&self, indices: &[usize]) -> Vec<T> {
        let mut out = Vec::with_capacity(indices.len() * self.dim());
        for &k in indices {
            out.extend_from_slice(self.codeword(k));
        }
        out
    }

    pub fn quantize(&self, grid: &FeatureGrid<T>) -> Result<QuantizeResult<T>> {
        if grid.channels != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "quantize",
                detail: format!("grid channels {} vs codeword dimension {}", grid.channels, self.dim()),
            });
        }
        let (indices, sq_distances) = self.quantize_rows(&grid.values)?;
        let mut quantized = FeatureGrid::new(grid.height, grid.width, grid.channels, self.lookup(&indices))?;
        quantized.assignment = Some(indices.clone());
        Ok(QuantizeResult { quantized, indices, sq_distances })
    }

    /// Quantizes the `(rows, d_c)` value of `z` and records a straight-through
    /// node whose forward value is the quantized tensor.
    pub fn quantize_straight_through(&self, graph: &mut Graph<T>, z: NodeId) -> Result<(NodeId, Vec<usize>, Vec<T>)> {
        let zv = graph.value(z);
        if zv.rows_cols().1 != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "quantize",
                detail: format!("feature dimension {} vs codeword dimension {}", zv.rows_cols().1, self.dim()),
            });
        }
        let shape = zv.shape().to_vec();
        let (indices, dists) = self.quantize_rows(zv.values())?;
        let zq = Tensor::new(shape, self.lookup(&indices))?;
        let node = graph.straight_through(z, zq)?;
        Ok((node, indices, dists))
    }

    /// `N_v <- g N_v + (1-g)|H_v|`, `m_v <- g m_v + (1-g) sum(H_v)`,
    /// `e_v = m_v / N_v` for every codeword, including unassigned ones.
    pub fn ema_update_rows(&mut self, rows: &[T], assignment: &[usize]) -> Result<()> {
        if self.mode != UpdateMode::Ema {
            return Err(Error::WrongMode { mode: self.mode.name(), what: "ema_update" });
        }
        let (n, d) = (self.size(), self.dim());
        if rows.len() != assignment.len() * d {
            return Err(Error::ShapeMismatch {
                op: "ema_update",
                detail: format!("{} assignments for {} values of dimension {d}", assignment.len(), rows.len()),
            });
        }
        if let Some(&bad) = assignment.iter().find(|&&k| k >= n) {
            return Err(invalid(format!("assignment {bad} out of range for {n} codewords")));
        }
        let mut counts = vec![T::zero(); n];
        let mut sums = vec![T::zero(); n * d];
        for (x, &k) in rows.chunks_exact(d).zip(assignment) {
            counts[k] = counts[k] + T::one();
            for (s, &xv) in sums[k * d..(k + 1) * d].iter_mut().zip(x) {
                *s = *s + xv;
            }
        }
        let keep = self.gamma;
        let take = T::one() - self.gamma;
        let floor = T::of(COUNT_FLOOR);
        let codewords = self.codewords.values_mut();
        for v in 0..n {
            self.ema_counts[v] = keep * self.ema_counts[v] + take * counts[v];
            let denom = self.ema_counts[v].max(floor);
            for c in v * d..(v + 1) * d {
                self.ema_sums[c] = keep * self.ema_sums[c] + take * sums[c];
                codewords[c] = self.ema_sums[c] / denom;
            }
        }
        Ok(())
    }

    pub fn ema_update(&mut self, grid: &FeatureGrid<T>, assignment: &[usize]) -> Result<()> {
        if assignment.len() != grid.cells() || grid.channels != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "ema_update",
                detail: format!("{} assignments for a {}x{} grid", assignment.len(), grid.height, grid.width),
            });
        }
        self.ema_update_rows(&grid.values, assignment)
    }

    /// Re-seeds every codeword whose EMA count fell below `threshold` with a
    /// random row of `rows`. Returns how many were replaced.
    pub fn reseed_dead(&mut self, rows: &[T], threshold: T, rng: &mut Prng) -> usize {
        let d = self.dim();
        let available = rows.len() / d;
        if available == 0 {
            return 0;
        }
        let mut replaced = 0;
        for v in 0..self.size() {
            if self.ema_counts[v] < threshold {
                let pick = rng.below(available);
                let src = &rows[pick * d..(pick + 1) * d];
                self.ema_counts[v] = T::one();
                self.ema_sums[v * d..(v + 1) * d].copy_from_slice(src);
                self.codewords.values_mut()[v * d..(v + 1) * d].copy_from_slice(src);
                replaced += 1;
            }
        }
        replaced
    }
}

/// Mean of squared entries of `a - b` where `b` is a constant.
fn mean_square_to_constant<T: Scalar>(graph: &mut Graph<T>, a: NodeId, b: &Tensor<T>) -> Result<NodeId> {
    let target = graph.constant(b.clone());
    let diff = graph.sub(a, target)?;
    let sq = graph.squared_l2(diff)?;
    let count = T::of_usize(b.len());
    graph.scale(sq, T::one() / count)
}

/// `mean((Z - sg(Zq))^2)`: gradient reaches `z` only.
pub fn commitment_loss<T: Scalar>(graph: &mut Graph<T>, z: NodeId, zq: &Tensor<T>) -> Result<NodeId> {
    if graph.value(z).shape() != zq.shape() {
        return Err(Error::ShapeMismatch {
            op: "commitment_loss",
            detail: format!("{:?} vs {:?}", graph.value(z).shape(), zq.shape()),
        });
    }
    mean_square_to_constant(graph, z, zq)
}

/// `mean((sg(Z) - Zq)^2)` with `Zq` gathered from the codeword table node, so
/// the gradient reaches the selected codewords only.
pub fn vq_loss_sgd<T: Scalar>(
    graph: &mut Graph<T>,
    mode: UpdateMode,
    z: &Tensor<T>,
    codewords: NodeId,
    indices: &[usize],
) -> Result<NodeId> {
    if mode != UpdateMode::SgdVq {
        return Err(Error::WrongMode { mode: mode.name(), what: "vq_loss_sgd" });
    }
    let zq = graph.gather_rows(codewords, indices)?;
    if graph.value(zq).len() != z.len() {
        return Err(Error::ShapeMismatch {
            op: "vq_loss_sgd",
            detail: format!("{} features vs {} gathered values", z.len(), graph.value(zq).len()),
        });
    }
    let z = Tensor::new(graph.value(zq).shape().to_vec(), z.values().to_vec())?;
    mean_square_to_constant(graph, zq, &z)
}

/// Histogram, perplexity `exp(H)` (natural log) and dead-codeword count.
pub fn codeword_stats(assignments: &[usize], size: usize) -> Result<CodewordStats> {
    if assignments.is_empty() {
        return Err(invalid("codeword statistics need at least one assignment"));
    }
    let mut histogram = vec![0u64; size];
    for &k in assignments {
        if k >= size {
            return Err(invalid(format!("assignment {k} out of range for {size} codewords")));
        }
        histogram[k] += 1;
    }
    let total = assignments.len() as f64;
    let mut entropy = 0.0;
    for &c in &histogram {
        if c > 0 {
            let p = c as f64 / total;
            entropy -= p * p.ln();
        }
    }
    let dead = histogram.iter().filter(|&&c| c == 0).count();
    Ok(CodewordStats { histogram, perplexity: entropy.exp(), dead })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn book(words: &[[f64; 2]], mode: UpdateMode) -> Codebook<f64> {
        let flat: Vec<f64> = words.iter().flatten().copied().collect();
        let n = words.len();
        Codebook::from_parts(Tensor::matrix(n, 2, flat.clone()).unwrap(), vec![1.0; n], flat, 0.99, mode).unwrap()
    }

    fn grid(cells: &[[f64; 2]]) -> FeatureGrid<f64> {
        FeatureGrid::new(1, cells.len(), 2, cells.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn init_counts_and_determinism() {
        let a = Codebook::<f64>::init(DEFAULT_SIZE, 4, 0.99, UpdateMode::Ema, 3).unwrap();
        let b = Codebook::<f64>::init(DEFAULT_SIZE, 4, 0.99, UpdateMode::Ema, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.ema_counts().iter().all(|&c| c == 1.0));
        assert_eq!(a.codewords().values(), a.ema_sums());
        assert_eq!(a.size(), 256);
        assert!(Codebook::<f64>::init(0, 4, 0.99, UpdateMode::Ema, 3).is_err());
        assert!(Codebook::<f64>::init(4, 0, 0.99, UpdateMode::Ema, 3).is_err());
    }

    #[test]
    fn quantize_exact_codeword() {
        let cb = book(&[[1.0, 0.0], [0.0, 2.0], [-0.5, 0.0]], UpdateMode::Ema);
        let r = cb.quantize(&grid(&[[0.0, 2.0]])).unwrap();
        assert_eq!(r.indices, vec![1]);
        assert_eq!(r.sq_distances, vec![0.0]);
    }

    #[test]
    fn quantize_picks_nearest() {
        let cb = book(&[[1.0, 0.0], [0.0, 2.0], [-0.5, 0.0]], UpdateMode::Ema);
        let r = cb.quantize(&grid(&[[0.0, 0.0]])).unwrap();
        // brute force: 1, 4, 0.25
        assert_eq!(r.indices, vec![2]);
        assert_eq!(r.sq_distances, vec![0.25]);
        assert_eq!(r.quantized.cell(0, 0), &[-0.5, 0.0]);
    }

    #[test]
    fn quantize_tie_goes_to_lowest_index() {
        let cb = book(&[[1.0, 0.0], [0.0, 0.0]], UpdateMode::Ema);
        let r = cb.quantize(&grid(&[[0.5, 0.0]])).unwrap();
        assert_eq!(r.indices, vec![0]);
    }

    #[test]
    fn quantize_dimension_mismatch() {
        let cb = book(&[[1.0, 0.0]], UpdateMode::Ema);
        let g = FeatureGrid::new(1, 1, 3, vec![0.0; 3]).unwrap();
        assert!(cb.quantize(&g).is_err());
    }

    #[test]
    fn commitment_loss_mean_convention() {
        let mut g = Graph::new();
        let z = g.param(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let zq = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let l = commitment_loss(&mut g, z, &zq).unwrap();
        assert_eq!(g.value(l).item(), 0.5);
        g.backward(l).unwrap();
        assert_eq!(g.grad(z).unwrap(), &[1.0, 0.0]);

        let mut g = Graph::new();
        let z = g.param(zq.clone());
        let l = commitment_loss(&mut g, z, &zq).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn vq_loss_grad_reaches_selected_codeword_only() {
        let mut g = Graph::new();
        let table = g.param(Tensor::matrix(2, 2, vec![0.0, 0.0, 5.0, 5.0]).unwrap());
        let z = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let l = vq_loss_sgd(&mut g, UpdateMode::SgdVq, &z, table, &[0]).unwrap();
        assert_eq!(g.value(l).item(), 0.5);
        g.backward(l).unwrap();
        assert_eq!(g.grad(table).unwrap(), &[-1.0, 0.0, 0.0, 0.0]);

        let mut g = Graph::new();
        let table = g.param(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let l = vq_loss_sgd(&mut g, UpdateMode::SgdVq, &z, table, &[0]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        assert!(matches!(
            vq_loss_sgd(&mut g, UpdateMode::Ema, &z, table, &[0]),
            Err(Error::WrongMode { .. })
        ));
    }

    #[test]
    fn ema_recurrence_example() {
        let mut cb = Codebook::<f64>::from_parts(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(), vec![1.0], vec![0.0, 0.0], 0.99, UpdateMode::Ema).unwrap();
        cb.ema_update_rows(&[1.0, 1.0, 3.0, 3.0], &[0, 0]).unwrap();
        let n = 0.99 * 1.0 + 0.01 * 2.0;
        let m = 0.01 * 4.0;
        assert!((cb.ema_counts()[0] - 1.01).abs() < 1e-12);
        assert!((cb.ema_sums()[0] - 0.04).abs() < 1e-12);
        assert!((cb.codeword(0)[0] - m / n).abs() < 1e-12);
        assert!((cb.codeword(0)[1] - 0.039604).abs() < 1e-6);
    }

    #[test]
    fn ema_gamma_zero_gives_centroid_and_decays_unused() {
        let mut cb = book(&[[9.0, 9.0], [4.0, 4.0]], UpdateMode::Ema);
        cb.gamma = 0.0;
        cb.ema_update_rows(&[1.0, 1.0, 3.0, 3.0], &[0, 0]).unwrap();
        assert_eq!(cb.codeword(0), &[2.0, 2.0]);
        assert_eq!(cb.ema_counts()[1], 0.0);

        let mut cb = book(&[[9.0, 9.0], [4.0, 4.0]], UpdateMode::Ema);
        cb.ema_update_rows(&[1.0, 1.0], &[0]).unwrap();
        assert!((cb.ema_counts()[1] - 0.99).abs() < 1e-15);
        assert!((cb.codeword(1)[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn ema_rejects_wrong_mode_and_mismatch() {
        let mut cb = book(&[[0.0, 0.0]], UpdateMode::SgdVq);
        assert!(matches!(cb.ema_update_rows(&[1.0, 1.0], &[0]), Err(Error::WrongMode { .. })));
        let mut cb = book(&[[0.0, 0.0]], UpdateMode::Ema);
        assert!(cb.ema_update_rows(&[1.0, 1.0], &[0, 0]).is_err());
        assert!(cb.ema_update_rows(&[1.0, 1.0], &[3]).is_err());
        let g = grid(&[[1.0, 1.0], [2.0, 2.0]]);
        assert!(cb.ema_update(&g, &[0]).is_err());
    }

    #[test]
    fn reseed_replaces_low_count_codewords() {
        let mut cb = book(&[[0.0, 0.0], [9.0, 9.0]], UpdateMode::Ema);
        cb.ema_counts[1] = 1e-6;
        let mut rng = Prng::new(0);
        let n = cb.reseed_dead(&[5.0, 6.0], 1e-3, &mut rng);
        assert_eq!(n, 1);
        assert_eq!(cb.codeword(1), &[5.0, 6.0]);
        assert_eq!(cb.ema_counts()[1], 1.0);
    }

    #[test]
    fn stats_examples() {
        let s = codeword_stats(&[3, 3, 3, 3], 4).unwrap();
        assert!((s.perplexity - 1.0).abs() < 1e-12);
        assert_eq!(s.dead, 3);
        let s = codeword_stats(&[0, 1, 2, 3], 4).unwrap();
        assert!((s.perplexity - 4.0).abs() < 1e-12);
        let s = codeword_stats(&[0, 0, 1, 2], 3).unwrap();
        // entropy of (1/2, 1/4, 1/4) is 1.5 bits
        assert!((s.perplexity - 2f64.powf(1.5)).abs() < 1e-12);
        assert_eq!(s.histogram.iter().sum::<u64>(), 4);
        assert!(codeword_stats(&[], 3).is_err());
    }

    #[test]
    fn straight_through_copies_gradient() {
        let cb = book(&[[1.0, 0.0], [0.0, 1.0]], UpdateMode::Ema);
        let mut g = Graph::new();
        let z = g.param(Tensor::matrix(2, 2, vec![0.9, 0.2, 0.1, 0.7]).unwrap());
        let (zq, idx, _) = cb.quantize_straight_through(&mut g, z).unwrap();
        assert_eq!(idx, vec![0, 1]);
        let w = g.constant(Tensor::matrix(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let y = g.mul(zq, w).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(z).unwrap(), g.grad(zq).unwrap());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn quantization_is_idempotent(seed in any::<u64>(), cells in 1usize..20) {
                let cb = Codebook::<f64>::init(16, 3, 0.99, UpdateMode::Ema, seed).unwrap();
                let mut rng = Prng::new(seed ^ 1);
                let z = FeatureGrid::new(1, cells, 3, (0..cells * 3).map(|_| 2.0 * rng.normal()).collect()).unwrap();
                let first = cb.quantize(&z).unwrap();
                let second = cb.quantize(&first.quantized).unwrap();
                prop_assert_eq!(&first.indices, &second.indices);
                prop_assert!(second.sq_distances.iter().all(|&d| d == 0.0));
            }

            #[test]
            fn ema_keeps_codeword_ratio(seed in any::<u64>(), steps in 1usize..6) {
                let mut cb = Codebook::<f64>::init(8, 2, 0.9, UpdateMode::Ema, seed).unwrap();
                let mut rng = Prng::new(seed ^ 7);
                for _ in 0..steps {
                    let rows: Vec<f64> = (0..20).map(|_| rng.normal()).collect();
                    let (idx, _) = cb.quantize_rows(&rows).unwrap();
                    cb.ema_update_rows(&rows, &idx).unwrap();
                    for v in 0..8 {
                        prop_assert!(cb.ema_counts()[v] > 0.0);
                        for c in 0..2 {
                            let ratio = cb.ema_sums()[v * 2 + c] / cb.ema_counts()[v];
                            prop_assert!((cb.codeword(v)[c] - ratio).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }
}
