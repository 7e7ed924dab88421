//! Distribution gaps before and after discretization.
//!
//! For densities `P`, `Q` on `[lo, hi]` and a bound `B` on the test
//! functions, the continuous gap is `B * integral |P - Q|` and the discrete
//! gap after collapsing each cell of a uniform partition onto its midpoint
//! is `B * sum_cells |P(cell) - Q(cell)|`. The triangle inequality gives
//! `discrete <= continuous`, with equality on a cell exactly when `P - Q`
//! keeps one sign there.
//!
//! Densities are piecewise constant, so every integral is a finite sum.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::Prng;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseDensity<T> {
    breakpoints: Vec<T>,
    densities: Vec<T>,
}

impl<T: Scalar> PiecewiseDensity<T> {
    /// `breakpoints` strictly increasing, one nonnegative density per cell,
    /// total mass 1.
    pub fn new(breakpoints: Vec<T>, densities: Vec<T>) -> Result<Self> {
        if breakpoints.len() < 2 || densities.len() + 1 != breakpoints.len() {
            return Err(Error::InvalidDensity(format!(
                "{} breakpoints need {} densities, got {}",
                breakpoints.len(),
                breakpoints.len().saturating_sub(1),
                densities.len()
            )));
        }
        if breakpoints.windows(2).any(|w| !(w[0] < w[1])) || breakpoints.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidDensity("breakpoints must be finite and strictly increasing".into()));
        }
        if densities.iter().any(|&d| !(d >= T::zero()) || !d.is_finite()) {
            return Err(Error::InvalidDensity("densities must be finite and nonnegative".into()));
        }
        let density = Self { breakpoints, densities };
        let mass = density.total_mass();
        if (mass - T::one()).abs() > T::tight_tolerance() {
            return Err(Error::InvalidDensity(format!("total mass {mass} is not 1")));
        }
        Ok(density)
    }

    /// Normalizes nonnegative weights to a density.
    pub fn from_weights(breakpoints: Vec<T>, weights: Vec<T>) -> Result<Self> {
        if weights.len() + 1 != breakpoints.len() {
            return Err(Error::InvalidDensity("weights and breakpoints disagree".into()));
        }
        let mut mass = T::zero();
        for (w, &d) in breakpoints.windows(2).zip(&weights) {
            mass = mass + d * (w[1] - w[0]);
        }
        if !(mass > T::zero()) {
            return Err(Error::InvalidDensity("weights carry no mass".into()));
        }
        Self::new(breakpoints, weights.into_iter().map(|d| d / mass).collect())
    }

    pub fn uniform(lo: T, hi: T) -> Result<Self> {
        Self::new(vec![lo, hi], vec![T::one() / (hi - lo)])
    }

    pub fn lo(&self) -> T {
        self.breakpoints[0]
    }

    pub fn hi(&self) -> T {
        *self.breakpoints.last().unwrap()
    }

    pub fn breakpoints(&self) -> &[T] {
        &self.breakpoints
    }

    pub fn densities(&self) -> &[T] {
        &self.densities
    }

    pub fn total_mass(&self) -> T {
        self.mass(self.lo(), self.hi())
    }

    /// Density at `x`; right-continuous, zero outside the support.
    pub fn density_at(&self, x: T) -> T {
        if x < self.lo() || x >= self.hi() {
            return T::zero();
        }
        let cell = self.breakpoints.partition_point(|&b| b <= x) - 1;
        self.densities[cell]
    }

    /// `integral_a^b P(x) dx`.
    pub fn mass(&self, a: T, b: T) -> T {
        let mut total = T::zero();
        for (w, &d) in self.breakpoints.windows(2).zip(&self.densities) {
            let lo = w[0].max(a);
            let hi = w[1].min(b);
            if hi > lo {
                total = total + d * (hi - lo);
            }
        }
        total
    }
}

/// Uniform partition of `[lo, hi]` into `cells` intervals.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition<T> {
    edges: Vec<T>,
}

impl<T: Scalar> Partition<T> {
    pub fn uniform(lo: T, hi: T, cells: usize) -> Result<Self> {
        if cells == 0 || !(lo < hi) {
            return Err(invalid(format!("cannot split [{lo}, {hi}] into {cells} cells")));
        }
        let width = (hi - lo) / T::of_usize(cells);
        let mut edges: Vec<T> = (0..cells).map(|i| lo + width * T::of_usize(i)).collect();
        edges.push(hi);
        Self::from_edges(edges)
    }

    pub fn from_edges(edges: Vec<T>) -> Result<Self> {
        if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(invalid("partition edges must be strictly increasing"));
        }
        Ok(Self { edges })
    }

    pub fn edges(&self) -> &[T] {
        &self.edges
    }

    pub fn cells(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn lo(&self) -> T {
        self.edges[0]
    }

    pub fn hi(&self) -> T {
        *self.edges.last().unwrap()
    }

    /// Cell containing `x`, clamping values outside `[lo, hi]` to the end cells.
    pub fn cell_of(&self, x: T) -> usize {
        let idx = self.edges.partition_point(|&e| e <= x);
        idx.clamp(1, self.cells()) - 1
    }

    /// True when every edge of `self` is also an edge of `fine`.
    pub fn is_refined_by(&self, fine: &Self) -> bool {
        self.edges.iter().all(|e| fine.edges.contains(e))
    }
}

/// Atoms at cell midpoints with the cell masses.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDistribution<T> {
    pub atoms: Vec<T>,
    pub masses: Vec<T>,
}

fn check_support<T: Scalar>(p: &PiecewiseDensity<T>, lo: T, hi: T) -> Result<()> {
    if p.lo() != lo || p.hi() != hi {
        return Err(invalid(format!(
            "support [{}, {}] does not match [{lo}, {hi}]",
            p.lo(),
            p.hi()
        )));
    }
    Ok(())
}

fn check_bound<T: Scalar>(b_phi: T) -> Result<()> {
    if !(b_phi >= T::zero()) || !b_phi.is_finite() {
        return Err(invalid(format!("B_phi must be finite and nonnegative, got {b_phi}")));
    }
    Ok(())
}

/// Merged breakpoints of both densities.
fn merged_breakpoints<T: Scalar>(p: &PiecewiseDensity<T>, q: &PiecewiseDensity<T>) -> Vec<T> {
    let mut all: Vec<T> = p.breakpoints.iter().chain(&q.breakpoints).copied().collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.dedup();
    all
}

/// `integral_a^b |P - Q|`, exact for piecewise-constant densities.
fn abs_diff_integral<T: Scalar>(p: &PiecewiseDensity<T>, q: &PiecewiseDensity<T>, merged: &[T], a: T, b: T) -> T {
    let mut total = T::zero();
    for w in merged.windows(2) {
        let lo = w[0].max(a);
        let hi = w[1].min(b);
        if hi > lo {
            let mid = w[0] + (w[1] - w[0]) / T::of(2.0);
            total = total + (p.density_at(mid) - q.density_at(mid)).abs() * (hi - lo);
        }
    }
    total
}

/// `B * integral |P - Q| dx` over the shared support.
pub fn continuous_gap<T: Scalar>(p: &PiecewiseDensity<T>, q: &PiecewiseDensity<T>, b_phi: T) -> Result<T> {
    check_support(q, p.lo(), p.hi())?;
    check_bound(b_phi)?;
    let merged = merged_breakpoints(p, q);
    Ok(b_phi * abs_diff_integral(p, q, &merged, p.lo(), p.hi()))
}

/// One atom per cell at `(a + b) / 2` carrying `integral_a^b P`.
pub fn discretize<T: Scalar>(p: &PiecewiseDensity<T>, partition: &Partition<T>) -> Result<DiscreteDistribution<T>> {
    check_support(p, partition.lo(), partition.hi())?;
    let two = T::of(2.0);
    let (atoms, masses) = partition.edges.windows(2).map(|w| ((w[0] + w[1]) / two, p.mass(w[0], w[1]))).unzip();
    Ok(DiscreteDistribution { atoms, masses })
}

/// `B * sum_v |P_d(v) - Q_d(v)|`.
pub fn discrete_gap<T: Scalar>(pd: &DiscreteDistribution<T>, qd: &DiscreteDistribution<T>, b_phi: T) -> Result<T> {
    if pd.atoms != qd.atoms {
        return Err(invalid("discrete distributions live on different partitions"));
    }
    check_bound(b_phi)?;
    let mut total = T::zero();
    for (&a, &b) in pd.masses.iter().zip(&qd.masses) {
        total = total + (a - b).abs();
    }
    Ok(b_phi * total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalContribution {
    pub lo: f64,
    pub hi: f64,
    pub continuous: f64,
    pub discrete: f64,
    /// `P - Q` keeps one sign on the interval, so both contributions agree.
    pub sign_constant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub continuous_gap: f64,
    pub discrete_gap: f64,
    pub b_phi: f64,
    pub intervals: Vec<IntervalContribution>,
}

fn sign_constant_on<T: Scalar>(p: &PiecewiseDensity<T>, q: &PiecewiseDensity<T>, merged: &[T], a: T, b: T) -> bool {
    let mut pos = false;
    let mut neg = false;
    for w in merged.windows(2) {
        if w[1].min(b) > w[0].max(a) {
            let mid = w[0].max(a) + (w[1].min(b) - w[0].max(a)) / T::of(2.0);
            let d = p.density_at(mid) - q.density_at(mid);
            pos |= d > T::zero();
            neg |= d < T::zero();
        }
    }
    !(pos && neg)
}

/// Both gaps with per-interval contributions. A discrete gap exceeding the
/// continuous one beyond rounding is an error.
pub fn theorem_check<T: Scalar>(
    p: &PiecewiseDensity<T>,
    q: &PiecewiseDensity<T>,
    partition: &Partition<T>,
    b_phi: T,
) -> Result<GapReport> {
    check_support(p, partition.lo(), partition.hi())?;
    let continuous = continuous_gap(p, q, b_phi)?;
    let pd = discretize(p, partition)?;
    let qd = discretize(q, partition)?;
    let discrete = discrete_gap(&pd, &qd, b_phi)?;
    let merged = merged_breakpoints(p, q);
    let intervals = partition
        .edges
        .windows(2)
        .enumerate()
        .map(|(i, w)| IntervalContribution {
            lo: w[0].to_f64_lossy(),
            hi: w[1].to_f64_lossy(),
            continuous: (b_phi * abs_diff_integral(p, q, &merged, w[0], w[1])).to_f64_lossy(),
            discrete: (b_phi * (pd.masses[i] - qd.masses[i]).abs()).to_f64_lossy(),
            sign_constant: sign_constant_on(p, q, &merged, w[0], w[1]),
        })
        .collect();
    if discrete > continuous + T::tight_tolerance() {
        return Err(Error::GapViolation { continuous: continuous.to_f64_lossy(), discrete: discrete.to_f64_lossy() });
    }
    Ok(GapReport {
        continuous_gap: continuous.to_f64_lossy(),
        discrete_gap: discrete.to_f64_lossy(),
        b_phi: b_phi.to_f64_lossy(),
        intervals,
    })
}

/// Outcome of the randomized inequality suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub cases: usize,
    pub violations: usize,
    pub equality_cases: usize,
    pub equality_failures: usize,
    /// Largest `discrete - continuous` seen (nonpositive when all hold).
    pub max_excess: f64,
    /// Largest `|continuous - discrete|` over the equality cases.
    pub max_equality_error: f64,
}

/// Random piecewise-constant density on `[0, 1]` with 1..=`max_cells` cells.
pub fn random_density(rng: &mut Prng, max_cells: usize) -> PiecewiseDensity<f64> {
    let cells = 1 + rng.below(max_cells);
    let mut inner: Vec<f64> = (0..cells - 1).map(|_| rng.uniform()).collect();
    inner.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut breakpoints = vec![0.0];
    for x in inner {
        if x > *breakpoints.last().unwrap() && x < 1.0 {
            breakpoints.push(x);
        }
    }
    breakpoints.push(1.0);
    let weights = (0..breakpoints.len() - 1).map(|_| rng.uniform() + 1e-3).collect();
    PiecewiseDensity::from_weights(breakpoints, weights).expect("positive weights normalize")
}

/// Pair on `[0, 1]` whose difference keeps one sign on every cell of the
/// uniform `cells`-partition (and flips sign across cells), so the
/// discretized gap equals the continuous gap.
pub fn sign_constant_pair(rng: &mut Prng, cells: usize) -> (PiecewiseDensity<f64>, PiecewiseDensity<f64>, Partition<f64>) {
    let cells = cells.max(2);
    let partition = Partition::uniform(0.0, 1.0, cells).unwrap();
    let sub = 4;
    let mut breakpoints = Vec::with_capacity(cells * sub + 1);
    for w in partition.edges().windows(2) {
        for s in 0..sub {
            breakpoints.push(w[0] + (w[1] - w[0]) * s as f64 / sub as f64);
        }
    }
    breakpoints.push(1.0);
    breakpoints.dedup();
    let n = breakpoints.len() - 1;
    let lengths: Vec<f64> = breakpoints.windows(2).map(|w| w[1] - w[0]).collect();
    let cell_of = |i: usize| partition.cell_of((breakpoints[i] + breakpoints[i + 1]) / 2.0);
    // alternating signs guarantee both a positive and a negative cell
    let sign = |c: usize| if c % 2 == 0 { 1.0 } else { -1.0 };
    let shape: Vec<f64> = (0..n).map(|_| rng.uniform() + 0.1).collect();
    let mut pos_mass = 0.0;
    let mut neg_mass = 0.0;
    for i in 0..n {
        if sign(cell_of(i)) > 0.0 {
            pos_mass += shape[i] * lengths[i];
        } else {
            neg_mass += shape[i] * lengths[i];
        }
    }
    let base: Vec<f64> = (0..n).map(|_| 0.5 + rng.uniform()).collect();
    let base_mass: f64 = base.iter().zip(&lengths).map(|(b, l)| b * l).sum();
    let base: Vec<f64> = base.iter().map(|b| b / base_mass).collect();
    // scale so the negative bump stays below the base density
    let min_ratio = (0..n)
        .filter(|&i| sign(cell_of(i)) < 0.0)
        .map(|i| base[i] / (shape[i] / neg_mass))
        .fold(f64::INFINITY, f64::min);
    let amplitude = 0.5 * min_ratio;
    let delta: Vec<f64> = (0..n)
        .map(|i| {
            let s = sign(cell_of(i));
            let norm = if s > 0.0 { pos_mass } else { neg_mass };
            s * amplitude * shape[i] / norm
        })
        .collect();
    let q_weights: Vec<f64> = base.clone();
    let p_weights: Vec<f64> = base.iter().zip(&delta).map(|(b, d)| b + d).collect();
    let p = PiecewiseDensity::from_weights(breakpoints.clone(), p_weights).unwrap();
    let q = PiecewiseDensity::from_weights(breakpoints, q_weights).unwrap();
    (p, q, partition)
}

/// Runs `cases` random pairs against random uniform partitions for every
/// bound in `bounds`, plus as many sign-constant pairs checked for equality.
pub fn randomized_suite(seed: u64, cases: usize, bounds: &[f64]) -> SuiteSummary {
    let mut rng = Prng::new(seed);
    let tol = 1e-12;
    let mut summary = SuiteSummary {
        cases: 0,
        violations: 0,
        equality_cases: 0,
        equality_failures: 0,
        max_excess: f64::NEG_INFINITY,
        max_equality_error: 0.0,
    };
    for _ in 0..cases {
        let p = random_density(&mut rng, 12);
        let q = random_density(&mut rng, 12);
        let cells = 1 + rng.below(16);
        let partition = Partition::uniform(0.0, 1.0, cells).unwrap();
        for &b in bounds {
            summary.cases += 1;
            let cont = continuous_gap(&p, &q, b).unwrap();
            let disc = discrete_gap(&discretize(&p, &partition).unwrap(), &discretize(&q, &partition).unwrap(), b).unwrap();
            summary.max_excess = summary.max_excess.max(disc - cont);
            if disc > cont + tol {
                summary.violations += 1;
            }
        }
        let eq_cells = 2 + rng.below(10);
        let (p, q, partition) = sign_constant_pair(&mut rng, eq_cells);
        for &b in bounds {
            summary.equality_cases += 1;
            let cont = continuous_gap(&p, &q, b).unwrap();
            let disc = discrete_gap(&discretize(&p, &partition).unwrap(), &discretize(&q, &partition).unwrap(), b).unwrap();
            let err = (cont - disc).abs();
            summary.max_equality_error = summary.max_equality_error.max(err);
            if err > tol {
                summary.equality_failures += 1;
            }
        }
    }
    summary
}

/// Integer histogram over `bins` cells.
fn histogram(cells: impl Iterator<Item = usize>, bins: usize) -> Vec<u64> {
    let mut h = vec![0u64; bins];
    for c in cells {
        h[c] += 1;
    }
    h
}

/// L1 distance between two normalized histograms given as raw counts,
/// computed as `sum |a_i n_b - b_i n_a| / (n_a n_b)` in exact integers.
pub fn normalized_l1<I>(pairs: I, total_a: u64, total_b: u64) -> Result<f64>
where
    I: IntoIterator<Item = (u64, u64)>,
{
    if total_a == 0 || total_b == 0 {
        return Err(invalid("histogram L1 needs two nonempty samples"));
    }
    let mut acc: u128 = 0;
    for (a, b) in pairs {
        let x = a as u128 * total_b as u128;
        let y = b as u128 * total_a as u128;
        acc += x.abs_diff(y);
    }
    Ok(acc as f64 / (total_a as f64 * total_b as f64))
}

/// Normalized-histogram L1 distances of two 1-D samples under a coarse
/// partition and a refinement of it: `(coarse, fine)`. The coarse distance
/// never exceeds the fine one.
pub fn empirical_refinement_check<T: Scalar>(
    features_a: &[T],
    features_b: &[T],
    coarse: &Partition<T>,
    fine: &Partition<T>,
) -> Result<(f64, f64)> {
    if !coarse.is_refined_by(fine) || coarse.lo() != fine.lo() || coarse.hi() != fine.hi() {
        return Err(invalid("fine partition does not refine the coarse one"));
    }
    let (na, nb) = (features_a.len() as u64, features_b.len() as u64);
    let ha = histogram(features_a.iter().map(|&x| coarse.cell_of(x)), coarse.cells());
    let hb = histogram(features_b.iter().map(|&x| coarse.cell_of(x)), coarse.cells());
    let coarse_l1 = normalized_l1(ha.into_iter().zip(hb), na, nb)?;
    let ha = histogram(features_a.iter().map(|&x| fine.cell_of(x)), fine.cells());
    let hb = histogram(features_b.iter().map(|&x| fine.cell_of(x)), fine.cells());
    let fine_l1 = normalized_l1(ha.into_iter().zip(hb), na, nb)?;
    Ok((coarse_l1, fine_l1))
}

/// Same check on arbitrary cell labels: `fine_*` are fine-cell ids and
/// `coarse_of` maps a fine id to its coarse cell. Returns `(coarse, fine)`.
pub fn labelled_refinement_check<K: Ord + Copy>(
    fine_a: &[K],
    fine_b: &[K],
    coarse_of: impl Fn(K) -> usize,
) -> Result<(f64, f64)> {
    let (na, nb) = (fine_a.len() as u64, fine_b.len() as u64);
    let mut fine: BTreeMap<K, (u64, u64)> = BTreeMap::new();
    for &k in fine_a {
        fine.entry(k).or_default().0 += 1;
    }
    for &k in fine_b {
        fine.entry(k).or_default().1 += 1;
    }
    let mut coarse: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
    for (&k, &(a, b)) in &fine {
        let e = coarse.entry(coarse_of(k)).or_default();
        e.0 += a;
        e.1 += b;
    }
    let coarse_l1 = normalized_l1(coarse.values().copied(), na, nb)?;
    let fine_l1 = normalized_l1(fine.values().copied(), na, nb)?;
    Ok((coarse_l1, fine_l1))
}

/// `sqrt(sum_i (x_i - mean)^2)`. Values are shifted by the first entry
/// before averaging, which leaves the result unchanged and makes it exactly
/// translation invariant whenever the shifts are exact.
pub fn gs_metric<T: Scalar>(accuracies: &[T]) -> Result<T> {
    let Some(&first) = accuracies.first() else {
        return Err(invalid("GS needs at least one accuracy"));
    };
    let shifted: Vec<T> = accuracies.iter().map(|&x| x - first).collect();
    let mean = crate::scalar::ordered_sum(&shifted) / T::of_usize(shifted.len());
    let mut ss = T::zero();
    for &x in &shifted {
        ss = ss + (x - mean) * (x - mean);
    }
    Ok(ss.sqrt())
}
