//! K-means over database patch descriptors and the rarity weight derived
//! from each descriptor's distances to the resulting centroids.
//!
//! A patch whose descriptor sits close to many centroids looks like a lot of
//! the database and gets a small weight; one that is far from all of them
//! is a local specific region and gets a large weight.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, normalized, squared_distance};
use crate::vlad::{PatchDescriptor, UNIT_TOLERANCE};

/// Lower bound on patch weights; reciprocal weighting divides by them.
pub const WEIGHT_FLOOR: f64 = 1e-6;
/// Lloyd iterations stop once the objective improves by less than this
/// fraction.
pub const KMEANS_REL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    pub centroids: Vec<Vec<f64>>,
    /// Final sum of squared distances to the assigned centroid.
    pub inertia: f64,
}

impl CentroidSet {
    pub fn new(centroids: Vec<Vec<f64>>, inertia: f64) -> Result<Self> {
        let set = Self { centroids, inertia };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        if self.centroids.is_empty() || dim == 0 {
            return Err(Error::Invariant("centroid set is empty".into()));
        }
        for (i, c) in self.centroids.iter().enumerate() {
            if c.len() != dim || c.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invariant(format!("centroid {i} is malformed")));
            }
            if self.centroids[..i].contains(c) {
                return Err(Error::Invariant(format!("centroid {i} duplicates another")));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    /// Centroids scaled to unit length for cosine comparisons. A zero
    /// centroid stays zero, which puts it at cosine distance 1 from
    /// everything.
    pub fn unit_centroids(&self) -> Vec<Vec<f64>> {
        self.centroids.iter().map(|c| normalized(c)).collect()
    }

    pub(crate) fn encode(&self, enc: &mut Encoder) {
        enc.u32(self.k() as u32);
        enc.u32(self.dim() as u32);
        for c in &self.centroids {
            enc.reals(c);
        }
        enc.real(self.inertia);
    }

    pub(crate) fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let k = dec.u32()? as usize;
        let dim = dec.u32()? as usize;
        let centroids = (0..k).map(|_| dec.reals(dim)).collect::<Result<Vec<_>>>()?;
        let inertia = dec.real()?;
        Self::new(centroids, inertia)
    }
}

/// Lloyd's algorithm with seeded k-means++ initialization.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<CentroidSet> {
    kmeans_traced(points, k, seed, max_iters).map(|(set, _)| set)
}

/// As [`kmeans`], also returning the objective after every iteration.
pub fn kmeans_traced(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<(CentroidSet, Vec<f64>)> {
    if k == 0 {
        return Err(Error::InvalidArgument("k-means needs k ≥ 1".into()));
    }
    if points.len() < k {
        return Err(Error::InvalidArgument(format!(
            "k-means with k = {k} needs at least {k} points, got {}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::Dimension("k-means input must be non-empty and of one dimension".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng)?;
    let mut assignment = vec![0usize; points.len()];
    let mut trace = Vec::new();
    let mut previous = f64::INFINITY;

    for _ in 0..max_iters.max(1) {
        for (a, p) in assignment.iter_mut().zip(points) {
            *a = nearest(&centroids, p).0;
        }
        reseed_empty(points, &centroids, &mut assignment, k);
        centroids = means(points, &assignment, k, dim);
        let objective: f64 = points
            .iter()
            .zip(&assignment)
            .map(|(p, &a)| squared_distance(p, &centroids[a]))
            .sum();
        debug_assert!(
            objective <= previous * (1.0 + 1e-9) + 1e-12,
            "k-means objective increased: {previous} -> {objective}"
        );
        trace.push(objective);
        let converged = previous.is_finite()
            && (previous - objective).abs() <= KMEANS_REL_TOL * previous.max(f64::MIN_POSITIVE);
        previous = objective;
        if converged || objective == 0.0 {
            break;
        }
    }
    let set = CentroidSet::new(centroids, previous)?;
    Ok((set, trace))
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let dist = WeightedIndex::new(&d2).map_err(|_| {
            Error::InvalidArgument(format!(
                "k-means with k = {k} needs at least {k} distinct points"
            ))
        })?;
        let next = points[dist.sample(rng)].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &next));
        }
        centroids.push(next);
    }
    Ok(centroids)
}

/// Index and squared distance of the nearest centroid; ties go to the lower
/// index.
fn nearest(centroids: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Moves the point farthest from its centroid into each empty cluster.
fn reseed_empty(points: &[Vec<f64>], centroids: &[Vec<f64>], assignment: &mut [usize], k: usize) {
    let mut counts = vec![0usize; k];
    for &a in assignment.iter() {
        counts[a] += 1;
    }
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let far = (0..points.len())
            .filter(|&i| counts[assignment[i]] > 1)
            .max_by(|&a, &b| {
                let da = squared_distance(&points[a], &centroids[assignment[a]]);
                let db = squared_distance(&points[b], &centroids[assignment[b]]);
                da.total_cmp(&db).then(b.cmp(&a))
            });
        if let Some(i) = far {
            counts[assignment[i]] -= 1;
            assignment[i] = empty;
            counts[empty] = 1;
        }
    }
}

fn means(points: &[Vec<f64>], assignment: &[usize], k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignment) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        for v in s.iter_mut() {
            *v /= c.max(1) as f64;
        }
    }
    sums
}

/// Sum of the `alpha` smallest cosine distances from `f` to the (unit
/// normalized) centroids, floored at [`WEIGHT_FLOOR`].
pub fn patch_weight(f: &[f64], centroids: &CentroidSet, alpha: usize) -> Result<f64> {
    patch_weight_unit(f, &centroids.unit_centroids(), alpha)
}

fn patch_weight_unit(f: &[f64], unit_centroids: &[Vec<f64>], alpha: usize) -> Result<f64> {
    if alpha == 0 || alpha > unit_centroids.len() {
        return Err(Error::InvalidArgument(format!(
            "alpha = {alpha} must lie in [1, {}]",
            unit_centroids.len()
        )));
    }
    if (norm(f) - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::InvalidArgument("patch weight needs a unit descriptor".into()));
    }
    if unit_centroids[0].len() != f.len() {
        return Err(Error::Dimension(format!(
            "descriptor has {} dims, centroids {}",
            f.len(),
            unit_centroids[0].len()
        )));
    }
    let mut dists: Vec<f64> = unit_centroids.iter().map(|c| 1.0 - dot(f, c)).collect();
    dists.sort_by(f64::total_cmp);
    let w: f64 = dists[..alpha].iter().sum();
    Ok(w.max(WEIGHT_FLOOR))
}

/// Fills in the weight of every descriptor.
pub fn weigh_index(descriptors: &mut [PatchDescriptor], centroids: &CentroidSet, alpha: usize) -> Result<()> {
    let unit = centroids.unit_centroids();
    for d in descriptors.iter_mut() {
        d.weight = patch_weight_unit(&d.vector, &unit, alpha)?;
    }
    Ok(())
}
