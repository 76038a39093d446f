//! VLAD aggregation, projection and PCA whitening: the descriptor pipeline
//! shared by patches and whole images.
//!
//! A patch's `N × D` features are soft-assigned to `K` clusters, their
//! residuals against the cluster centroids are summed into a `K × D` matrix,
//! each cluster's residual vector is L2-normalized, the flattened matrix is
//! L2-normalized again, and finally PCA with whitening reduces it to `D_pca`
//! dimensions, re-normalized to unit length.

use std::fs;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::codec::{snap_all, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::featureio::FeatureMap;
use crate::linalg::{dot, norm, normalize, squared_distance, to_f64};
use crate::patch::{full_map_patch, Patch};
use crate::weighting::kmeans;

/// Tolerance on the unit-norm precondition of [`cosine_distance`].
pub const UNIT_TOLERANCE: f64 = 1e-4;
/// Added to eigenvalues before taking the whitening inverse square root.
pub const WHITENING_EPSILON: f64 = 1e-8;

/// Learnable parameters of the aggregation layer: assignment logits
/// `w_k·x + b_k` and the residual centroids `c_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct VladParams {
    k: usize,
    d: usize,
    /// `K × D`, row `k` is `w_k`.
    pub assign_weights: Vec<f64>,
    pub assign_bias: Vec<f64>,
    /// `K × D`, row `k` is `c_k`.
    pub centroids: Vec<f64>,
}

impl VladParams {
    pub fn new(
        k: usize,
        d: usize,
        assign_weights: Vec<f64>,
        assign_bias: Vec<f64>,
        centroids: Vec<f64>,
    ) -> Result<Self> {
        let p = Self {
            k,
            d,
            assign_weights,
            assign_bias,
            centroids,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.d == 0 {
            return Err(Error::Invariant("VLAD params need K ≥ 1 and D ≥ 1".into()));
        }
        if self.assign_weights.len() != self.k * self.d
            || self.centroids.len() != self.k * self.d
            || self.assign_bias.len() != self.k
        {
            return Err(Error::Dimension(format!(
                "VLAD params shapes do not match K={} D={}",
                self.k, self.d
            )));
        }
        let all = self
            .assign_weights
            .iter()
            .chain(&self.assign_bias)
            .chain(&self.centroids);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Invariant("non-finite VLAD parameter".into()));
        }
        Ok(())
    }

    pub fn clusters(&self) -> usize {
        self.k
    }

    pub fn depth(&self) -> usize {
        self.d
    }

    /// Total number of trainable scalars.
    pub fn len(&self) -> usize {
        2 * self.k * self.d + self.k
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn weight_row(&self, k: usize) -> &[f64] {
        &self.assign_weights[k * self.d..(k + 1) * self.d]
    }

    pub fn centroid(&self, k: usize) -> &[f64] {
        &self.centroids[k * self.d..(k + 1) * self.d]
    }

    /// Standard soft-assignment initialization: `w_k = 2α c_k`, `b_k = −α‖c_k‖²`, which
    /// makes the soft assignment a softmax over `−α‖x − c_k‖²`.
    pub fn from_centroids(centroids: &[Vec<f64>], alpha: f64) -> Result<Self> {
        let k = centroids.len();
        let d = centroids.first().map_or(0, Vec::len);
        let mut w = Vec::with_capacity(k * d);
        let mut b = Vec::with_capacity(k);
        let mut c = Vec::with_capacity(k * d);
        for ck in centroids {
            if ck.len() != d {
                return Err(Error::Dimension("ragged centroid list".into()));
            }
            w.extend(ck.iter().map(|v| 2.0 * alpha * v));
            b.push(-alpha * dot(ck, ck));
            c.extend_from_slice(ck);
        }
        Self::new(k, d, w, b, c)
    }

    /// Clusters sample features into `k` centroids and picks the sharpness
    /// `α` so that, on average, the nearest centroid receives 100× the
    /// assignment mass of the second nearest.
    pub fn initialize(samples: &[Vec<f64>], k: usize, seed: u64) -> Result<Self> {
        let set = kmeans(samples, k, seed, 100)?;
        let centroids = set.centroids;
        let mut gap_sum = 0.0;
        let mut gaps = 0usize;
        if k >= 2 {
            for x in samples {
                let mut d: Vec<f64> = centroids.iter().map(|c| squared_distance(x, c)).collect();
                d.sort_by(f64::total_cmp);
                gap_sum += d[1] - d[0];
                gaps += 1;
            }
        }
        let mean_gap = if gaps > 0 { gap_sum / gaps as f64 } else { 0.0 };
        let alpha = if mean_gap > 0.0 {
            100f64.ln() / mean_gap
        } else {
            1.0
        };
        Self::from_centroids(&centroids, alpha)
    }

    /// Random parameters, mostly for tests and examples.
    pub fn random(k: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize, scale: f64| -> Vec<f64> {
            (0..n)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let w = draw(k * d, 1.0);
        let b = draw(k, 0.5);
        let c = draw(k * d, 1.0);
        Self { k, d, assign_weights: w, assign_bias: b, centroids: c }
    }

    /// Copy with every entry rounded to single precision.
    pub fn snapped(&self) -> Self {
        let mut p = self.clone();
        snap_all(&mut p.assign_weights);
        snap_all(&mut p.assign_bias);
        snap_all(&mut p.centroids);
        p
    }

    /// Flat view: weights, then biases, then centroids.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.assign_weights);
        v.extend_from_slice(&self.assign_bias);
        v.extend_from_slice(&self.centroids);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let kd = self.k * self.d;
        self.assign_weights.copy_from_slice(&flat[..kd]);
        self.assign_bias.copy_from_slice(&flat[kd..kd + self.k]);
        self.centroids.copy_from_slice(&flat[kd + self.k..]);
    }

    pub(crate) fn encode(&self, enc: &mut Encoder) {
        enc.u32(self.k as u32);
        enc.u32(self.d as u32);
        enc.reals(&self.assign_weights);
        enc.reals(&self.assign_bias);
        enc.reals(&self.centroids);
    }

    pub(crate) fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let k = dec.u32()? as usize;
        let d = dec.u32()? as usize;
        let w = dec.reals(k * d)?;
        let b = dec.reals(k)?;
        let c = dec.reals(k * d)?;
        Self::new(k, d, w, b, c)
    }
}

pub const PARAMS_MAGIC: &[u8; 4] = b"PNVP";
pub const PARAMS_VERSION: u32 = 1;

/// Writes `PNVP` params: magic, version, K, D, then weights, biases and
/// centroids as float32.
pub fn save_params(params: &VladParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut enc = Encoder::new();
    enc.bytes(PARAMS_MAGIC);
    enc.u32(PARAMS_VERSION);
    params.encode(&mut enc);
    fs::write(path, enc.finish()).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<VladParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(&bytes, "vlad params");
    if dec.take(4).ok() != Some(PARAMS_MAGIC.as_slice()) {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "PNVP",
        });
    }
    let version = dec.u32()?;
    if version != PARAMS_VERSION {
        return Err(Error::Version {
            found: version,
            expected: PARAMS_VERSION,
        });
    }
    let p = VladParams::decode(&mut dec)?;
    dec.expect_end()?;
    Ok(p)
}

/// Softmax over the affine assignment logits `w_k·x + b_k`.
pub fn soft_assign(params: &VladParams, feature: &[f64]) -> Result<Vec<f64>> {
    if feature.len() != params.d {
        return Err(Error::Dimension(format!(
            "feature has {} dims, params expect {}",
            feature.len(),
            params.d
        )));
    }
    if feature.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite feature".into()));
    }
    Ok(soft_assign_unchecked(params, feature))
}

pub(crate) fn soft_assign_unchecked(params: &VladParams, x: &[f64]) -> Vec<f64> {
    let mut a: Vec<f64> = (0..params.k)
        .map(|k| dot(params.weight_row(k), x) + params.assign_bias[k])
        .collect();
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in &mut a {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in &mut a {
        *v /= sum;
    }
    a
}

/// Unnormalized VLAD residual matrix, `K` rows of length `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct VladMatrix {
    pub k: usize,
    pub d: usize,
    pub values: Vec<f64>,
}

impl VladMatrix {
    pub fn cluster(&self, k: usize) -> &[f64] {
        &self.values[k * self.d..(k + 1) * self.d]
    }
}

/// `V[k,:] = Σ_x a_k(x) · (x − c_k)` over the patch rows.
pub fn aggregate_vlad(params: &VladParams, patch: &Patch) -> Result<VladMatrix> {
    if patch.depth() != params.d {
        return Err(Error::Dimension(format!(
            "patch depth {} does not match VLAD depth {}",
            patch.depth(),
            params.d
        )));
    }
    let (k, d) = (params.k, params.d);
    let mut values = vec![0.0; k * d];
    let mut x = vec![0.0; d];
    for row in patch.iter_rows() {
        for (xi, &r) in x.iter_mut().zip(row) {
            *xi = r as f64;
        }
        let a = soft_assign_unchecked(params, &x);
        for (c, &ac) in a.iter().enumerate() {
            let centroid = params.centroid(c);
            let out = &mut values[c * d..(c + 1) * d];
            for j in 0..d {
                out[j] += ac * (x[j] - centroid[j]);
            }
        }
    }
    Ok(VladMatrix { k, d, values })
}

/// Intra-normalization (each cluster's residual vector scaled to unit length,
/// zero vectors left zero) followed by L2 normalization of the flattened
/// matrix.
pub fn project(matrix: &VladMatrix) -> Result<Vec<f64>> {
    let mut out = matrix.values.clone();
    for block in out.chunks_exact_mut(matrix.d) {
        normalize(block);
    }
    if normalize(&mut out) == 0.0 {
        return Err(Error::Degenerate("all-zero VLAD matrix".into()));
    }
    Ok(out)
}

/// The pre-PCA unit descriptor of a patch.
pub fn describe_unreduced(params: &VladParams, patch: &Patch) -> Result<Vec<f64>> {
    project(&aggregate_vlad(params, patch)?)
}

/// PCA projection with whitening.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `D_pca × D_in`, orthonormal rows.
    pub basis: Vec<f64>,
    /// Inverse square-root eigenvalues.
    pub scales: Vec<f64>,
    d_in: usize,
    d_pca: usize,
}

impl PcaModel {
    pub fn new(mean: Vec<f64>, basis: Vec<f64>, scales: Vec<f64>) -> Result<Self> {
        let d_in = mean.len();
        let d_pca = scales.len();
        if d_in == 0 || d_pca == 0 || basis.len() != d_in * d_pca {
            return Err(Error::Dimension(format!(
                "PCA basis of {} values does not fit {d_pca}x{d_in}",
                basis.len()
            )));
        }
        if scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Invariant("PCA scales must be positive".into()));
        }
        Ok(Self {
            mean,
            basis,
            scales,
            d_in,
            d_pca,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.d_in
    }

    pub fn output_dim(&self) -> usize {
        self.d_pca
    }

    pub fn component(&self, i: usize) -> &[f64] {
        &self.basis[i * self.d_in..(i + 1) * self.d_in]
    }

    /// `scales ⊙ (basis · (x − mean))` without the final normalization.
    pub fn whiten(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_in {
            return Err(Error::Dimension(format!(
                "PCA input has {} dims, model expects {}",
                x.len(),
                self.d_in
            )));
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok((0..self.d_pca)
            .map(|i| self.scales[i] * dot(self.component(i), &centered))
            .collect())
    }

    /// Largest deviation of `basis · basisᵀ` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.d_pca {
            for j in 0..self.d_pca {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(self.component(i), self.component(j)) - target).abs());
            }
        }
        worst
    }

    pub fn snapped(&self) -> Self {
        let mut m = self.clone();
        snap_all(&mut m.mean);
        snap_all(&mut m.basis);
        snap_all(&mut m.scales);
        m
    }

    pub(crate) fn encode(&self, enc: &mut Encoder) {
        enc.u32(self.d_in as u32);
        enc.u32(self.d_pca as u32);
        enc.reals(&self.mean);
        enc.reals(&self.basis);
        enc.reals(&self.scales);
    }

    pub(crate) fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let d_in = dec.u32()? as usize;
        let d_pca = dec.u32()? as usize;
        let mean = dec.reals(d_in)?;
        let basis = dec.reals(d_in * d_pca)?;
        let scales = dec.reals(d_pca)?;
        Self::new(mean, basis, scales)
    }
}

/// Fits PCA with whitening on the rows of `descriptors`.
///
/// When there are fewer samples than input dimensions the eigenproblem is
/// solved on the `n × n` Gram matrix instead of the covariance.
pub fn fit_pca(descriptors: &[Vec<f64>], d_pca: usize) -> Result<PcaModel> {
    let n = descriptors.len();
    let d_in = descriptors.first().map_or(0, Vec::len);
    if d_pca == 0 || d_pca > d_in {
        return Err(Error::InvalidArgument(format!(
            "D_pca = {d_pca} must lie in [1, {d_in}]"
        )));
    }
    if n < d_pca + 1 {
        return Err(Error::InvalidArgument(format!(
            "PCA to {d_pca} dims needs at least {} samples, got {n}",
            d_pca + 1
        )));
    }
    if descriptors.iter().any(|v| v.len() != d_in) {
        return Err(Error::Dimension("ragged PCA training set".into()));
    }

    let mut mean = vec![0.0; d_in];
    for v in descriptors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered = DMatrix::from_fn(n, d_in, |i, j| descriptors[i][j] - mean[j]);
    let denom = (n - 1) as f64;

    let (values, vectors) = if n - 1 < d_in {
        dual_eigen(&centered, denom, d_pca).unwrap_or_else(|| primal_eigen(&centered, denom, d_pca))
    } else {
        primal_eigen(&centered, denom, d_pca)
    };

    let mut basis = Vec::with_capacity(d_pca * d_in);
    let mut scales = Vec::with_capacity(d_pca);
    for (lambda, mut v) in values.into_iter().zip(vectors) {
        if lambda <= 0.0 {
            warn!("PCA eigenvalue {lambda:.3e} is not positive; whitening floor applies");
        }
        fix_sign(&mut v);
        basis.extend_from_slice(&v);
        scales.push(1.0 / (lambda.max(0.0) + WHITENING_EPSILON).sqrt());
    }
    PcaModel::new(mean, basis, scales)
}

/// Leading eigenpairs of the sample covariance, descending.
fn primal_eigen(centered: &DMatrix<f64>, denom: f64, d_pca: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let cov = (centered.transpose() * centered) / denom;
    let eig = SymmetricEigen::new(cov);
    let order = descending(eig.eigenvalues.as_slice());
    order
        .into_iter()
        .take(d_pca)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).iter().copied().collect()))
        .unzip()
}

/// Eigenpairs recovered from the Gram matrix; `None` if any needed
/// eigenvalue vanishes.
fn dual_eigen(centered: &DMatrix<f64>, denom: f64, d_pca: usize) -> Option<(Vec<f64>, Vec<Vec<f64>>)> {
    let gram = (centered * centered.transpose()) / denom;
    let eig = SymmetricEigen::new(gram);
    let order = descending(eig.eigenvalues.as_slice());
    let mut values = Vec::with_capacity(d_pca);
    let mut vectors = Vec::with_capacity(d_pca);
    for &i in order.iter().take(d_pca) {
        let lambda = eig.eigenvalues[i];
        if lambda <= 1e-12 {
            return None;
        }
        let u = centered.transpose() * eig.eigenvectors.column(i);
        let mut u: Vec<f64> = u.iter().copied().collect();
        normalize(&mut u);
        values.push(lambda);
        vectors.push(u);
    }
    Some((values, vectors))
}

fn descending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Makes the largest-magnitude component positive (first one on ties).
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Whitened projection re-normalized to unit length.
pub fn apply_pca(model: &PcaModel, vector: &[f64]) -> Result<Vec<f64>> {
    let mut y = model.whiten(vector)?;
    let n = normalize(&mut y);
    if !(n > 1e-300) {
        return Err(Error::Degenerate("PCA projection is zero".into()));
    }
    Ok(y)
}

/// A reduced unit descriptor with its grid position and matching weight.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDescriptor {
    pub vector: Vec<f64>,
    pub grid_x: usize,
    pub grid_y: usize,
    pub weight: f64,
}

pub fn describe_patch(params: &VladParams, pca: &PcaModel, patch: &Patch) -> Result<PatchDescriptor> {
    let unreduced = describe_unreduced(params, patch)?;
    Ok(PatchDescriptor {
        vector: apply_pca(pca, &unreduced)?,
        grid_x: patch.grid_x,
        grid_y: patch.grid_y,
        weight: 1.0,
    })
}

/// Whole-image descriptor: the same pipeline over every cell of the map.
pub fn describe_global(params: &VladParams, pca_global: &PcaModel, map: &FeatureMap) -> Result<Vec<f64>> {
    Ok(describe_patch(params, pca_global, &full_map_patch(map))?.vector)
}

/// `1 − a·b` for unit vectors.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "cosine distance between {} and {} dims",
            a.len(),
            b.len()
        )));
    }
    for v in [a, b] {
        let n = norm(v);
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "cosine distance needs unit vectors, got norm {n}"
            )));
        }
    }
    Ok(cos_dist(a, b))
}

pub(crate) fn cos_dist(a: &[f64], b: &[f64]) -> f64 {
    1.0 - dot(a, b)
}

/// Converts a patch's rows to `f64` vectors.
pub fn patch_rows(patch: &Patch) -> Vec<Vec<f64>> {
    patch.iter_rows().map(to_f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn params(k: usize, d: usize, w: Vec<f64>, b: Vec<f64>, c: Vec<f64>) -> VladParams {
        VladParams::new(k, d, w, b, c).unwrap()
    }

    fn patch_of(rows: &[&[f32]]) -> Patch {
        let d = rows[0].len();
        Patch::new(0, 0, 0, d, rows.concat()).unwrap()
    }

    #[test]
    fn soft_assign_examples() {
        let p1 = params(1, 2, vec![0.3, -1.0], vec![0.2], vec![0.0, 0.0]);
        assert_eq!(soft_assign(&p1, &[1.0, 2.0]).unwrap(), vec![1.0]);

        let p = params(4, 2, vec![0.0; 8], vec![0.7; 4], vec![0.0; 8]);
        for a in soft_assign(&p, &[3.0, -1.0]).unwrap() {
            assert_abs_diff_eq!(a, 0.25, epsilon = 1e-15);
        }

        // margin of +50 on cluster 2 → e^-50 leakage
        let p = params(3, 1, vec![0.0, 0.0, 0.0], vec![0.0, 0.0, 50.0], vec![0.0; 3]);
        let a = soft_assign(&p, &[1.0]).unwrap();
        assert_abs_diff_eq!(a[2], 1.0, epsilon = 1e-9);
        assert!(a[0] < 1e-9 && a[1] < 1e-9);
        assert_abs_diff_eq!(a.iter().sum::<f64>(), 1.0, epsilon = 1e-12);

        assert!(soft_assign(&p, &[f64::NAN]).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let p = params(1, 2, vec![0.0, 0.0], vec![0.0], vec![1.0, -2.0]);
        let at_centroid = patch_of(&[&[1.0, -2.0], &[1.0, -2.0]]);
        assert!(aggregate_vlad(&p, &at_centroid).unwrap().values.iter().all(|&v| v == 0.0));

        let single = patch_of(&[&[3.0, 0.5]]);
        assert_eq!(aggregate_vlad(&p, &single).unwrap().values, vec![2.0, 2.5]);

        // K = 2, w = 0, b = (0, ln 3) → a = (1/4, 3/4) for every row.
        // x1 = (1, 0), x2 = (0, 1); c1 = (0, 0), c2 = (1, 1).
        // V1 = 1/4·(1,0) + 1/4·(0,1) = (0.25, 0.25)
        // V2 = 3/4·(0,−1) + 3/4·(−1,0) = (−0.75, −0.75)
        let p2 = params(2, 2, vec![0.0; 4], vec![0.0, 3f64.ln()], vec![0.0, 0.0, 1.0, 1.0]);
        let two = patch_of(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let v = aggregate_vlad(&p2, &two).unwrap().values;
        for (got, want) in v.iter().zip([0.25, 0.25, -0.75, -0.75]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }

        let wrong_depth = patch_of(&[&[1.0, 2.0, 3.0]]);
        assert!(matches!(aggregate_vlad(&p2, &wrong_depth), Err(Error::Dimension(_))));
    }

    #[test]
    fn aggregate_is_row_permutation_invariant() {
        let p = VladParams::random(3, 4, 5);
        let rows: Vec<[f32; 4]> = (0..6).map(|i| [i as f32, 1.0 - i as f32, 0.5, (i * i) as f32 * 0.1]).collect();
        let fwd: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let rev: Vec<&[f32]> = rows.iter().rev().map(|r| r.as_slice()).collect();
        let a = aggregate_vlad(&p, &patch_of(&fwd)).unwrap().values;
        let b = aggregate_vlad(&p, &patch_of(&rev)).unwrap().values;
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn project_examples() {
        let m = VladMatrix { k: 3, d: 2, values: vec![3.0, 4.0, 0.0, 0.0, -1.0, 0.0] };
        let v = project(&m).unwrap();
        assert_abs_diff_eq!(norm(&v), 1.0, epsilon = 1e-12);
        let s = 1.0 / 2f64.sqrt();
        for (got, want) in v.iter().zip([0.6 * s, 0.8 * s, 0.0, 0.0, -s, 0.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }

        let one = VladMatrix { k: 2, d: 3, values: vec![0.0, 0.0, 0.0, 2.0, -1.0, 2.0] };
        let v = project(&one).unwrap();
        assert!(v[..3].iter().all(|&x| x == 0.0));

        let zero = VladMatrix { k: 2, d: 2, values: vec![0.0; 4] };
        assert!(matches!(project(&zero), Err(Error::Degenerate(_))));
    }

    #[test]
    fn pca_recovers_line_direction() {
        // points t·(3, 4)/5 plus a fixed offset: rank-1 covariance
        let dir = [0.6, 0.8];
        let data: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let t = i as f64 - 9.5;
                vec![1.0 + t * dir[0], -2.0 + t * dir[1]]
            })
            .collect();
        let m = fit_pca(&data, 1).unwrap();
        assert_abs_diff_eq!(m.component(0)[0], 0.6, epsilon = 1e-9);
        assert_abs_diff_eq!(m.component(0)[1], 0.8, epsilon = 1e-9);
        assert_abs_diff_eq!(m.mean[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pca_needs_enough_samples() {
        let data = vec![vec![1.0, 2.0, 3.0]; 3];
        assert!(matches!(fit_pca(&data, 3), Err(Error::InvalidArgument(_))));
        assert!(matches!(fit_pca(&data, 4), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn dual_and_primal_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..30).map(|j| rng.sample::<f64, _>(StandardNormal) * (1.0 + j as f64 * 0.2)).collect())
            .collect();
        let dual = fit_pca(&data, 5).unwrap();
        let n = data.len();
        let mean = dual.mean.clone();
        let centered = DMatrix::from_fn(n, 30, |i, j| data[i][j] - mean[j]);
        let (values, vectors) = primal_eigen(&centered, (n - 1) as f64, 5);
        assert!(dual.orthonormality_error() < 1e-9);
        for i in 0..5 {
            let mut v = vectors[i].clone();
            fix_sign(&mut v);
            for (a, b) in dual.component(i).iter().zip(&v) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-8);
            }
            assert_abs_diff_eq!(dual.scales[i], 1.0 / (values[i] + WHITENING_EPSILON).sqrt(), epsilon = 1e-8);
        }
    }

    #[test]
    fn apply_pca_examples() {
        let ident = PcaModel::new(vec![0.0; 2], vec![1.0, 0.0, 0.0, 1.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(apply_pca(&ident, &[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);

        let m = PcaModel::new(vec![0.0; 2], vec![1.0, 0.0], vec![2.0]).unwrap();
        assert_eq!(m.whiten(&[3.0, 4.0]).unwrap(), vec![6.0]);
        assert_eq!(apply_pca(&m, &[3.0, 4.0]).unwrap(), vec![1.0]);

        let shifted = PcaModel::new(vec![1.0, 1.0], vec![1.0, 0.0], vec![1.0]).unwrap();
        assert!(matches!(apply_pca(&shifted, &[1.0, 1.0]), Err(Error::Degenerate(_))));
        assert!(matches!(apply_pca(&m, &[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn cosine_distance_examples() {
        let f = [0.6, 0.8];
        assert_abs_diff_eq!(cosine_distance(&f, &f).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(cosine_distance(&f, &[-0.6, -0.8]).unwrap(), 2.0, epsilon = 1e-15);
        assert!(cosine_distance(&[2.0, 0.0], &f).is_err());
    }

    #[test]
    fn params_file_round_trip() {
        let p = VladParams::random(3, 5, 1).snapped();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.pnvp");
        save_params(&p, &path).unwrap();
        assert_eq!(load_params(&path).unwrap(), p);
    }

    #[test]
    fn initialization_assigns_to_nearest_centroid() {
        let mut samples = Vec::new();
        for i in 0..40 {
            let j = i as f64 * 0.01;
            samples.push(vec![5.0 + j, 0.0]);
            samples.push(vec![-5.0, 1.0 + j]);
        }
        let p = VladParams::initialize(&samples, 2, 9).unwrap();
        let a = soft_assign(&p, &[5.1, 0.0]).unwrap();
        let b = soft_assign(&p, &[-5.0, 1.1]).unwrap();
        let ia = a.iter().position(|&v| v > 0.9).expect("confident assignment");
        let ib = b.iter().position(|&v| v > 0.9).expect("confident assignment");
        assert_ne!(ia, ib);
    }
}
