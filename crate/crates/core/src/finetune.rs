//! Triplet mining from keypoint-verified patch correspondences and
//! triplet-loss fine-tuning of the aggregation layer.
//!
//! Mining follows three steps per (query, positive, negative) image tuple:
//! cosine-distance candidates per query patch, ratio-test keypoint matching
//! with a RANSAC translation filter, and selection of the candidate patches
//! with the most (positive) and fewest (negative) surviving keypoint
//! matches. Training then descends the hinge loss
//! `Σ_j max(0, min_i d(q, p_i) + m − d(q, n_j))` on the pre-PCA unit
//! descriptors; PCA is not part of the differentiated chain.

use std::fs;
use std::path::Path;

use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::featureio::FeatureMap;
use crate::linalg::{dot, norm};
use crate::patch::{extract_with_grid, patch_of_pixel, Patch, PatchGrid, PatchSpec};
use crate::vlad::{
    cos_dist, describe_patch, describe_unreduced, soft_assign_unchecked, PatchDescriptor, PcaModel,
    VladParams, UNIT_TOLERANCE,
};

pub const KEYPOINT_MAGIC: &[u8; 4] = b"PNVK";
pub const KEYPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub descriptor: Vec<f32>,
}

/// Keypoints detected in one image, with unit-norm descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub image_id: String,
    pub image_height: usize,
    pub image_width: usize,
    pub points: Vec<Keypoint>,
}

impl KeypointSet {
    pub fn new(
        image_id: impl Into<String>,
        image_height: usize,
        image_width: usize,
        points: Vec<Keypoint>,
    ) -> Result<Self> {
        let set = Self {
            image_id: image_id.into(),
            image_height,
            image_width,
            points,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.descriptor_dim();
        for (i, p) in self.points.iter().enumerate() {
            if !(p.x >= 0.0 && p.y >= 0.0 && (p.x as f64) < self.image_width as f64 && (p.y as f64) < self.image_height as f64) {
                return Err(Error::Invariant(format!(
                    "keypoint {i} at ({}, {}) outside {}x{} image",
                    p.x, p.y, self.image_width, self.image_height
                )));
            }
            if p.descriptor.len() != dim {
                return Err(Error::Invariant(format!("keypoint {i} has a ragged descriptor")));
            }
            let n = p.descriptor.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::Invariant(format!(
                    "keypoint {i} descriptor has norm {n}, expected 1"
                )));
            }
        }
        Ok(())
    }

    pub fn descriptor_dim(&self) -> usize {
        self.points.first().map_or(0, |p| p.descriptor.len())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn save_keypoints(set: &KeypointSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    set.validate()?;
    let mut enc = Encoder::new();
    enc.bytes(KEYPOINT_MAGIC);
    enc.u32(KEYPOINT_VERSION);
    enc.u32(set.image_height as u32);
    enc.u32(set.image_width as u32);
    enc.u32(set.points.len() as u32);
    enc.u32(set.descriptor_dim() as u32);
    for p in &set.points {
        enc.f32(p.x);
        enc.f32(p.y);
        for &v in &p.descriptor {
            enc.f32(v);
        }
    }
    fs::write(path, enc.finish()).map_err(|e| Error::io(path, e))
}

/// Loads a `PNVK` file; the image id is the file stem.
pub fn load_keypoints(path: impl AsRef<Path>) -> Result<KeypointSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(&bytes, "keypoints");
    if dec.take(4).ok() != Some(KEYPOINT_MAGIC.as_slice()) {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "PNVK",
        });
    }
    let version = dec.u32()?;
    if version != KEYPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: KEYPOINT_VERSION,
        });
    }
    let h = dec.u32()? as usize;
    let w = dec.u32()? as usize;
    let count = dec.u32()? as usize;
    let dim = dec.u32()? as usize;
    if dec.remaining() < count * (2 + dim) * 4 {
        return Err(Error::Truncated(format!(
            "{}: {count} keypoints of dim {dim} need {} bytes, {} present",
            path.display(),
            count * (2 + dim) * 4,
            dec.remaining()
        )));
    }
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let x = dec.f32()?;
        let y = dec.f32()?;
        let descriptor = (0..dim).map(|_| dec.f32()).collect::<Result<Vec<_>>>()?;
        points.push(Keypoint { x, y, descriptor });
    }
    dec.expect_end()?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    KeypointSet::new(id, h, w, points)
}

/// Hyperparameters for mining and fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    /// Triplet margin `m`.
    pub margin: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Positive candidates per query patch.
    pub k_p: usize,
    /// Negative candidates per query patch.
    pub k_n: usize,
    pub ratio_threshold: f64,
    pub ransac_iters: usize,
    /// Inlier tolerance in pixels.
    pub ransac_tol: f64,
    /// Seeds RANSAC sampling and the epoch shuffle.
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            margin: 0.1,
            learning_rate: 1e-4,
            momentum: 0.9,
            epochs: 30,
            k_p: 3,
            k_n: 3,
            ratio_threshold: 0.8,
            ransac_iters: 200,
            ransac_tol: 8.0,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("finetune config: {what}")));
        if !(self.margin > 0.0) {
            return bad("margin must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.k_p == 0 || self.k_n == 0 {
            return bad("k_p and k_n must be positive");
        }
        if !(self.ratio_threshold > 0.0 && self.ratio_threshold <= 1.0) {
            return bad("ratio threshold must lie in (0, 1]");
        }
        if self.ransac_iters == 0 || !(self.ransac_tol > 0.0) {
            return bad("RANSAC iterations and tolerance must be positive");
        }
        Ok(())
    }
}

/// For each query descriptor, the `k` closest targets by cosine distance,
/// ascending, ties to the lower index.
pub fn select_candidates(
    query_descs: &[PatchDescriptor],
    target_descs: &[PatchDescriptor],
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    if k > target_descs.len() {
        return Err(Error::InvalidArgument(format!(
            "asked for {k} candidates among {} targets",
            target_descs.len()
        )));
    }
    Ok(query_descs
        .iter()
        .map(|q| {
            let mut order: Vec<(f64, usize)> = target_descs
                .iter()
                .enumerate()
                .map(|(j, t)| (cos_dist(&q.vector, &t.vector), j))
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            order.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect())
}

fn keypoint_distance(a: &[f32], b: &[f32]) -> f64 {
    1.0 - a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>()
}

/// Two-nearest-neighbour matching with Lowe's ratio test on cosine
/// distances. A match is kept iff `d₁ / d₂ < ratio_threshold`.
pub fn match_keypoints(a: &KeypointSet, b: &KeypointSet, ratio_threshold: f64) -> Result<Vec<(usize, usize)>> {
    if a.is_empty() {
        return Err(Error::InvalidArgument("keypoint matching needs a non-empty query set".into()));
    }
    if b.len() < 2 {
        return Err(Error::InvalidArgument("ratio test needs at least two target keypoints".into()));
    }
    if a.descriptor_dim() != b.descriptor_dim() {
        return Err(Error::Dimension("keypoint descriptors differ in dimension".into()));
    }
    let mut out = Vec::new();
    for (i, p) in a.points.iter().enumerate() {
        let mut best = (usize::MAX, f64::INFINITY);
        let mut second = f64::INFINITY;
        for (j, q) in b.points.iter().enumerate() {
            let d = keypoint_distance(&p.descriptor, &q.descriptor).max(0.0);
            if d < best.1 {
                second = best.1;
                best = (j, d);
            } else if d < second {
                second = d;
            }
        }
        let keep = if second > 0.0 {
            best.1 / second < ratio_threshold
        } else {
            false
        };
        if keep {
            out.push((i, best.0));
        }
    }
    Ok(out)
}

/// RANSAC over a pure 2-D translation. Each hypothesis is the displacement of
/// one match; the one with the most inliers within `tol` pixels wins (the
/// first found on ties). When `iters` covers every match, all hypotheses are
/// tried in order instead of sampling.
pub fn ransac_filter(
    matches: &[(usize, usize)],
    a: &KeypointSet,
    b: &KeypointSet,
    iters: usize,
    tol: f64,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    if matches.is_empty() {
        return Err(Error::InvalidArgument("RANSAC needs at least one match".into()));
    }
    let disp: Vec<(f64, f64)> = matches
        .iter()
        .map(|&(i, j)| {
            let (p, q) = (&a.points[i], &b.points[j]);
            (q.x as f64 - p.x as f64, q.y as f64 - p.y as f64)
        })
        .collect();
    let inliers_of = |t: (f64, f64)| -> Vec<usize> {
        (0..disp.len())
            .filter(|&m| ((disp[m].0 - t.0).powi(2) + (disp[m].1 - t.1).powi(2)).sqrt() <= tol)
            .collect()
    };
    let hypotheses: Vec<usize> = if iters >= matches.len() {
        (0..matches.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..iters).map(|_| rng.random_range(0..matches.len())).collect()
    };
    let mut best: Vec<usize> = Vec::new();
    for h in hypotheses {
        let inl = inliers_of(disp[h]);
        if inl.len() > best.len() {
            best = inl;
        }
    }
    Ok(best.into_iter().map(|m| matches[m]).collect())
}

/// One image prepared for mining.
#[derive(Debug, Clone)]
pub struct TrainingImage {
    pub map: FeatureMap,
    pub keypoints: KeypointSet,
}

/// Provenance of a triplet, enough to rebuild it from feature maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletRecord {
    pub query_image: String,
    pub query_patch: usize,
    pub positive_image: String,
    pub positive_patches: Vec<usize>,
    pub negative_image: String,
    pub negative_patches: Vec<usize>,
}

/// A query patch with its positive and negative patches.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub query: Patch,
    /// Usually one; the loss uses the closest.
    pub positives: Vec<Patch>,
    pub negatives: Vec<Patch>,
    pub record: Option<TripletRecord>,
}

impl Triplet {
    pub fn new(query: Patch, positives: Vec<Patch>, negatives: Vec<Patch>) -> Result<Self> {
        if positives.is_empty() || negatives.is_empty() {
            return Err(Error::InvalidArgument(
                "a triplet needs at least one positive and one negative".into(),
            ));
        }
        Ok(Self {
            query,
            positives,
            negatives,
            record: None,
        })
    }
}

fn describe_all(params: &VladParams, pca: &PcaModel, patches: &[Patch]) -> Result<Vec<PatchDescriptor>> {
    patches.iter().map(|p| describe_patch(params, pca, p)).collect()
}

/// Counts keypoint matches landing in each (query patch, target patch) pair.
fn patch_match_counts(
    matches: &[(usize, usize)],
    query: &KeypointSet,
    target: &KeypointSet,
    grid: &PatchGrid,
) -> Result<Vec<Vec<usize>>> {
    let mut counts = vec![vec![0usize; grid.len()]; grid.len()];
    for &(i, j) in matches {
        let (p, q) = (&query.points[i], &target.points[j]);
        let qs = patch_of_pixel(p.x as f64, p.y as f64, query.image_height, query.image_width, grid)?;
        let ts = patch_of_pixel(q.x as f64, q.y as f64, target.image_height, target.image_width, grid)?;
        for &a in &qs {
            for &b in &ts {
                counts[a][b] += 1;
            }
        }
    }
    Ok(counts)
}

fn verified_matches(a: &KeypointSet, b: &KeypointSet, cfg: &FinetuneConfig) -> Result<Vec<(usize, usize)>> {
    if a.is_empty() || b.len() < 2 {
        return Ok(Vec::new());
    }
    let raw = match_keypoints(a, b, cfg.ratio_threshold)?;
    if raw.is_empty() {
        return Ok(raw);
    }
    ransac_filter(&raw, a, b, cfg.ransac_iters, cfg.ransac_tol, cfg.seed)
}

/// Mines triplets from one (query, positive, negative) image tuple.
///
/// Query patches without any verified keypoint match to the positive image
/// are dropped. The final positive is the candidate with the most verified
/// matches to the query patch (closer descriptor on ties); the negatives are
/// every candidate sharing the fewest matches, farthest first.
pub fn mine_triplets(
    query: &TrainingImage,
    positive: &TrainingImage,
    negative: &TrainingImage,
    params: &VladParams,
    pca: &PcaModel,
    patches: PatchSpec,
    cfg: &FinetuneConfig,
) -> Result<Vec<Triplet>> {
    cfg.validate()?;
    let grid = PatchGrid::for_map(&query.map, patches.side, patches.stride)?;
    for other in [&positive.map, &negative.map] {
        if other.height() != grid.height || other.width() != grid.width {
            return Err(Error::Geometry(format!(
                "image {} is {}x{}, query is {}x{}",
                other.image_id,
                other.height(),
                other.width(),
                grid.height,
                grid.width
            )));
        }
    }
    let q_patches = extract_with_grid(&query.map, &grid);
    let p_patches = extract_with_grid(&positive.map, &grid);
    let n_patches = extract_with_grid(&negative.map, &grid);
    let q_desc = describe_all(params, pca, &q_patches)?;
    let p_desc = describe_all(params, pca, &p_patches)?;
    let n_desc = describe_all(params, pca, &n_patches)?;

    let k_p = cfg.k_p.min(p_desc.len());
    let k_n = cfg.k_n.min(n_desc.len());
    let pos_cands = select_candidates(&q_desc, &p_desc, k_p)?;
    let neg_cands = select_candidates(&q_desc, &n_desc, k_n)?;

    let qp = verified_matches(&query.keypoints, &positive.keypoints, cfg)?;
    let qn = verified_matches(&query.keypoints, &negative.keypoints, cfg)?;
    let pos_counts = patch_match_counts(&qp, &query.keypoints, &positive.keypoints, &grid)?;
    let neg_counts = patch_match_counts(&qn, &query.keypoints, &negative.keypoints, &grid)?;
    debug!(
        "mining {}: {} positive and {} negative verified matches",
        query.map.image_id,
        qp.len(),
        qn.len()
    );

    let mut out = Vec::new();
    for (qi, qpatch) in q_patches.iter().enumerate() {
        if pos_counts[qi].iter().all(|&c| c == 0) {
            continue;
        }
        // candidates are sorted by ascending distance, so strict `>` keeps
        // the closest among equal counts
        let mut best = pos_cands[qi][0];
        for &c in &pos_cands[qi][1..] {
            if pos_counts[qi][c] > pos_counts[qi][best] {
                best = c;
            }
        }
        let min_count = neg_cands[qi].iter().map(|&c| neg_counts[qi][c]).min().unwrap_or(0);
        let negatives: Vec<usize> = neg_cands[qi]
            .iter()
            .rev()
            .copied()
            .filter(|&c| neg_counts[qi][c] == min_count)
            .collect();
        let record = TripletRecord {
            query_image: query.map.image_id.clone(),
            query_patch: qi,
            positive_image: positive.map.image_id.clone(),
            positive_patches: vec![best],
            negative_image: negative.map.image_id.clone(),
            negative_patches: negatives.clone(),
        };
        out.push(Triplet {
            query: qpatch.clone(),
            positives: vec![p_patches[best].clone()],
            negatives: negatives.iter().map(|&j| n_patches[j].clone()).collect(),
            record: Some(record),
        });
    }
    Ok(out)
}

/// `Σ_j max(0, min_i d(q, p_i) + m − d(q, n_j))` over unit descriptors.
pub fn triplet_loss(query: &[f64], positives: &[Vec<f64>], negatives: &[Vec<f64>], margin: f64) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::InvalidArgument("triplet loss needs positives and negatives".into()));
    }
    for v in std::iter::once(query).chain(positives.iter().map(Vec::as_slice)).chain(negatives.iter().map(Vec::as_slice)) {
        if v.len() != query.len() {
            return Err(Error::Dimension("triplet descriptors differ in dimension".into()));
        }
        if (norm(v) - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::InvalidArgument("triplet loss needs unit descriptors".into()));
        }
    }
    let d_pos = positives
        .iter()
        .map(|p| cos_dist(query, p))
        .fold(f64::INFINITY, f64::min);
    Ok(negatives
        .iter()
        .map(|n| (d_pos + margin - cos_dist(query, n)).max(0.0))
        .sum())
}

/// Forward pass of one patch through aggregation and projection, keeping
/// what the backward pass needs.
struct PatchForward {
    rows: Vec<Vec<f64>>,
    assign: Vec<Vec<f64>>,
    /// Per-cluster residual norms `‖V_k‖`.
    cluster_norms: Vec<f64>,
    /// Intra-normalized, flattened residuals.
    intra: Vec<f64>,
    flat_norm: f64,
    output: Vec<f64>,
}

fn forward(params: &VladParams, patch: &Patch) -> Result<PatchForward> {
    let (k, d) = (params.clusters(), params.depth());
    if patch.depth() != d {
        return Err(Error::Dimension(format!(
            "patch depth {} does not match VLAD depth {d}",
            patch.depth()
        )));
    }
    let rows: Vec<Vec<f64>> = patch.iter_rows().map(crate::linalg::to_f64).collect();
    let assign: Vec<Vec<f64>> = rows.iter().map(|x| soft_assign_unchecked(params, x)).collect();
    let mut v = vec![0.0; k * d];
    for (x, a) in rows.iter().zip(&assign) {
        for c in 0..k {
            let centroid = params.centroid(c);
            for j in 0..d {
                v[c * d + j] += a[c] * (x[j] - centroid[j]);
            }
        }
    }
    let mut cluster_norms = Vec::with_capacity(k);
    for block in v.chunks_exact_mut(d) {
        let n = norm(block);
        if n > 0.0 {
            block.iter_mut().for_each(|x| *x /= n);
        }
        cluster_norms.push(n);
    }
    let flat_norm = norm(&v);
    if flat_norm == 0.0 {
        return Err(Error::Degenerate("all-zero VLAD matrix in training chain".into()));
    }
    let output = v.iter().map(|x| x / flat_norm).collect();
    Ok(PatchForward {
        rows,
        assign,
        cluster_norms,
        intra: v,
        flat_norm,
        output,
    })
}

/// Accumulates `∂L/∂θ` into `grad` (flat layout of [`VladParams::to_flat`])
/// given `∂L/∂output`.
fn backward(params: &VladParams, fwd: &PatchForward, upstream: &[f64], grad: &mut [f64]) {
    let (k, d) = (params.clusters(), params.depth());
    // global L2 normalization
    let g_dot = dot(&fwd.output, upstream);
    let d_intra: Vec<f64> = upstream
        .iter()
        .zip(&fwd.output)
        .map(|(u, o)| (u - o * g_dot) / fwd.flat_norm)
        .collect();
    // per-cluster normalization
    let mut d_v = vec![0.0; k * d];
    for c in 0..k {
        let n = fwd.cluster_norms[c];
        if n == 0.0 {
            continue;
        }
        let u = &fwd.intra[c * d..(c + 1) * d];
        let gu = &d_intra[c * d..(c + 1) * d];
        let proj = dot(u, gu);
        for j in 0..d {
            d_v[c * d + j] = (gu[j] - u[j] * proj) / n;
        }
    }
    let kd = k * d;
    let (g_w, rest) = grad.split_at_mut(kd);
    let (g_b, g_c) = rest.split_at_mut(k);
    let mut s = vec![0.0; k];
    let mut d_logit = vec![0.0; k];
    for (x, a) in fwd.rows.iter().zip(&fwd.assign) {
        for c in 0..k {
            let centroid = params.centroid(c);
            let dv = &d_v[c * d..(c + 1) * d];
            // ∂L/∂a_c = ∂L/∂V_c · (x − c_c)
            s[c] = (0..d).map(|j| dv[j] * (x[j] - centroid[j])).sum();
            // ∂V_c/∂c_c = −a_c I
            for j in 0..d {
                g_c[c * d + j] -= a[c] * dv[j];
            }
        }
        let mean_s: f64 = (0..k).map(|c| a[c] * s[c]).sum();
        for c in 0..k {
            d_logit[c] = a[c] * (s[c] - mean_s);
            g_b[c] += d_logit[c];
            for j in 0..d {
                g_w[c * d + j] += d_logit[c] * x[j];
            }
        }
    }
}

/// Loss of one triplet and its gradient with respect to every VLAD parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub loss: f64,
    /// Same layout as [`VladParams::to_flat`].
    pub gradient: Vec<f64>,
}

/// Exact gradient of the triplet loss through aggregation and projection.
pub fn loss_gradient(params: &VladParams, triplet: &Triplet, margin: f64) -> Result<LossGradient> {
    let q = forward(params, &triplet.query)?;
    let pos = triplet.positives.iter().map(|p| forward(params, p)).collect::<Result<Vec<_>>>()?;
    let neg = triplet.negatives.iter().map(|p| forward(params, p)).collect::<Result<Vec<_>>>()?;
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidArgument("a triplet needs positives and negatives".into()));
    }

    let (best_pos, d_pos) = pos
        .iter()
        .enumerate()
        .map(|(i, p)| (i, cos_dist(&q.output, &p.output)))
        .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });

    let dim = q.output.len();
    let mut g_q = vec![0.0; dim];
    let mut g_p = vec![0.0; dim];
    let mut g_n: Vec<Option<Vec<f64>>> = vec![None; neg.len()];
    let mut loss = 0.0;
    for (j, n) in neg.iter().enumerate() {
        let h = d_pos + margin - cos_dist(&q.output, &n.output);
        if h <= 0.0 {
            continue;
        }
        loss += h;
        // d(1 − q·p)/dq = −p, d(1 − q·n)/dq = −n
        let p_out = &pos[best_pos].output;
        for t in 0..dim {
            g_q[t] += n.output[t] - p_out[t];
            g_p[t] -= q.output[t];
        }
        g_n[j] = Some(q.output.clone());
    }

    let mut gradient = vec![0.0; params.len()];
    if loss > 0.0 {
        backward(params, &q, &g_q, &mut gradient);
        backward(params, &pos[best_pos], &g_p, &mut gradient);
        for (n, g) in neg.iter().zip(&g_n) {
            if let Some(g) = g {
                backward(params, n, g, &mut gradient);
            }
        }
    }
    Ok(LossGradient { loss, gradient })
}

/// Loss of one triplet on the current parameters, through the same chain
/// as [`loss_gradient`].
pub fn evaluate_triplet(params: &VladParams, triplet: &Triplet, margin: f64) -> Result<f64> {
    let q = describe_unreduced(params, &triplet.query)?;
    let pos = triplet.positives.iter().map(|p| describe_unreduced(params, p)).collect::<Result<Vec<_>>>()?;
    let neg = triplet.negatives.iter().map(|p| describe_unreduced(params, p)).collect::<Result<Vec<_>>>()?;
    triplet_loss(&q, &pos, &neg, margin)
}

/// Mean query–positive and query–negative cosine distances over a triplet
/// set, on pre-PCA descriptors.
pub fn mean_distances(params: &VladParams, triplets: &[Triplet]) -> Result<(f64, f64)> {
    let (mut pos_sum, mut pos_n, mut neg_sum, mut neg_n) = (0.0, 0usize, 0.0, 0usize);
    for t in triplets {
        let q = describe_unreduced(params, &t.query)?;
        for p in &t.positives {
            pos_sum += cos_dist(&q, &describe_unreduced(params, p)?);
            pos_n += 1;
        }
        for n in &t.negatives {
            neg_sum += cos_dist(&q, &describe_unreduced(params, n)?);
            neg_n += 1;
        }
    }
    Ok((pos_sum / pos_n.max(1) as f64, neg_sum / neg_n.max(1) as f64))
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub params: VladParams,
    /// Mean triplet loss observed during each epoch.
    pub epoch_losses: Vec<f64>,
}

/// SGD with momentum, one step per triplet, triplets reshuffled every epoch.
pub fn finetune(params: &VladParams, triplets: &[Triplet], cfg: &FinetuneConfig) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if triplets.is_empty() {
        return Err(Error::InvalidArgument("fine-tuning needs at least one triplet".into()));
    }
    let mut current = params.clone();
    let mut flat = current.to_flat();
    let mut velocity = vec![0.0; flat.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &t in &order {
            let lg = loss_gradient(&current, &triplets[t], cfg.margin)?;
            if !lg.loss.is_finite() || lg.gradient.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    detail: format!("non-finite loss or gradient on triplet {t} (loss {})", lg.loss),
                });
            }
            total += lg.loss;
            if cfg.learning_rate > 0.0 {
                for ((p, v), g) in flat.iter_mut().zip(velocity.iter_mut()).zip(&lg.gradient) {
                    *v = cfg.momentum * *v - cfg.learning_rate * g;
                    *p += *v;
                }
                if flat.iter().any(|p| !p.is_finite()) {
                    return Err(Error::Diverged {
                        epoch: epoch + 1,
                        detail: "parameters became non-finite; lower the learning rate".into(),
                    });
                }
                current.set_flat(&flat);
            }
        }
        let mean = total / triplets.len() as f64;
        debug!("epoch {}: mean triplet loss {mean:.6}", epoch + 1);
        epoch_losses.push(mean);
    }
    Ok(FinetuneOutcome {
        params: current,
        epoch_losses,
    })
}

fn join_indices(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

fn parse_indices(s: &str, lineno: usize) -> Result<Vec<usize>> {
    s.split(';')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Format(format!("triplet line {lineno}: bad index {t:?}")))
        })
        .collect()
}

/// One line per triplet:
/// `query_id,query_patch,positive_id,p1;p2,negative_id,n1;n2`.
pub fn triplets_to_text(records: &[TripletRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.query_image,
            r.query_patch,
            r.positive_image,
            join_indices(&r.positive_patches),
            r.negative_image,
            join_indices(&r.negative_patches)
        ));
    }
    out
}

pub fn parse_triplets(text: &str) -> Result<Vec<TripletRecord>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(Error::Format(format!("triplet line {}: expected 6 columns", i + 1)));
        }
        let record = TripletRecord {
            query_image: cols[0].to_string(),
            query_patch: cols[1]
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("triplet line {}: bad query patch", i + 1)))?,
            positive_image: cols[2].to_string(),
            positive_patches: parse_indices(cols[3], i + 1)?,
            negative_image: cols[4].to_string(),
            negative_patches: parse_indices(cols[5], i + 1)?,
        };
        out.push(record);
    }
    Ok(out)
}

pub fn save_triplets(records: &[TripletRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, triplets_to_text(records)).map_err(|e| Error::io(path, e))
}

pub fn load_triplets(path: impl AsRef<Path>) -> Result<Vec<TripletRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_triplets(&text)
}

impl TripletRecord {
    /// Rebuilds the triplet from per-image patch lists.
    pub fn resolve<'a>(&self, patches_of: impl Fn(&str) -> Option<&'a [Patch]>) -> Result<Triplet> {
        let fetch = |image: &str, idx: &[usize]| -> Result<Vec<Patch>> {
            let patches = patches_of(image)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown image {image:?} in triplet")))?;
            idx.iter()
                .map(|&i| {
                    patches.get(i).cloned().ok_or_else(|| {
                        Error::InvalidArgument(format!("patch {i} out of range for {image:?}"))
                    })
                })
                .collect()
        };
        let query = fetch(&self.query_image, &[self.query_patch])?.remove(0);
        let mut t = Triplet::new(
            query,
            fetch(&self.positive_image, &self.positive_patches)?,
            fetch(&self.negative_image, &self.negative_patches)?,
        )?;
        t.record = Some(self.clone());
        Ok(t)
    }
}
