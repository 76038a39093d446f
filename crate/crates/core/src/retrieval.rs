//! The database index and the two-stage query: global-descriptor shortlist,
//! then weighted patch matching with spatial scoring. Also Recall@N against
//! GPS ground truth.

use std::fs;
use std::path::Path;

use log::info;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::codec::{snap, snap_all, snap_up, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::featureio::{check_coordinates, load_feature_map, resolve_path, DatasetManifest, FeatureMap, Split};
use crate::matcher::pair_match;
use crate::patch::{extract_with_grid, full_map_patch, PatchGrid, PatchSpec};
use crate::vlad::{apply_pca, cos_dist, describe_unreduced, fit_pca, PatchDescriptor, PcaModel, VladParams};
use crate::weighting::{kmeans, weigh_index, CentroidSet};

pub const INDEX_MAGIC: &[u8; 4] = b"PNVI";
pub const INDEX_VERSION: u32 = 1;
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

const KMEANS_MAX_ITERS: usize = 100;

/// Settings that shape an index; echoed into the index file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexConfig {
    pub patch: PatchSpec,
    /// Centroids for the rarity weights.
    pub weight_clusters: usize,
    /// Number of nearest centroids summed into a weight.
    pub alpha: usize,
    /// Reduced dimension of patch descriptors.
    pub d_pca: usize,
    pub seed: u64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            patch: PatchSpec::default(),
            weight_clusters: 16,
            alpha: 10,
            d_pca: 512,
            seed: 0,
        }
    }
}

/// One database image in the index.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub global: Vec<f64>,
    pub patches: Vec<PatchDescriptor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    /// Database entries, feature paths resolved against the source manifest.
    pub manifest: DatasetManifest,
    pub config: IndexConfig,
    pub grid: PatchGrid,
    pub params: VladParams,
    pub pca_global: PcaModel,
    pub pca_patch: PcaModel,
    pub centroids: CentroidSet,
    pub images: Vec<ImageRecord>,
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn patch_count(&self) -> usize {
        self.images.iter().map(|r| r.patches.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.images {
            if r.patches.len() != self.grid.len() {
                return Err(Error::Invariant(format!(
                    "image {} has {} patch descriptors, grid has {}",
                    r.image_id,
                    r.patches.len(),
                    self.grid.len()
                )));
            }
            for v in std::iter::once(&r.global).chain(r.patches.iter().map(|p| &p.vector)) {
                let n = crate::linalg::norm(v);
                if (n - 1.0).abs() > 1e-6 {
                    return Err(Error::Invariant(format!("image {} stores a descriptor of norm {n}", r.image_id)));
                }
            }
            if r.patches.iter().any(|p| !(p.weight >= crate::weighting::WEIGHT_FLOOR)) {
                return Err(Error::Invariant(format!("image {} has a weight below the floor", r.image_id)));
            }
        }
        Ok(())
    }
}

/// Query-side descriptors, computed with the index's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryDescriptors {
    pub image_id: String,
    pub global: Vec<f64>,
    pub patches: Vec<PatchDescriptor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedImage {
    pub image_id: String,
    /// Position in the index.
    pub db_index: usize,
    pub score: f64,
    pub global_distance: f64,
    /// Mean matrix value over matched patches; first tie-breaker.
    pub mean_match_distance: f64,
    /// Metres from the query, once ground truth is applied.
    pub geo_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub query_id: String,
    pub ranked: Vec<RankedImage>,
}

fn unreduced_all(params: &VladParams, map: &FeatureMap, grid: &PatchGrid) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let global = describe_unreduced(params, &full_map_patch(map))?;
    let patches = extract_with_grid(map, grid)
        .iter()
        .map(|p| describe_unreduced(params, p))
        .collect::<Result<Vec<_>>>()?;
    Ok((global, patches))
}

fn reduce(pca: &PcaModel, v: &[f64]) -> Result<Vec<f64>> {
    let mut out = apply_pca(pca, v)?;
    snap_all(&mut out);
    Ok(out)
}

/// Builds the index from in-memory maps, which must be in `manifest` order.
///
/// Every stored real is rounded to single precision before it is used, so the
/// in-memory index is exactly what [`save_index`] writes and [`load_index`]
/// reads back.
pub fn build_index_from_maps(
    manifest: &DatasetManifest,
    maps: &[FeatureMap],
    params: &VladParams,
    cfg: &IndexConfig,
) -> Result<RetrievalIndex> {
    let db = manifest.filtered(Split::Database);
    if db.entries.is_empty() {
        return Err(Error::InvalidArgument("manifest has no database images".into()));
    }
    if db.entries.len() != maps.len() {
        return Err(Error::InvalidArgument(format!(
            "{} database entries but {} feature maps",
            db.entries.len(),
            maps.len()
        )));
    }
    let first = &maps[0];
    for m in maps {
        if m.height() != first.height() || m.width() != first.width() {
            return Err(Error::Geometry(format!(
                "image {} is {}x{}, expected {}x{} like {}",
                m.image_id,
                m.height(),
                m.width(),
                first.height(),
                first.width(),
                first.image_id
            )));
        }
        if m.depth() != params.depth() {
            return Err(Error::Dimension(format!(
                "image {} has depth {}, VLAD parameters expect {}",
                m.image_id,
                m.depth(),
                params.depth()
            )));
        }
    }
    if cfg.alpha == 0 || cfg.alpha > cfg.weight_clusters {
        return Err(Error::InvalidArgument(format!(
            "alpha = {} must lie in [1, {}]",
            cfg.alpha, cfg.weight_clusters
        )));
    }
    let grid = PatchGrid::for_map(first, cfg.patch.side, cfg.patch.stride)?;
    let params = params.snapped();

    let raw: Vec<(Vec<f64>, Vec<Vec<f64>>)> = maps
        .par_iter()
        .map(|m| unreduced_all(&params, m, &grid))
        .collect::<Result<Vec<_>>>()?;

    let globals: Vec<Vec<f64>> = raw.iter().map(|r| r.0.clone()).collect();
    let global_dim = cfg.d_pca.min(globals.len().saturating_sub(1)).min(globals[0].len());
    if global_dim == 0 {
        return Err(Error::InvalidArgument("global PCA needs at least two database images".into()));
    }
    let pca_global = fit_pca(&globals, global_dim)?.snapped();
    let patch_rows: Vec<Vec<f64>> = raw.iter().flat_map(|r| r.1.iter().cloned()).collect();
    let pca_patch = fit_pca(&patch_rows, cfg.d_pca)?.snapped();
    drop(patch_rows);

    let images = raw
        .par_iter()
        .zip(db.entries.par_iter())
        .map(|((g, ps), entry)| {
            let patches = ps
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let (gx, gy) = grid.coords(i);
                    Ok(PatchDescriptor {
                        vector: reduce(&pca_patch, v)?,
                        grid_x: gx,
                        grid_y: gy,
                        weight: 1.0,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ImageRecord {
                image_id: entry.image_id.clone(),
                global: reduce(&pca_global, g)?,
                patches,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut index = RetrievalIndex {
        manifest: db,
        config: *cfg,
        grid,
        params,
        pca_global,
        pca_patch,
        centroids: CentroidSet {
            centroids: Vec::new(),
            inertia: 0.0,
        },
        images,
    };
    reweigh(&mut index, cfg.weight_clusters, cfg.alpha, cfg.seed)?;
    info!(
        "indexed {} images, {} patches, k-means inertia {:.4}",
        index.len(),
        index.patch_count(),
        index.centroids.inertia
    );
    Ok(index)
}

/// Re-clusters the stored patch descriptors and recomputes every weight.
/// The new settings are echoed into the index config.
pub fn reweigh(index: &mut RetrievalIndex, weight_clusters: usize, alpha: usize, seed: u64) -> Result<()> {
    if alpha == 0 || alpha > weight_clusters {
        return Err(Error::InvalidArgument(format!(
            "alpha = {alpha} must lie in [1, {weight_clusters}]"
        )));
    }
    let all: Vec<Vec<f64>> = index
        .images
        .iter()
        .flat_map(|r| r.patches.iter().map(|p| p.vector.clone()))
        .collect();
    let mut centroids = kmeans(&all, weight_clusters, seed, KMEANS_MAX_ITERS)?;
    for c in &mut centroids.centroids {
        snap_all(c);
    }
    centroids.inertia = snap(centroids.inertia);
    centroids.validate()?;

    index.images.par_iter_mut().try_for_each(|r| -> Result<()> {
        weigh_index(&mut r.patches, &centroids, alpha)?;
        for p in &mut r.patches {
            p.weight = snap_up(p.weight);
        }
        Ok(())
    })?;
    index.centroids = centroids;
    index.config.weight_clusters = weight_clusters;
    index.config.alpha = alpha;
    index.config.seed = seed;
    index.validate()
}

/// Entries of one split with paths resolved against `manifest_path`, plus
/// their feature maps in the same order. Map ids follow the manifest.
pub fn load_split_maps(
    manifest: &DatasetManifest,
    manifest_path: &Path,
    split: Split,
) -> Result<(DatasetManifest, Vec<FeatureMap>)> {
    let mut db = manifest.filtered(split);
    for e in &mut db.entries {
        e.feature_path = resolve_path(manifest_path, &e.feature_path).to_string_lossy().into_owned();
        if let Some(k) = &e.keypoint_path {
            e.keypoint_path = Some(resolve_path(manifest_path, k).to_string_lossy().into_owned());
        }
    }
    let maps = db
        .entries
        .par_iter()
        .map(|e| {
            let mut m = load_feature_map(&e.feature_path)?;
            m.image_id = e.image_id.clone();
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((db, maps))
}

/// Loads the database split's feature files (paths relative to
/// `manifest_path`) and builds the index.
pub fn build_index(
    manifest: &DatasetManifest,
    manifest_path: &Path,
    params: &VladParams,
    cfg: &IndexConfig,
) -> Result<RetrievalIndex> {
    let (db, maps) = load_split_maps(manifest, manifest_path, Split::Database)?;
    build_index_from_maps(&db, &maps, params, cfg)
}

fn encode_config(index: &RetrievalIndex) -> Vec<u8> {
    let mut enc = Encoder::new();
    let c = &index.config;
    enc.u32(c.patch.side as u32);
    enc.u32(c.patch.stride as u32);
    enc.u32(c.weight_clusters as u32);
    enc.u32(c.alpha as u32);
    enc.u32(c.d_pca as u32);
    enc.u64(c.seed);
    enc.u32(index.grid.height as u32);
    enc.u32(index.grid.width as u32);
    enc.finish()
}

fn encode_records(index: &RetrievalIndex) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.u32(index.images.len() as u32);
    for r in &index.images {
        enc.str(&r.image_id);
        enc.reals(&r.global);
        enc.u32(r.patches.len() as u32);
        for p in &r.patches {
            enc.u32(p.grid_x as u32);
            enc.u32(p.grid_y as u32);
            enc.real(p.weight);
            enc.reals(&p.vector);
        }
    }
    enc.finish()
}

pub fn encode_index(index: &RetrievalIndex) -> Vec<u8> {
    let mut body = Encoder::new();
    body.section(index.manifest.to_text().as_bytes());
    body.section(&encode_config(index));
    let mut part = Encoder::new();
    index.params.encode(&mut part);
    body.section(&part.finish());
    for pca in [&index.pca_global, &index.pca_patch] {
        let mut part = Encoder::new();
        pca.encode(&mut part);
        body.section(&part.finish());
    }
    let mut part = Encoder::new();
    index.centroids.encode(&mut part);
    body.section(&part.finish());
    body.section(&encode_records(index));
    let body = body.finish();

    let mut out = Encoder::new();
    out.bytes(INDEX_MAGIC);
    out.u32(INDEX_VERSION);
    out.bytes(&Sha256::digest(&body));
    out.bytes(&body);
    out.finish()
}

/// Hex SHA-256 of the index body, as stored in the header.
pub fn index_checksum(bytes: &[u8]) -> Option<String> {
    bytes.get(8..40).map(hex::encode)
}

pub fn save_index(index: &RetrievalIndex, path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = encode_index(index);
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(index_checksum(&bytes).unwrap_or_default())
}

pub fn decode_index(bytes: &[u8]) -> Result<RetrievalIndex> {
    let mut dec = Decoder::new(bytes, "index");
    if dec.take(4)? != INDEX_MAGIC {
        return Err(Error::Format("not an index file (bad magic)".into()));
    }
    let version = dec.u32()?;
    if version != INDEX_VERSION {
        return Err(Error::Version {
            found: version,
            expected: INDEX_VERSION,
        });
    }
    let stored = dec.take(32)?;
    let body_start = 40;
    if Sha256::digest(&bytes[body_start..]).as_slice() != stored {
        return Err(Error::Checksum);
    }

    let mut manifest_bytes = dec.section()?;
    let manifest_text = std::str::from_utf8(manifest_bytes.rest())
        .map_err(|_| Error::Format("index manifest is not UTF-8".into()))?;
    let manifest = DatasetManifest::parse(manifest_text)?;

    let mut c = dec.section()?;
    let config = IndexConfig {
        patch: PatchSpec {
            side: c.u32()? as usize,
            stride: c.u32()? as usize,
        },
        weight_clusters: c.u32()? as usize,
        alpha: c.u32()? as usize,
        d_pca: c.u32()? as usize,
        seed: c.u64()?,
    };
    let (h, w) = (c.u32()? as usize, c.u32()? as usize);
    c.expect_end()?;
    let grid = PatchGrid::new(h, w, config.patch.side, config.patch.stride)?;

    let mut s = dec.section()?;
    let params = VladParams::decode(&mut s)?;
    s.expect_end()?;
    let mut s = dec.section()?;
    let pca_global = PcaModel::decode(&mut s)?;
    s.expect_end()?;
    let mut s = dec.section()?;
    let pca_patch = PcaModel::decode(&mut s)?;
    s.expect_end()?;
    let mut s = dec.section()?;
    let centroids = CentroidSet::decode(&mut s)?;
    s.expect_end()?;

    let mut r = dec.section()?;
    let count = r.len()?;
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        let image_id = r.str()?;
        let global = r.reals(pca_global.output_dim())?;
        let n = r.len()?;
        let mut patches = Vec::with_capacity(n);
        for _ in 0..n {
            let grid_x = r.u32()? as usize;
            let grid_y = r.u32()? as usize;
            let weight = r.real()?;
            let vector = r.reals(pca_patch.output_dim())?;
            patches.push(PatchDescriptor { vector, grid_x, grid_y, weight });
        }
        images.push(ImageRecord { image_id, global, patches });
    }
    r.expect_end()?;
    dec.expect_end()?;

    let index = RetrievalIndex {
        manifest,
        config,
        grid,
        params,
        pca_global,
        pca_patch,
        centroids,
        images,
    };
    index.validate()?;
    Ok(index)
}

pub fn load_index(path: impl AsRef<Path>) -> Result<RetrievalIndex> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_index(&bytes)
}

/// Describes a query map with the index's parameters and weighs its patches
/// against the index centroids.
pub fn describe_query(index: &RetrievalIndex, map: &FeatureMap) -> Result<QueryDescriptors> {
    if map.height() != index.grid.height || map.width() != index.grid.width {
        return Err(Error::Geometry(format!(
            "query {} is {}x{}, index expects {}x{}",
            map.image_id,
            map.height(),
            map.width(),
            index.grid.height,
            index.grid.width
        )));
    }
    let (g, ps) = unreduced_all(&index.params, map, &index.grid)?;
    let mut patches = ps
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let (gx, gy) = index.grid.coords(i);
            Ok(PatchDescriptor {
                vector: apply_pca(&index.pca_patch, v)?,
                grid_x: gx,
                grid_y: gy,
                weight: 1.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    weigh_index(&mut patches, &index.centroids, index.config.alpha)?;
    Ok(QueryDescriptors {
        image_id: map.image_id.clone(),
        global: apply_pca(&index.pca_global, &g)?,
        patches,
    })
}

/// The `k` database images closest to `global`, as `(index, distance)`
/// ascending; ties go to the earlier image.
pub fn query_topk(index: &RetrievalIndex, global: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
    if k == 0 || k > index.len() {
        return Err(Error::InvalidArgument(format!(
            "k_candidates = {k} must lie in [1, {}]",
            index.len()
        )));
    }
    if global.len() != index.pca_global.output_dim() {
        return Err(Error::Dimension(format!(
            "global descriptor has {} dims, index uses {}",
            global.len(),
            index.pca_global.output_dim()
        )));
    }
    let mut all: Vec<(usize, f64)> = index
        .images
        .iter()
        .enumerate()
        .map(|(i, r)| (i, cos_dist(global, &r.global)))
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    Ok(all)
}

/// Scores every candidate by patch matching and sorts by score descending,
/// then smaller mean matched distance, then index order.
pub fn rerank(
    index: &RetrievalIndex,
    query: &QueryDescriptors,
    candidates: &[(usize, f64)],
    weighted: bool,
) -> Result<QueryResult> {
    let mut ranked = candidates
        .par_iter()
        .map(|&(i, global_distance)| {
            let rec = index
                .images
                .get(i)
                .ok_or_else(|| Error::InvalidArgument(format!("candidate {i} not in index")))?;
            let m = pair_match(&query.patches, &rec.patches, &index.grid, &index.grid, weighted)?;
            Ok(RankedImage {
                image_id: rec.image_id.clone(),
                db_index: i,
                score: m.score,
                global_distance,
                mean_match_distance: m.matches.mean_value(),
                geo_distance: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.mean_match_distance.total_cmp(&b.mean_match_distance))
            .then(a.db_index.cmp(&b.db_index))
    });
    Ok(QueryResult {
        query_id: query.image_id.clone(),
        ranked,
    })
}

/// Ranking by global distance alone, for comparison with [`rerank`].
pub fn global_ranking(index: &RetrievalIndex, query: &QueryDescriptors, k: usize) -> Result<QueryResult> {
    let ranked = query_topk(index, &query.global, k)?
        .into_iter()
        .map(|(i, d)| RankedImage {
            image_id: index.images[i].image_id.clone(),
            db_index: i,
            score: -d,
            global_distance: d,
            mean_match_distance: d,
            geo_distance: None,
        })
        .collect();
    Ok(QueryResult {
        query_id: query.image_id.clone(),
        ranked,
    })
}

/// Shortlists `k_candidates` (clamped to the database size) and reranks.
pub fn query_image(index: &RetrievalIndex, map: &FeatureMap, k_candidates: usize, weighted: bool) -> Result<QueryResult> {
    let q = describe_query(index, map)?;
    let candidates = query_topk(index, &q.global, k_candidates.min(index.len()))?;
    rerank(index, &q, &candidates, weighted)
}

/// Haversine distance in metres between two points given in degrees.
pub fn geo_distance(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> Result<f64> {
    check_coordinates(lat1, lon1)?;
    check_coordinates(lat2, lon2)?;
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    Ok(2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin())
}

/// Fills `geo_distance` on every ranked image. `manifest` must hold
/// coordinates for the query and every ranked database image.
pub fn apply_ground_truth(result: &mut QueryResult, manifest: &DatasetManifest) -> Result<()> {
    let q = manifest
        .get(&result.query_id)
        .ok_or_else(|| Error::InvalidArgument(format!("no coordinates for query {}", result.query_id)))?;
    for r in &mut result.ranked {
        let e = manifest
            .get(&r.image_id)
            .ok_or_else(|| Error::InvalidArgument(format!("no coordinates for database image {}", r.image_id)))?;
        r.geo_distance = Some(geo_distance(q.latitude, q.longitude, e.latitude, e.longitude)?);
    }
    Ok(())
}

/// Fraction of queries with at least one of their top `n` results within
/// `radius_m` metres.
pub fn recall_at_n(results: &[QueryResult], manifest: &DatasetManifest, n: usize, radius_m: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("Recall@N needs N >= 1".into()));
    }
    if results.is_empty() {
        return Err(Error::InvalidArgument("Recall@N over zero queries".into()));
    }
    let mut hits = 0usize;
    for r in results {
        let mut r = r.clone();
        apply_ground_truth(&mut r, manifest)?;
        if r.ranked.iter().take(n).any(|x| x.geo_distance.is_some_and(|d| d <= radius_m)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

/// Percentages at N = 1, 5, 10.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallTable {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl RecallTable {
    pub fn compute(results: &[QueryResult], manifest: &DatasetManifest, radius_m: f64) -> Result<Self> {
        let at = |n| recall_at_n(results, manifest, n, radius_m).map(|r| 100.0 * r);
        let t = Self {
            r1: at(1)?,
            r5: at(5)?,
            r10: at(10)?,
        };
        if !(t.r1 <= t.r5 && t.r5 <= t.r10) {
            return Err(Error::Invariant(format!("recall is not monotone in N: {t:?}")));
        }
        Ok(t)
    }

    pub fn render(&self) -> String {
        format!(
            "{:>6} {:>6} {:>6}\n{:>6.2} {:>6.2} {:>6.2}\n",
            "R@1", "R@5", "R@10", self.r1, self.r5, self.r10
        )
    }
}

/// Puts database entries of `extra` into `manifest` unless an entry with the
/// same id is already present.
pub fn merge_manifests(manifest: &DatasetManifest, extra: &DatasetManifest) -> Result<DatasetManifest> {
    let mut entries = manifest.entries.clone();
    for e in &extra.entries {
        if manifest.get(&e.image_id).is_none() {
            entries.push(e.clone());
        }
    }
    DatasetManifest::new(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featureio::{synth_feature_map, ManifestEntry, Motif};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn entry(id: &str, lat: f64, lon: f64, split: Split) -> ManifestEntry {
        ManifestEntry {
            image_id: id.into(),
            feature_path: format!("{id}.pnvf"),
            keypoint_path: None,
            latitude: lat,
            longitude: lon,
            split,
        }
    }

    fn toy(n: usize) -> (DatasetManifest, Vec<FeatureMap>, VladParams, IndexConfig) {
        let entries = (0..n).map(|i| entry(&format!("db{i}"), 0.001 * i as f64, 0.0, Split::Database)).collect();
        let manifest = DatasetManifest::new(entries).unwrap();
        let maps: Vec<FeatureMap> = (0..n)
            .map(|i| {
                let motifs = [Motif { x: (i * 3) % 6, y: 2, side: 4, id: i as u64 }];
                let mut m = synth_feature_map(i as u64, 10, 10, 4, &motifs).unwrap();
                m.image_id = format!("db{i}");
                m
            })
            .collect();
        let params = VladParams::random(3, 4, 5);
        let cfg = IndexConfig {
            patch: PatchSpec { side: 4, stride: 3 },
            weight_clusters: 4,
            alpha: 2,
            d_pca: 6,
            seed: 1,
        };
        (manifest, maps, params, cfg)
    }

    #[test]
    fn two_image_index_counts() {
        let (m, maps, p, cfg) = toy(2);
        let idx = build_index_from_maps(&m, &maps, &p, &cfg).unwrap();
        let n_p = idx.grid.len();
        assert_eq!(n_p, 9);
        assert_eq!(idx.patch_count(), 2 * n_p);
    }

    #[test]
    fn mixed_geometry_is_rejected() {
        let (m, mut maps, p, cfg) = toy(2);
        let mut odd = synth_feature_map(9, 11, 10, 4, &[]).unwrap();
        odd.image_id = "db1".into();
        maps[1] = odd;
        assert!(matches!(build_index_from_maps(&m, &maps, &p, &cfg), Err(Error::Geometry(_))));
    }

    #[test]
    fn index_bytes_round_trip_and_corruption() {
        let (m, maps, p, cfg) = toy(5);
        let idx = build_index_from_maps(&m, &maps, &p, &cfg).unwrap();
        let bytes = encode_index(&idx);
        assert_eq!(decode_index(&bytes).unwrap(), idx);
        assert_eq!(encode_index(&build_index_from_maps(&m, &maps, &p, &cfg).unwrap()), bytes);

        let mut flipped = bytes.clone();
        let at = flipped.len() / 2;
        flipped[at] ^= 0x10;
        assert!(matches!(decode_index(&flipped), Err(Error::Checksum)));

        let mut old = bytes.clone();
        old[4..8].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_index(&old), Err(Error::Version { found: 0, .. })));
    }

    #[test]
    fn topk_examples_and_oracle() {
        let (m, maps, p, cfg) = toy(10);
        let idx = build_index_from_maps(&m, &maps, &p, &cfg).unwrap();
        let first = query_topk(&idx, &idx.images[3].global, 1).unwrap();
        assert_eq!(first[0].0, 3);
        assert_abs_diff_eq!(first[0].1, 0.0, epsilon = 1e-6);
        assert_eq!(query_topk(&idx, &idx.images[0].global, 10).unwrap().len(), 10);
        assert!(query_topk(&idx, &idx.images[0].global, 11).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let q: Vec<f64> = (0..idx.pca_global.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q = crate::linalg::normalized(&q);
            let k = rng.random_range(1..=10);
            let got: Vec<usize> = query_topk(&idx, &q, k).unwrap().into_iter().map(|x| x.0).collect();
            // oracle: repeatedly extract the minimum
            let mut remaining: Vec<usize> = (0..10).collect();
            let mut want = Vec::new();
            for _ in 0..k {
                let (pos, _) = remaining
                    .iter()
                    .enumerate()
                    .min_by(|a, b| {
                        let da = 1.0 - crate::linalg::dot(&q, &idx.images[*a.1].global);
                        let db = 1.0 - crate::linalg::dot(&q, &idx.images[*b.1].global);
                        da.total_cmp(&db)
                    })
                    .unwrap();
                want.push(remaining.remove(pos));
            }
            assert_eq!(got, want);
        }
    }

    #[test]
    fn identical_query_ranks_itself_first() {
        let (m, maps, p, cfg) = toy(6);
        let idx = build_index_from_maps(&m, &maps, &p, &cfg).unwrap();
        for (i, map) in maps.iter().enumerate() {
            for weighted in [false, true] {
                let r = query_image(&idx, map, 100, weighted).unwrap();
                assert_eq!(r.ranked[0].db_index, i);
                assert_eq!(r.ranked.len(), 6);
            }
        }
    }

    #[test]
    fn geo_distance_examples() {
        assert_eq!(geo_distance(10.0, 20.0, 10.0, 20.0).unwrap(), 0.0);
        let d = geo_distance(0.0, 0.0, 1.0, 0.0).unwrap();
        assert!((d - EARTH_RADIUS_M * std::f64::consts::PI / 180.0).abs() < 1e-6);
        assert!((d - 111_195.0).abs() < 1.0);
        let (a, b) = (geo_distance(12.0, -40.0, -3.0, 100.0).unwrap(), geo_distance(-3.0, 100.0, 12.0, -40.0).unwrap());
        assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        assert!(geo_distance(91.0, 0.0, 0.0, 0.0).is_err());
    }

    fn ranked(ids: &[&str]) -> Vec<RankedImage> {
        ids.iter()
            .enumerate()
            .map(|(i, id)| RankedImage {
                image_id: id.to_string(),
                db_index: i,
                score: (ids.len() - i) as f64,
                global_distance: 0.0,
                mean_match_distance: 0.0,
                geo_distance: None,
            })
            .collect()
    }

    #[test]
    fn recall_three_query_case() {
        // near: 0.0001° ≈ 11 m from the query; far: 0.01° ≈ 1.1 km
        let mut entries = vec![
            entry("q0", 0.0, 0.0, Split::Query),
            entry("q1", 1.0, 1.0, Split::Query),
            entry("q2", 2.0, 2.0, Split::Query),
            entry("near0", 0.0001, 0.0, Split::Database),
            entry("near1", 1.0001, 1.0, Split::Database),
            entry("near2", 2.0001, 2.0, Split::Database),
        ];
        for i in 0..8 {
            entries.push(entry(&format!("far{i}"), 10.0 + i as f64, 0.0, Split::Database));
        }
        let m = DatasetManifest::new(entries).unwrap();
        let res = vec![
            QueryResult { query_id: "q0".into(), ranked: ranked(&["far0", "near0", "far1", "far2", "far3"]) },
            QueryResult { query_id: "q1".into(), ranked: ranked(&["far0", "far1", "far2", "far3", "near1"]) },
            QueryResult {
                query_id: "q2".into(),
                ranked: ranked(&["far0", "far1", "far2", "far3", "far4", "near2"]),
            },
        ];
        assert_abs_diff_eq!(recall_at_n(&res, &m, 5, 25.0).unwrap(), 2.0 / 3.0);
        assert_eq!(recall_at_n(&res, &m, 1, 25.0).unwrap(), 0.0);
        assert_eq!(recall_at_n(&res, &m, 6, 25.0).unwrap(), 1.0);
        let t = RecallTable::compute(&res, &m, 25.0).unwrap();
        assert!(t.render().contains("66.67"));

        let missing = vec![QueryResult { query_id: "nope".into(), ranked: ranked(&["far0"]) }];
        assert!(recall_at_n(&missing, &m, 1, 25.0).is_err());
        assert!(recall_at_n(&res, &m, 0, 25.0).is_err());
    }
}
