//! The operations behind each CLI subcommand, usable without the binary.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::featureio::{load_feature_map, load_manifest, resolve_path, DatasetManifest, FeatureMap, ManifestEntry, Split};
use crate::finetune::{finetune, load_keypoints, mean_distances, mine_triplets, save_triplets, TrainingImage, Triplet};
use crate::patch::extract_patches;
use crate::retrieval::{
    build_index_from_maps, geo_distance, load_index, load_split_maps, merge_manifests, query_image, reweigh,
    save_index, QueryResult, RecallTable, RetrievalIndex,
};
use crate::synth::{Scenario, ScenarioConfig};
use crate::vlad::{describe_unreduced, fit_pca, load_params, save_params, PcaModel, VladParams};

/// Upper bound on the features clustered to initialize VLAD parameters.
const INIT_SAMPLES: usize = 20_000;

/// Fresh VLAD parameters from k-means on an even subsample of the cells of
/// `maps`.
pub fn initial_params(maps: &[FeatureMap], clusters: usize, seed: u64) -> Result<VladParams> {
    let total: usize = maps.iter().map(|m| m.height() * m.width()).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("no features to initialize VLAD parameters from".into()));
    }
    let step = total.div_ceil(INIT_SAMPLES).max(1);
    let samples: Vec<Vec<f64>> = maps
        .iter()
        .flat_map(|m| m.data().chunks(m.depth()))
        .step_by(step)
        .map(|c| c.iter().map(|&x| x as f64).collect())
        .collect();
    VladParams::initialize(&samples, clusters, seed)
}

fn params_or_initial(path: Option<&Path>, maps: &[FeatureMap], cfg: &RunConfig) -> Result<VladParams> {
    match path {
        Some(p) => load_params(p),
        None => {
            info!("no VLAD parameters given; initializing {} clusters", cfg.vlad_clusters);
            initial_params(maps, cfg.vlad_clusters, cfg.seed)
        }
    }
}

#[derive(Debug, Clone)]
pub struct BuildReport {
    pub images: usize,
    pub patches: usize,
    pub inertia: f64,
    pub checksum: String,
    pub path: PathBuf,
}

impl fmt::Display for BuildReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "indexed {} images, {} patches; k-means inertia {:.6}; sha256 {} -> {}",
            self.images,
            self.patches,
            self.inertia,
            self.checksum,
            self.path.display()
        )
    }
}

/// `build-index`: describe the database split and write an index file.
pub fn build_index_command(
    manifest_path: &Path,
    params_path: Option<&Path>,
    out: &Path,
    cfg: &RunConfig,
) -> Result<BuildReport> {
    cfg.validate()?;
    let manifest = load_manifest(manifest_path)?;
    let (db, maps) = load_split_maps(&manifest, manifest_path, Split::Database)?;
    let params = params_or_initial(params_path, &maps, cfg)?;
    let index = build_index_from_maps(&db, &maps, &params, &cfg.index())?;
    let checksum = save_index(&index, out)?;
    Ok(BuildReport {
        images: index.len(),
        patches: index.patch_count(),
        inertia: index.centroids.inertia,
        checksum,
        path: out.to_path_buf(),
    })
}

#[derive(Debug, Clone)]
pub struct FinetuneReport {
    pub tuples: usize,
    pub triplets: usize,
    pub epoch_losses: Vec<f64>,
    /// Mean positive and negative distances before and after training.
    pub before: (f64, f64),
    pub after: (f64, f64),
}

impl fmt::Display for FinetuneReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "tuples     {}", self.tuples)?;
        writeln!(f, "triplets   {}", self.triplets)?;
        if let (Some(a), Some(b)) = (self.epoch_losses.first(), self.epoch_losses.last()) {
            writeln!(f, "loss       {a:.6} -> {b:.6} over {} epochs", self.epoch_losses.len())?;
        }
        writeln!(f, "d(q, pos)  {:.6} -> {:.6}", self.before.0, self.after.0)?;
        write!(f, "d(q, neg)  {:.6} -> {:.6}", self.before.1, self.after.1)
    }
}

/// (query, positive, negative) image ids for fine-tuning: the nearest
/// database image within `positive_radius_m`, and a seeded random database
/// image farther than `radius_m`. Only images with keypoints take part.
pub fn select_tuples(manifest: &DatasetManifest, cfg: &RunConfig) -> Result<Vec<(String, String, String)>> {
    let db: Vec<&ManifestEntry> = manifest
        .split(Split::Database)
        .filter(|e| e.keypoint_path.is_some())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for q in manifest.split(Split::Query).filter(|e| e.keypoint_path.is_some()) {
        let mut positive: Option<(f64, &ManifestEntry)> = None;
        let mut far = Vec::new();
        for e in &db {
            let d = geo_distance(q.latitude, q.longitude, e.latitude, e.longitude)?;
            if d <= cfg.positive_radius_m && positive.is_none_or(|(best, _)| d < best) {
                positive = Some((d, e));
            }
            if d > cfg.radius_m {
                far.push(*e);
            }
        }
        match (positive, far.choose(&mut rng)) {
            (Some((_, p)), Some(n)) => out.push((q.image_id.clone(), p.image_id.clone(), n.image_id.clone())),
            _ => warn!("query {} has no positive/negative pair; skipped", q.image_id),
        }
    }
    Ok(out)
}

fn training_image(manifest: &DatasetManifest, manifest_path: &Path, id: &str) -> Result<TrainingImage> {
    let e = manifest
        .get(id)
        .ok_or_else(|| Error::InvalidArgument(format!("image {id} not in manifest")))?;
    let mut map = load_feature_map(resolve_path(manifest_path, &e.feature_path))?;
    map.image_id = id.to_string();
    let kp = e
        .keypoint_path
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("image {id} has no keypoint file")))?;
    let keypoints = load_keypoints(resolve_path(manifest_path, kp))?;
    Ok(TrainingImage { map, keypoints })
}

/// PCA used only to rank mining candidates: fitted on the database patches
/// under the starting parameters.
fn mining_pca(params: &VladParams, maps: &[FeatureMap], cfg: &RunConfig) -> Result<PcaModel> {
    let mut rows = Vec::new();
    for m in maps {
        for p in extract_patches(m, cfg.patch_side, cfg.stride)? {
            rows.push(describe_unreduced(params, &p)?);
        }
    }
    let dim = cfg.d_pca.min(rows.len().saturating_sub(1)).min(params.clusters() * params.depth());
    fit_pca(&rows, dim)
}

/// Output locations for [`finetune_command`].
#[derive(Debug, Clone)]
pub struct FinetuneOutputs<'a> {
    pub params: &'a Path,
    /// Mean loss per epoch, one value per line.
    pub trace: Option<&'a Path>,
    pub triplets: Option<&'a Path>,
}

/// `finetune`: mine triplets from keypoint-verified tuples and train the
/// VLAD parameters.
pub fn finetune_command(
    manifest_path: &Path,
    params_path: Option<&Path>,
    out: &FinetuneOutputs<'_>,
    cfg: &RunConfig,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    let manifest = load_manifest(manifest_path)?;
    let (_, db_maps) = load_split_maps(&manifest, manifest_path, Split::Database)?;
    let params = params_or_initial(params_path, &db_maps, cfg)?;
    let pca = mining_pca(&params, &db_maps, cfg)?;
    drop(db_maps);

    let tuples = select_tuples(&manifest, cfg)?;
    let mut cache: HashMap<String, TrainingImage> = HashMap::new();
    let mut triplets: Vec<Triplet> = Vec::new();
    let ft = cfg.finetune();
    for (q, p, n) in &tuples {
        for id in [q, p, n] {
            if !cache.contains_key(id) {
                cache.insert(id.clone(), training_image(&manifest, manifest_path, id)?);
            }
        }
        let mined = mine_triplets(&cache[q], &cache[p], &cache[n], &params, &pca, cfg.patch(), &ft)?;
        info!("{q}: {} triplets", mined.len());
        triplets.extend(mined);
    }
    if triplets.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no triplets mined from {} tuples; check keypoints and radii",
            tuples.len()
        )));
    }
    if let Some(path) = out.triplets {
        let records: Vec<_> = triplets.iter().filter_map(|t| t.record.clone()).collect();
        save_triplets(&records, path)?;
    }

    let before = mean_distances(&params, &triplets)?;
    let outcome = finetune(&params, &triplets, &ft)?;
    let after = mean_distances(&outcome.params, &triplets)?;
    save_params(&outcome.params, out.params)?;
    if let Some(path) = out.trace {
        let text: String = outcome.epoch_losses.iter().map(|l| format!("{l}\n")).collect();
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(FinetuneReport {
        tuples: tuples.len(),
        triplets: triplets.len(),
        epoch_losses: outcome.epoch_losses,
        before,
        after,
    })
}

#[derive(Debug, Clone)]
pub struct WeighReport {
    pub patches: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub inertia: f64,
    pub checksum: String,
}

impl fmt::Display for WeighReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "patches    {}", self.patches)?;
        writeln!(f, "weight     min {:.6}  mean {:.6}  max {:.6}", self.min, self.mean, self.max)?;
        writeln!(f, "inertia    {:.6}", self.inertia)?;
        write!(f, "sha256     {}", self.checksum)
    }
}

/// `weigh`: recompute the rarity weights of an index with the configured
/// cluster count, alpha and seed. Optionally dumps every weight as
/// `image_id patch grid_x grid_y weight` lines.
pub fn weigh_command(index_path: &Path, out: &Path, dump: Option<&Path>, cfg: &RunConfig) -> Result<WeighReport> {
    cfg.validate()?;
    let mut index = load_index(index_path)?;
    reweigh(&mut index, cfg.weight_clusters, cfg.alpha, cfg.seed)?;
    let weights: Vec<f64> = index.images.iter().flat_map(|r| r.patches.iter().map(|p| p.weight)).collect();
    if let Some(path) = dump {
        let mut text = String::new();
        for r in &index.images {
            for (i, p) in r.patches.iter().enumerate() {
                text.push_str(&format!("{} {i} {} {} {}\n", r.image_id, p.grid_x, p.grid_y, p.weight));
            }
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    let checksum = save_index(&index, out)?;
    Ok(WeighReport {
        patches: weights.len(),
        min: weights.iter().copied().fold(f64::INFINITY, f64::min),
        mean: weights.iter().sum::<f64>() / weights.len().max(1) as f64,
        max: weights.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        inertia: index.centroids.inertia,
        checksum,
    })
}

/// One line per ranked image: rank, id, score, global distance.
pub fn render_result(result: &QueryResult, top: usize) -> String {
    let mut out = format!("query {}\n", result.query_id);
    for (i, r) in result.ranked.iter().take(top).enumerate() {
        out.push_str(&format!(
            "{:>4}  {:<24} score {:>12.4}  global {:.6}",
            i + 1,
            r.image_id,
            r.score,
            r.global_distance
        ));
        if let Some(d) = r.geo_distance {
            out.push_str(&format!("  {d:.1} m"));
        }
        out.push('\n');
    }
    out
}

/// `query`: rank the index against one feature file.
pub fn query_command(index_path: &Path, feature_path: &Path, weighted: bool, cfg: &RunConfig) -> Result<QueryResult> {
    let index = load_index(index_path)?;
    let map = load_feature_map(feature_path)?;
    query_image(&index, &map, cfg.k_candidates, weighted)
}

/// Switches for [`eval_command`].
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    /// Match on raw distances instead of weighted ones.
    pub unweighted: bool,
    /// Rebuild the index with freshly initialized VLAD parameters.
    pub no_finetune: bool,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub queries: usize,
    pub recall: RecallTable,
    pub results: Vec<QueryResult>,
}

/// Rebuilds `index` in memory with initial parameters, keeping its
/// database and configuration.
pub fn rebuild_without_finetune(index: &RetrievalIndex, cfg: &RunConfig) -> Result<RetrievalIndex> {
    let maps = index
        .manifest
        .entries
        .iter()
        .map(|e| {
            let mut m = load_feature_map(&e.feature_path)?;
            m.image_id = e.image_id.clone();
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    let params = initial_params(&maps, cfg.vlad_clusters, cfg.seed)?;
    build_index_from_maps(&index.manifest, &maps, &params, &index.config)
}

/// Evaluates every query of `manifest` against `index`.
pub fn evaluate(
    index: &RetrievalIndex,
    manifest: &DatasetManifest,
    manifest_path: &Path,
    weighted: bool,
    cfg: &RunConfig,
) -> Result<EvalReport> {
    let (queries, maps) = load_split_maps(manifest, manifest_path, Split::Query)?;
    if maps.is_empty() {
        return Err(Error::InvalidArgument("manifest has no query images".into()));
    }
    let k = cfg.k_candidates.min(index.len());
    let mut results = maps
        .iter()
        .map(|m| query_image(index, m, k, weighted))
        .collect::<Result<Vec<_>>>()?;
    let truth = merge_manifests(&queries, &index.manifest)?;
    for r in &mut results {
        crate::retrieval::apply_ground_truth(r, &truth)?;
    }
    let recall = RecallTable::compute(&results, &truth, cfg.radius_m)?;
    Ok(EvalReport {
        queries: results.len(),
        recall,
        results,
    })
}

/// `eval`: Recall@{1,5,10} of the query split. `per_query` receives the top
/// ten of every query.
pub fn eval_command(
    index_path: &Path,
    manifest_path: &Path,
    opts: EvalOptions,
    per_query: Option<&Path>,
    cfg: &RunConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let mut index = load_index(index_path)?;
    if opts.no_finetune {
        index = rebuild_without_finetune(&index, cfg)?;
    }
    let manifest = load_manifest(manifest_path)?;
    let report = evaluate(&index, &manifest, manifest_path, !opts.unweighted, cfg)?;
    if let Some(path) = per_query {
        let text: String = report.results.iter().map(|r| render_result(r, 10)).collect();
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(report)
}

/// `selftest`: an end-to-end run on a small synthetic dataset under `dir`.
/// Returns one line per check; fails on the first broken one.
pub fn selftest(dir: &Path) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    let mut check = |name: &str, ok: bool, detail: String| -> Result<()> {
        lines.push(format!("{} {name}: {detail}", if ok { "ok  " } else { "FAIL" }));
        if ok {
            Ok(())
        } else {
            Err(Error::Invariant(format!("selftest {name} failed: {detail}")))
        }
    };
    let scenario = Scenario::generate(&ScenarioConfig {
        places: 8,
        queries: 4,
        adversarial: 0,
        height: 10,
        width: 15,
        depth: 8,
        vocabulary: 16,
        query_noise: 0.1,
        database_noise: 0.1,
        seed: 3,
        ..ScenarioConfig::default()
    })?;
    let manifest_path = scenario.write(dir)?;
    let cfg = RunConfig {
        vlad_clusters: 8,
        d_pca: 16,
        weight_clusters: 4,
        alpha: 2,
        epochs: 2,
        ..RunConfig::default()
    };

    let index_path = dir.join("index.pnvi");
    let built = build_index_command(&manifest_path, None, &index_path, &cfg)?;
    check("build", built.images == 8, format!("{} images, {} patches", built.images, built.patches))?;

    let reloaded = load_index(&index_path)?;
    let (db, maps) = load_split_maps(&load_manifest(&manifest_path)?, &manifest_path, Split::Database)?;
    let fresh = build_index_from_maps(&db, &maps, &reloaded.params, &cfg.index())?;
    check("round-trip", fresh == reloaded, "saved index equals a rebuild".into())?;

    let first = query_image(&reloaded, &maps[0], 8, true)?;
    let top = first.ranked.first().map(|r| r.image_id.clone()).unwrap_or_default();
    check("self-query", top == maps[0].image_id, format!("{} ranks {top} first", maps[0].image_id))?;

    let params_path = dir.join("params.pnvp");
    let ft = finetune_command(
        &manifest_path,
        None,
        &FinetuneOutputs {
            params: &params_path,
            trace: None,
            triplets: None,
        },
        &cfg,
    )?;
    check("finetune", ft.triplets > 0, format!("{} triplets over {} tuples", ft.triplets, ft.tuples))?;

    let eval = eval_command(&index_path, &manifest_path, EvalOptions::default(), None, &cfg)?;
    check(
        "eval",
        eval.recall.r1 <= eval.recall.r5 && eval.recall.r5 <= eval.recall.r10,
        format!("R@1 {:.1}  R@5 {:.1}  R@10 {:.1}", eval.recall.r1, eval.recall.r5, eval.recall.r10),
    )?;
    Ok(lines)
}
