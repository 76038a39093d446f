//! Synthetic place-recognition datasets.
//!
//! Every image is tiled with square blocks aligned to the patch lattice.
//! Most blocks come from a small vocabulary shared by all places and follow
//! a common layout; a few blocks per place carry motifs that occur nowhere
//! else (the place's rare regions). Queries revisit a place with fresh
//! noise. Adversarial queries take a different place's background and only
//! keep the true place's rare blocks, so nearly all of their patches are
//! shared with the wrong image.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::featureio::{
    perturb, save_feature_map, save_manifest, synth_feature_map_with, DatasetManifest, FeatureMap, ManifestEntry,
    Motif, Split, SynthStyle,
};
use crate::finetune::{save_keypoints, Keypoint, KeypointSet};

const RARE_ID_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub places: usize,
    pub queries: usize,
    /// How many of the queries are adversarial.
    pub adversarial: usize,
    /// Feature map height and width, in cells; multiples of `block`.
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    /// Block side in cells; match the patch side so blocks are patches.
    pub block: usize,
    /// Rare blocks per place.
    pub rare_blocks: usize,
    /// Put every place's rare blocks at the same positions.
    pub aligned_rare: bool,
    /// Size of the shared background vocabulary; at least the block count
    /// plus the per-place swaps.
    pub vocabulary: usize,
    /// Fraction of background blocks that follow the common layout.
    pub shared_fraction: f64,
    pub database_noise: f32,
    pub query_noise: f32,
    /// Keypoints planted per block.
    pub keypoints_per_block: usize,
    pub keypoint_dim: usize,
    pub keypoint_noise: f32,
    /// Pixels per feature cell.
    pub pixel_scale: usize,
    /// Latitude step between consecutive places, degrees.
    pub place_spacing_deg: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            places: 50,
            queries: 20,
            adversarial: 10,
            height: 30,
            width: 40,
            depth: 16,
            block: 5,
            rare_blocks: 2,
            aligned_rare: false,
            vocabulary: 64,
            shared_fraction: 0.95,
            database_noise: 0.3,
            query_noise: 0.3,
            keypoints_per_block: 3,
            keypoint_dim: 32,
            keypoint_noise: 0.05,
            pixel_scale: 16,
            place_spacing_deg: 0.01,
            seed: 7,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("scenario: {m}")));
        if self.block == 0 || !self.height.is_multiple_of(self.block) || !self.width.is_multiple_of(self.block) {
            return bad(format!("{}x{} is not tiled by blocks of {}", self.height, self.width, self.block));
        }
        if self.places < 2 {
            return bad("need at least two places".into());
        }
        if self.adversarial > self.queries {
            return bad("more adversarial queries than queries".into());
        }
        if self.rare_blocks * 2 >= self.blocks() {
            return bad("rare blocks leave no background".into());
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return bad("shared_fraction must lie in [0, 1]".into());
        }
        let own = ((1.0 - self.shared_fraction) * (self.blocks() - self.rare_blocks) as f64).round() as usize;
        if self.vocabulary < self.blocks() + own {
            return bad(format!("vocabulary of {} cannot fill {} blocks plus {own} swaps", self.vocabulary, self.blocks()));
        }
        if self.depth == 0 || self.keypoint_dim < 2 || self.pixel_scale == 0 {
            return bad("depth, keypoint_dim and pixel_scale must be positive".into());
        }
        Ok(())
    }

    pub fn blocks_x(&self) -> usize {
        self.width / self.block
    }

    pub fn blocks(&self) -> usize {
        (self.height / self.block) * self.blocks_x()
    }
}

/// Motif id per block, row-major over the block lattice.
pub type Layout = Vec<u64>;

#[derive(Debug, Clone)]
pub struct SceneImage {
    pub entry: ManifestEntry,
    pub layout: Layout,
    pub map: FeatureMap,
    pub keypoints: KeypointSet,
}

#[derive(Debug, Clone)]
pub struct QueryInfo {
    pub image_id: String,
    /// Place the query depicts.
    pub place: usize,
    /// Place whose background the query borrows, for adversarial queries.
    pub confuser: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub database: Vec<SceneImage>,
    pub queries: Vec<SceneImage>,
    pub query_info: Vec<QueryInfo>,
}

fn rare_id(place: usize, j: usize) -> u64 {
    RARE_ID_BASE + (place as u64) * 1024 + j as u64
}

pub fn is_rare(id: u64) -> bool {
    id >= RARE_ID_BASE
}

fn keypoint_descriptor(motif: u64, j: usize, dim: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(motif.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ j as u64);
    (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

fn keypoint_offset(motif: u64, j: usize, span: usize) -> (f32, f32) {
    let mut rng = ChaCha8Rng::seed_from_u64(motif ^ (0x6b70_0000 + j as u64));
    (rng.random_range(0.0..span as f32), rng.random_range(0.0..span as f32))
}

impl Scenario {
    pub fn generate(cfg: &ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n_blocks = cfg.blocks();
        let vocab_id = |v: usize| v as u64 + 1;
        // distinct motifs per position: a repeated motif would make matching
        // within one image ambiguous
        let mut pool: Vec<usize> = (0..cfg.vocabulary).collect();
        pool.shuffle(&mut rng);
        let common: Layout = pool[..n_blocks].iter().map(|&v| vocab_id(v)).collect();
        let spare: Vec<usize> = pool[n_blocks..].to_vec();

        let mut layouts = Vec::with_capacity(cfg.places);
        let mut rare_slots = Vec::with_capacity(cfg.places);
        let mut aligned: Vec<usize> = (0..n_blocks).collect();
        aligned.shuffle(&mut rng);
        for p in 0..cfg.places {
            let mut layout = common.clone();
            let mut order: Vec<usize> = (0..n_blocks).collect();
            if cfg.aligned_rare {
                let (head, tail) = aligned.split_at(cfg.rare_blocks);
                let mut tail = tail.to_vec();
                tail.shuffle(&mut rng);
                order = head.iter().copied().chain(tail).collect();
            } else {
                order.shuffle(&mut rng);
            }
            let (rare, rest) = order.split_at(cfg.rare_blocks);
            let own = ((1.0 - cfg.shared_fraction) * rest.len() as f64).round() as usize;
            let picks: Vec<usize> = spare.choose_multiple(&mut rng, own).copied().collect();
            for (&b, &v) in rest[..own].iter().zip(&picks) {
                layout[b] = vocab_id(v);
            }
            for (j, &b) in rare.iter().enumerate() {
                layout[b] = rare_id(p, j);
            }
            layouts.push(layout);
            rare_slots.push(rare.to_vec());
        }

        let scene = SceneBuilder { cfg };
        let mut database = Vec::with_capacity(cfg.places);
        for (p, layout) in layouts.iter().enumerate() {
            let id = format!("db{p:03}");
            database.push(scene.image(&id, layout, p, Split::Database, cfg.seed ^ ((p as u64) << 8), cfg.database_noise)?);
        }

        let mut queries = Vec::with_capacity(cfg.queries);
        let mut query_info = Vec::with_capacity(cfg.queries);
        let places: Vec<usize> = (0..cfg.places).collect();
        for q in 0..cfg.queries {
            let place = *places.choose(&mut rng).unwrap();
            let adversarial = q < cfg.adversarial;
            let (layout, confuser) = if adversarial {
                let mut c = *places.choose(&mut rng).unwrap();
                while c == place {
                    c = *places.choose(&mut rng).unwrap();
                }
                let mut layout = layouts[c].clone();
                for &b in &rare_slots[c] {
                    layout[b] = common[b];
                }
                for &b in &rare_slots[place] {
                    layout[b] = layouts[place][b];
                }
                (layout, Some(c))
            } else {
                (layouts[place].clone(), None)
            };
            let id = format!("q{q:03}");
            let seed = cfg.seed ^ 0x5100_0000 ^ ((q as u64) << 8);
            queries.push(scene.image(&id, &layout, place, Split::Query, seed, cfg.query_noise)?);
            query_info.push(QueryInfo { image_id: id, place, confuser });
        }
        Ok(Self {
            config: cfg.clone(),
            database,
            queries,
            query_info,
        })
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            entries: self.database.iter().chain(&self.queries).map(|i| i.entry.clone()).collect(),
        }
    }

    pub fn database_maps(&self) -> Vec<FeatureMap> {
        self.database.iter().map(|i| i.map.clone()).collect()
    }

    pub fn adversarial_ids(&self) -> Vec<String> {
        self.query_info
            .iter()
            .filter(|q| q.confuser.is_some())
            .map(|q| q.image_id.clone())
            .collect()
    }

    pub fn image(&self, id: &str) -> Option<&SceneImage> {
        self.database.iter().chain(&self.queries).find(|i| i.entry.image_id == id)
    }

    /// Fraction of blocks holding the same motif in both layouts.
    pub fn shared_fraction(a: &Layout, b: &Layout) -> f64 {
        let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
        same as f64 / a.len() as f64
    }

    /// Writes features, keypoints and `manifest.csv` under `dir`; returns
    /// the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        for sub in ["features", "keypoints"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        for img in self.database.iter().chain(&self.queries) {
            save_feature_map(&img.map, dir.join(&img.entry.feature_path))?;
            if let Some(k) = &img.entry.keypoint_path {
                save_keypoints(&img.keypoints, dir.join(k))?;
            }
        }
        let path = dir.join("manifest.csv");
        save_manifest(&self.manifest(), &path)?;
        Ok(path)
    }
}

struct SceneBuilder<'a> {
    cfg: &'a ScenarioConfig,
}

impl SceneBuilder<'_> {
    fn image(&self, id: &str, layout: &Layout, place: usize, split: Split, seed: u64, noise: f32) -> Result<SceneImage> {
        let cfg = self.cfg;
        let bx = cfg.blocks_x();
        let motifs: Vec<Motif> = layout
            .iter()
            .enumerate()
            .map(|(b, &mid)| Motif {
                x: (b % bx) * cfg.block,
                y: (b / bx) * cfg.block,
                side: cfg.block,
                id: mid,
            })
            .collect();
        let clean = synth_feature_map_with(seed, cfg.height, cfg.width, cfg.depth, &motifs, SynthStyle::default())?;
        let mut map = perturb(&clean, seed ^ 0xa11c_e000, noise);
        map.image_id = id.to_string();

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b65_7970);
        let span = (cfg.block * cfg.pixel_scale) as f32;
        let mut points = Vec::new();
        for m in &motifs {
            for j in 0..cfg.keypoints_per_block {
                let (ox, oy) = keypoint_offset(m.id, j, cfg.block * cfg.pixel_scale);
                let mut d = keypoint_descriptor(m.id, j, cfg.keypoint_dim);
                for v in &mut d {
                    *v += cfg.keypoint_noise * rng.sample::<f32, _>(StandardNormal);
                }
                let n = d.iter().map(|v| v * v).sum::<f32>().sqrt();
                d.iter_mut().for_each(|v| *v /= n);
                points.push(Keypoint {
                    x: (m.x * cfg.pixel_scale) as f32 + ox.min(span - 1.0),
                    y: (m.y * cfg.pixel_scale) as f32 + oy.min(span - 1.0),
                    descriptor: d,
                });
            }
        }
        let keypoints = KeypointSet::new(id, cfg.height * cfg.pixel_scale, cfg.width * cfg.pixel_scale, points)?;
        let entry = ManifestEntry {
            image_id: id.to_string(),
            feature_path: format!("features/{id}.pnvf"),
            keypoint_path: Some(format!("keypoints/{id}.pnvk")),
            latitude: place as f64 * cfg.place_spacing_deg,
            longitude: 0.0,
            split,
        };
        Ok(SceneImage {
            entry,
            layout: layout.clone(),
            map,
            keypoints,
        })
    }
}
