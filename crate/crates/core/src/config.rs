//! Run configuration: every tunable in one flat `key = value` file.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::patch::PatchSpec;
use crate::retrieval::IndexConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub patch_side: usize,
    pub stride: usize,
    pub vlad_clusters: usize,
    pub d_pca: usize,
    pub weight_clusters: usize,
    pub alpha: usize,
    pub k_p: usize,
    pub k_n: usize,
    pub margin: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub k_candidates: usize,
    pub radius_m: f64,
    pub positive_radius_m: f64,
    pub ratio_threshold: f64,
    pub ransac_iters: usize,
    pub ransac_tol: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ft = FinetuneConfig::default();
        let ix = IndexConfig::default();
        Self {
            patch_side: ix.patch.side,
            stride: ix.patch.stride,
            vlad_clusters: 64,
            d_pca: ix.d_pca,
            weight_clusters: ix.weight_clusters,
            alpha: ix.alpha,
            k_p: ft.k_p,
            k_n: ft.k_n,
            margin: ft.margin,
            learning_rate: ft.learning_rate,
            momentum: ft.momentum,
            epochs: ft.epochs,
            k_candidates: 100,
            radius_m: 25.0,
            positive_radius_m: 10.0,
            ratio_threshold: ft.ratio_threshold,
            ransac_iters: ft.ransac_iters,
            ransac_tol: ft.ransac_tol,
            seed: 0,
        }
    }
}

/// Name and one-line description of every field, in file order.
pub const FIELDS: &[(&str, &str)] = &[
    ("patch_side", "patch side in feature cells"),
    ("stride", "patch stride in feature cells"),
    ("vlad_clusters", "VLAD clusters for freshly initialized parameters"),
    ("d_pca", "reduced descriptor dimension"),
    ("weight_clusters", "k-means centroids for patch weights"),
    ("alpha", "nearest centroids summed into a patch weight"),
    ("k_p", "positive candidates per query patch when mining"),
    ("k_n", "negative candidates per query patch when mining"),
    ("margin", "triplet margin"),
    ("learning_rate", "SGD learning rate"),
    ("momentum", "SGD momentum"),
    ("epochs", "fine-tuning epochs"),
    ("k_candidates", "global shortlist size before reranking"),
    ("radius_m", "ground-truth radius in metres; also the negative-image threshold"),
    ("positive_radius_m", "maximum distance of the positive image when fine-tuning"),
    ("ratio_threshold", "keypoint ratio-test threshold"),
    ("ransac_iters", "RANSAC iterations"),
    ("ransac_tol", "RANSAC inlier tolerance in pixels"),
    ("seed", "seed for k-means, RANSAC and shuffling"),
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("config: bad value {value:?} for {key}")))
}

impl RunConfig {
    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "patch_side" => self.patch_side = parse_value(key, value)?,
            "stride" => self.stride = parse_value(key, value)?,
            "vlad_clusters" => self.vlad_clusters = parse_value(key, value)?,
            "d_pca" => self.d_pca = parse_value(key, value)?,
            "weight_clusters" => self.weight_clusters = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "k_p" => self.k_p = parse_value(key, value)?,
            "k_n" => self.k_n = parse_value(key, value)?,
            "margin" => self.margin = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "k_candidates" => self.k_candidates = parse_value(key, value)?,
            "radius_m" => self.radius_m = parse_value(key, value)?,
            "positive_radius_m" => self.positive_radius_m = parse_value(key, value)?,
            "ratio_threshold" => self.ratio_threshold = parse_value(key, value)?,
            "ransac_iters" => self.ransac_iters = parse_value(key, value)?,
            "ransac_tol" => self.ransac_tol = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            other => return Err(Error::InvalidArgument(format!("config: unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Textual value of a field, as it would appear in a config file.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "patch_side" => self.patch_side.to_string(),
            "stride" => self.stride.to_string(),
            "vlad_clusters" => self.vlad_clusters.to_string(),
            "d_pca" => self.d_pca.to_string(),
            "weight_clusters" => self.weight_clusters.to_string(),
            "alpha" => self.alpha.to_string(),
            "k_p" => self.k_p.to_string(),
            "k_n" => self.k_n.to_string(),
            "margin" => self.margin.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "momentum" => self.momentum.to_string(),
            "epochs" => self.epochs.to_string(),
            "k_candidates" => self.k_candidates.to_string(),
            "radius_m" => self.radius_m.to_string(),
            "positive_radius_m" => self.positive_radius_m.to_string(),
            "ratio_threshold" => self.ratio_threshold.to_string(),
            "ransac_iters" => self.ransac_iters.to_string(),
            "ransac_tol" => self.ransac_tol.to_string(),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("config line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _) in FIELDS {
            let _ = writeln!(out, "{k} = {}", self.get(k).unwrap_or_default());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("config: {m}")));
        if self.patch_side == 0 || self.stride == 0 {
            return bad("patch_side and stride must be positive");
        }
        if self.vlad_clusters == 0 || self.d_pca == 0 {
            return bad("vlad_clusters and d_pca must be positive");
        }
        if self.weight_clusters == 0 || self.alpha == 0 || self.alpha > self.weight_clusters {
            return bad("alpha must lie in [1, weight_clusters]");
        }
        if self.k_candidates == 0 {
            return bad("k_candidates must be positive");
        }
        if !(self.radius_m > 0.0) || !(self.positive_radius_m > 0.0) {
            return bad("radii must be positive");
        }
        self.finetune().validate()
    }

    pub fn patch(&self) -> PatchSpec {
        PatchSpec {
            side: self.patch_side,
            stride: self.stride,
        }
    }

    pub fn index(&self) -> IndexConfig {
        IndexConfig {
            patch: self.patch(),
            weight_clusters: self.weight_clusters,
            alpha: self.alpha,
            d_pca: self.d_pca,
            seed: self.seed,
        }
    }

    pub fn finetune(&self) -> FinetuneConfig {
        FinetuneConfig {
            margin: self.margin,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            epochs: self.epochs,
            k_p: self.k_p,
            k_n: self.k_n,
            ratio_threshold: self.ratio_threshold,
            ransac_iters: self.ransac_iters,
            ransac_tol: self.ransac_tol,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let cfg = RunConfig {
            alpha: 3,
            learning_rate: 0.25,
            seed: 99,
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn every_field_is_settable() {
        let cfg = RunConfig::default();
        for (k, _) in FIELDS {
            let mut c = cfg.clone();
            c.set(k, &cfg.get(k).unwrap()).unwrap();
            assert_eq!(c, cfg, "{k}");
        }
    }

    #[test]
    fn comments_and_errors() {
        let cfg = RunConfig::parse("# run\n\nalpha = 4  # fewer\nweight_clusters=8\n").unwrap();
        assert_eq!((cfg.alpha, cfg.weight_clusters), (4, 8));
        assert!(RunConfig::parse("alpha 4").is_err());
        assert!(RunConfig::parse("colour = red").is_err());
        assert!(RunConfig::parse("alpha = many").is_err());
        assert!(RunConfig::parse("alpha = 20").is_err());
        assert!(RunConfig::parse("momentum = 1.5").is_err());
    }
}
