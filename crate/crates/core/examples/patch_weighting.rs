//! Rarity weights: k-means over all database patch descriptors, then each
//! patch is weighted by its summed distance to the nearest centroids.
//! Prints how the weights of each place's unique blocks compare with the
//! shared background.

use patchvlad::commands::initial_params;
use patchvlad::retrieval::{build_index_from_maps, reweigh, IndexConfig};
use patchvlad::synth::{is_rare, Scenario, ScenarioConfig};

fn main() -> patchvlad::Result<()> {
    let scenario = Scenario::generate(&ScenarioConfig::default())?;
    let maps = scenario.database_maps();
    let params = initial_params(&maps, 16, 0)?;
    let cfg = IndexConfig {
        d_pca: 16,
        ..IndexConfig::default()
    };
    let mut index = build_index_from_maps(&scenario.manifest(), &maps, &params, &cfg)?;

    for alpha in [1, 2, 5, 10] {
        reweigh(&mut index, 16, alpha, 0)?;
        let (mut rare, mut common) = (Vec::new(), Vec::new());
        for (rec, img) in index.images.iter().zip(&scenario.database) {
            for (p, motif) in rec.patches.iter().zip(&img.layout) {
                if is_rare(*motif) { rare.push(p.weight) } else { common.push(p.weight) }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "alpha {alpha:>2}: unique blocks {:.4}, background {:.4}, ratio {:.3}",
            mean(&rare),
            mean(&common),
            mean(&rare) / mean(&common)
        );
    }
    Ok(())
}
