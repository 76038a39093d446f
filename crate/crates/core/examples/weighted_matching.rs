//! Matching the patches of two images: distance matrix, optional weighting,
//! mutual nearest neighbours and the spatial consistency score.

use patchvlad::commands::initial_params;
use patchvlad::matcher::{distance_matrix, mutual_nn, pair_match, spatial_score};
use patchvlad::retrieval::{build_index_from_maps, describe_query, IndexConfig};
use patchvlad::synth::{Scenario, ScenarioConfig};

fn main() -> patchvlad::Result<()> {
    let scenario = Scenario::generate(&ScenarioConfig {
        places: 10,
        queries: 2,
        adversarial: 1,
        ..ScenarioConfig::default()
    })?;
    let maps = scenario.database_maps();
    let params = initial_params(&maps, 16, 0)?;
    let cfg = IndexConfig {
        d_pca: 16,
        ..IndexConfig::default()
    };
    let index = build_index_from_maps(&scenario.manifest(), &maps, &params, &cfg)?;

    for (q, info) in scenario.queries.iter().zip(&scenario.query_info) {
        let desc = describe_query(&index, &q.map)?;
        let truth = &index.images[info.place];
        let d = distance_matrix(&desc.patches, &truth.patches)?;
        let raw = mutual_nn(&d);
        println!(
            "{} -> {}: {} mutual matches, spatial score {:.1}",
            q.entry.image_id,
            truth.image_id,
            raw.len(),
            spatial_score(&raw, &index.grid, &index.grid)
        );
        let mut candidates = vec![info.place];
        candidates.extend(info.confuser);
        for c in candidates {
            let rec = &index.images[c];
            let plain = pair_match(&desc.patches, &rec.patches, &index.grid, &index.grid, false)?;
            let weighted = pair_match(&desc.patches, &rec.patches, &index.grid, &index.grid, true)?;
            println!(
                "    vs {}: unweighted score {:.1} ({} matches), weighted score {:.1} ({} matches)",
                rec.image_id,
                plain.score,
                plain.matches.len(),
                weighted.score,
                weighted.matches.len()
            );
        }
    }
    Ok(())
}
