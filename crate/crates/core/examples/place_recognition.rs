//! The full pipeline on the synthetic benchmark: index the database, rank
//! every query by global shortlist plus patch reranking, and report
//! Recall@N with and without rarity weighting.

use patchvlad::commands::initial_params;
use patchvlad::retrieval::{
    build_index_from_maps, describe_query, global_ranking, query_image, IndexConfig, RecallTable,
};
use patchvlad::synth::{Scenario, ScenarioConfig};

fn main() -> patchvlad::Result<()> {
    let scenario = Scenario::generate(&ScenarioConfig::default())?;
    let maps = scenario.database_maps();
    let manifest = scenario.manifest();
    let params = initial_params(&maps, 16, 0)?;
    let cfg = IndexConfig {
        d_pca: 16,
        ..IndexConfig::default()
    };
    let index = build_index_from_maps(&manifest, &maps, &params, &cfg)?;
    println!("{} images, {} patches indexed", index.len(), index.patch_count());

    let k = index.len();
    let global = scenario
        .queries
        .iter()
        .map(|q| global_ranking(&index, &describe_query(&index, &q.map)?, k))
        .collect::<patchvlad::Result<Vec<_>>>()?;
    println!("global descriptor only\n{}", RecallTable::compute(&global, &manifest, 25.0)?.render());

    for weighted in [false, true] {
        let results = scenario
            .queries
            .iter()
            .map(|q| query_image(&index, &q.map, k, weighted))
            .collect::<patchvlad::Result<Vec<_>>>()?;
        let label = if weighted { "weighted" } else { "unweighted" };
        println!("{label} reranking\n{}", RecallTable::compute(&results, &manifest, 25.0)?.render());
    }
    Ok(())
}
