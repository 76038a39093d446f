//! Mining keypoint-verified triplets from a (query, positive, negative)
//! image tuple and fine-tuning the VLAD layer on them.

use patchvlad::commands::initial_params;
use patchvlad::finetune::{finetune, mean_distances, mine_triplets, FinetuneConfig, TrainingImage};
use patchvlad::patch::{extract_patches, PatchSpec};
use patchvlad::synth::{Scenario, ScenarioConfig};
use patchvlad::vlad::{describe_unreduced, fit_pca};

fn main() -> patchvlad::Result<()> {
    let scenario = Scenario::generate(&ScenarioConfig {
        places: 6,
        queries: 3,
        adversarial: 0,
        depth: 8,
        ..ScenarioConfig::default()
    })?;
    let params = initial_params(&scenario.database_maps(), 8, 0)?;
    let rows: Vec<Vec<f64>> = scenario
        .database
        .iter()
        .flat_map(|img| extract_patches(&img.map, 5, 5).unwrap())
        .map(|p| describe_unreduced(&params, &p))
        .collect::<patchvlad::Result<_>>()?;
    let pca = fit_pca(&rows, 16)?;

    let training = |img: &patchvlad::synth::SceneImage| TrainingImage {
        map: img.map.clone(),
        keypoints: img.keypoints.clone(),
    };
    let cfg = FinetuneConfig {
        learning_rate: 0.05,
        epochs: 20,
        ..FinetuneConfig::default()
    };
    let mut triplets = Vec::new();
    for (q, info) in scenario.queries.iter().zip(&scenario.query_info) {
        let positive = &scenario.database[info.place];
        let negative = &scenario.database[(info.place + 1) % scenario.database.len()];
        let mined = mine_triplets(
            &training(q),
            &training(positive),
            &training(negative),
            &params,
            &pca,
            PatchSpec::default(),
            &cfg,
        )?;
        println!("{} vs {}: {} triplets", q.entry.image_id, positive.entry.image_id, mined.len());
        triplets.extend(mined);
    }

    let (pos0, neg0) = mean_distances(&params, &triplets)?;
    let outcome = finetune(&params, &triplets, &cfg)?;
    let (pos1, neg1) = mean_distances(&outcome.params, &triplets)?;
    let losses = &outcome.epoch_losses;
    println!("loss {:.5} -> {:.5}", losses[0], losses[losses.len() - 1]);
    println!("positive distance {pos0:.4} -> {pos1:.4}, negative distance {neg0:.4} -> {neg1:.4}");
    Ok(())
}
