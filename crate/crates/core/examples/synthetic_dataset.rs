//! Writes the synthetic benchmark (features, keypoints, manifest) to a
//! directory, ready for the `patchvlad` binary.
//!
//!     cargo run --example synthetic_dataset -- /tmp/pv
//!     patchvlad build-index --manifest /tmp/pv/manifest.csv --out /tmp/pv/index.pnvi --d-pca 16

use std::path::PathBuf;

use patchvlad::synth::{Scenario, ScenarioConfig};

fn main() -> patchvlad::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synthetic".into()));
    let scenario = Scenario::generate(&ScenarioConfig::default())?;
    let manifest = scenario.write(&dir)?;
    println!(
        "{} database images, {} queries ({} adversarial) -> {}",
        scenario.database.len(),
        scenario.queries.len(),
        scenario.adversarial_ids().len(),
        manifest.display()
    );
    Ok(())
}
