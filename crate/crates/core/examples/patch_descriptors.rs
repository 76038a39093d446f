//! From a feature map to patch descriptors: the patch grid, soft-assignment
//! VLAD aggregation and PCA whitening.

use patchvlad::featureio::synth_feature_map;
use patchvlad::linalg::norm;
use patchvlad::patch::{extract_patches, patch_count};
use patchvlad::vlad::{describe_global, describe_patch, describe_unreduced, fit_pca, VladParams};

fn main() -> patchvlad::Result<()> {
    let maps: Vec<_> = (0..6)
        .map(|s| synth_feature_map(s, 20, 30, 8, &[]))
        .collect::<patchvlad::Result<_>>()?;
    println!("5x5 patches at stride 5 on 20x30: {}", patch_count(20, 30, 5, 5)?);
    println!("5x5 patches at stride 2 on 20x30: {}", patch_count(20, 30, 5, 2)?);

    let samples: Vec<Vec<f64>> = maps[0]
        .data()
        .chunks(8)
        .map(|c| c.iter().map(|&x| x as f64).collect())
        .collect();
    let params = VladParams::initialize(&samples, 4, 0)?;

    let patches: Vec<_> = maps
        .iter()
        .map(|m| extract_patches(m, 5, 5))
        .collect::<patchvlad::Result<Vec<_>>>()?
        .concat();
    let raw: Vec<Vec<f64>> = patches
        .iter()
        .map(|p| describe_unreduced(&params, p))
        .collect::<patchvlad::Result<_>>()?;
    println!("{} patches, unreduced dimension {}", raw.len(), raw[0].len());

    let pca = fit_pca(&raw, 8)?;
    let d = describe_patch(&params, &pca, &patches[0])?;
    println!(
        "patch ({}, {}) -> {} dims, norm {:.6}; basis orthonormality error {:.2e}",
        d.grid_x,
        d.grid_y,
        d.vector.len(),
        norm(&d.vector),
        pca.orthonormality_error()
    );

    let globals: Vec<Vec<f64>> = maps
        .iter()
        .map(|m| describe_unreduced(&params, &patchvlad::patch::full_map_patch(m)))
        .collect::<patchvlad::Result<_>>()?;
    let gpca = fit_pca(&globals, 4)?;
    println!("global descriptor: {} dims", describe_global(&params, &gpca, &maps[0])?.len());
    Ok(())
}
