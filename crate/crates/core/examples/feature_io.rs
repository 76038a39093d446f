//! Reading and writing the three on-disk inputs: feature maps (PNVF),
//! keypoint sets (PNVK) and the dataset manifest.

use patchvlad::featureio::{
    load_feature_map, load_manifest, save_feature_map, save_manifest, synth_feature_map, DatasetManifest,
    ManifestEntry, Motif, Split,
};
use patchvlad::finetune::{load_keypoints, save_keypoints, Keypoint, KeypointSet};

fn main() -> patchvlad::Result<()> {
    let dir = tempfile::tempdir().expect("temporary directory");

    let motif = Motif { x: 5, y: 5, side: 5, id: 42 };
    let map = synth_feature_map(1, 15, 20, 8, &[motif])?;
    let fpath = dir.path().join("street.pnvf");
    save_feature_map(&map, &fpath)?;
    let back = load_feature_map(&fpath)?;
    println!(
        "{}: {}x{}x{}, identical after reload: {}",
        back.image_id,
        back.height(),
        back.width(),
        back.depth(),
        back.data() == map.data()
    );

    let unit = |v: [f32; 4]| {
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let points = vec![
        Keypoint { x: 12.0, y: 30.5, descriptor: unit([1.0, 2.0, 0.0, 0.5]) },
        Keypoint { x: 200.0, y: 100.0, descriptor: unit([0.0, 1.0, 1.0, 0.0]) },
    ];
    let kps = KeypointSet::new("street", 240, 320, points)?;
    let kpath = dir.path().join("street.pnvk");
    save_keypoints(&kps, &kpath)?;
    println!("keypoints reloaded: {}", load_keypoints(&kpath)?.len());

    let manifest = DatasetManifest::new(vec![ManifestEntry {
        image_id: "street".into(),
        feature_path: "street.pnvf".into(),
        keypoint_path: Some("street.pnvk".into()),
        latitude: 51.5007,
        longitude: -0.1246,
        split: Split::Database,
    }])?;
    let mpath = dir.path().join("manifest.csv");
    save_manifest(&manifest, &mpath)?;
    print!("manifest:\n{}", load_manifest(&mpath)?.to_text());
    Ok(())
}
