//! Property tests over the public API, each against a direct oracle or a
//! bound that must hold for any input.

use proptest::collection::vec;
use proptest::prelude::*;

use patchvlad::config::RunConfig;
use patchvlad::featureio::{load_feature_map, save_feature_map, DatasetManifest, FeatureMap, ManifestEntry, Split};
use patchvlad::finetune::{load_keypoints, ransac_filter, save_keypoints, triplet_loss, Keypoint, KeypointSet};
use patchvlad::matcher::{mutual_nn, spatial_score, weight_matrix, DistanceMatrix, MatchSet, PatchMatch};
use patchvlad::patch::{Patch, PatchGrid};
use patchvlad::retrieval::{geo_distance, recall_at_n, QueryResult, RankedImage, EARTH_RADIUS_M};
use patchvlad::vlad::{cosine_distance, describe_unreduced, soft_assign, VladParams};
use patchvlad::weighting::{kmeans_traced, patch_weight, CentroidSet, WEIGHT_FLOOR};

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn nonzero_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    vec(-1.0f64..1.0, dim).prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
}

fn matrix() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..12, 1usize..12).prop_flat_map(|(r, c)| (Just(r), Just(c), vec(0.0f64..2.0, r * c)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn soft_assignment_is_a_distribution(seed in 0u64..1000, x in vec(-3.0f64..3.0, 6)) {
        let params = VladParams::random(5, 6, seed);
        let a = soft_assign(&params, &x).unwrap();
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn descriptor_blocks_share_one_norm(seed in 0u64..1000, rows in vec(-2.0f32..2.0, 4 * 6)) {
        let params = VladParams::random(3, 6, seed);
        let v = describe_unreduced(&params, &Patch::new(0, 0, 0, 6, rows).unwrap()).unwrap();
        prop_assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        let norms: Vec<f64> = v.chunks(6).map(|b| b.iter().map(|x| x * x).sum::<f64>().sqrt()).filter(|&n| n > 1e-12).collect();
        for n in &norms {
            prop_assert!((n - norms[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn cosine_distance_is_symmetric_and_bounded(a in nonzero_vec(7), b in nonzero_vec(7)) {
        let (a, b) = (unit(&a), unit(&b));
        let ab = cosine_distance(&a, &b).unwrap();
        prop_assert!((ab - cosine_distance(&b, &a).unwrap()).abs() < 1e-15);
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&ab));
        prop_assert!(cosine_distance(&a, &a).unwrap().abs() < 1e-12);
    }

    #[test]
    fn mutual_matches_are_one_to_one_row_and_column_minima((r, c, values) in matrix()) {
        let m = DistanceMatrix::new(r, c, values.clone()).unwrap();
        let set = mutual_nn(&m);
        let mut qs: Vec<_> = set.pairs.iter().map(|p| p.query).collect();
        let mut rs: Vec<_> = set.pairs.iter().map(|p| p.reference).collect();
        qs.dedup();
        rs.sort();
        rs.dedup();
        prop_assert_eq!(qs.len(), set.len());
        prop_assert_eq!(rs.len(), set.len());
        for p in &set.pairs {
            let v = values[p.query * c + p.reference];
            prop_assert_eq!(p.value, v);
            prop_assert!((0..c).all(|j| values[p.query * c + j] >= v));
            prop_assert!((0..r).all(|i| values[i * c + p.reference] >= v));
        }
    }

    #[test]
    fn weighting_divides_by_both_weights((r, c, values) in matrix(), seed in 0u64..100) {
        let wq: Vec<f64> = (0..r).map(|i| 0.5 + ((seed + i as u64) % 7) as f64).collect();
        let wr: Vec<f64> = (0..c).map(|j| 0.25 + ((seed * 3 + j as u64) % 5) as f64).collect();
        let m = DistanceMatrix::new(r, c, values.clone()).unwrap();
        let w = weight_matrix(&wq, &wr, &m).unwrap();
        for i in 0..r {
            for j in 0..c {
                let expected = values[i * c + j] / (wq[i] * wr[j]);
                prop_assert!((w.get(i, j) - expected).abs() <= 1e-12 * expected.abs().max(1.0));
            }
        }
    }

    #[test]
    fn spatial_score_peaks_on_consistent_shifts(
        nx in 2usize..7, ny in 2usize..7, shift in (0usize..3, 0usize..3), jitter in vec((0usize..6, 0usize..6, 0usize..6, 0usize..6), 1..10)
    ) {
        let grid = PatchGrid::new(ny, nx, 1, 1).unwrap();
        let best = |count: usize| count as f64 * ((nx - 1) + (ny - 1)) as f64;
        let consistent: Vec<PatchMatch> = (0..nx.saturating_sub(shift.0))
            .flat_map(|x| (0..ny.saturating_sub(shift.1)).map(move |y| (x, y)))
            .map(|(x, y)| PatchMatch { query: grid.index(x + shift.0, y + shift.1), reference: grid.index(x, y), value: 0.0 })
            .collect();
        let n = consistent.len();
        let score = spatial_score(&MatchSet { pairs: consistent }, &grid, &grid);
        prop_assert!((score - best(n)).abs() < 1e-9);

        let arbitrary: Vec<PatchMatch> = jitter
            .iter()
            .map(|&(a, b, c, d)| PatchMatch { query: grid.index(a % nx, b % ny), reference: grid.index(c % nx, d % ny), value: 0.0 })
            .collect();
        let n = arbitrary.len();
        let loose = spatial_score(&MatchSet { pairs: arbitrary }, &grid, &grid);
        prop_assert!(loose <= best(n) + 1e-9);
    }

    #[test]
    fn weights_are_floored_and_grow_with_alpha(f in nonzero_vec(4), cs in vec(nonzero_vec(4), 5)) {
        let set = CentroidSet::new(cs, 0.0).unwrap();
        let f = unit(&f);
        let mut last = 0.0;
        for alpha in 1..=5 {
            let w = patch_weight(&f, &set, alpha).unwrap();
            prop_assert!(w >= WEIGHT_FLOOR);
            prop_assert!(w >= last);
            last = w;
        }
    }

    #[test]
    fn kmeans_objective_never_increases(points in vec(vec(-5.0f64..5.0, 3), 8..40), k in 1usize..5, seed in 0u64..50) {
        let (set, trace) = kmeans_traced(&points, k, seed, 50).unwrap();
        prop_assert_eq!(set.k(), k);
        for w in trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
        }
    }

    #[test]
    fn triplet_loss_is_a_sum_of_hinges(q in nonzero_vec(5), p in nonzero_vec(5), ns in vec(nonzero_vec(5), 1..4), m in 0.01f64..1.0) {
        let (q, p) = (unit(&q), unit(&p));
        let ns: Vec<Vec<f64>> = ns.iter().map(|n| unit(n)).collect();
        let d = |a: &[f64], b: &[f64]| 1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let expected: f64 = ns.iter().map(|n| (d(&q, &p) + m - d(&q, n)).max(0.0)).sum();
        let got = triplet_loss(&q, std::slice::from_ref(&p), &ns, m).unwrap();
        prop_assert!(got >= 0.0);
        prop_assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn geo_distance_is_a_metric(a in (-80.0f64..80.0, -170.0f64..170.0), b in (-80.0f64..80.0, -170.0f64..170.0), c in (-80.0f64..80.0, -170.0f64..170.0)) {
        let d = |x: (f64, f64), y: (f64, f64)| geo_distance(x.0, x.1, y.0, y.1).unwrap();
        prop_assert!((d(a, b) - d(b, a)).abs() < 1e-6);
        prop_assert!(d(a, a) < 1e-6);
        prop_assert!(d(a, b) <= std::f64::consts::PI * EARTH_RADIUS_M + 1e-6);
        prop_assert!(d(a, c) <= d(a, b) + d(b, c) + 1e-6);
    }

    #[test]
    fn recall_grows_with_n(hits in vec(proptest::option::of(0usize..12), 1..8)) {
        let mut entries: Vec<ManifestEntry> = (0..12)
            .map(|i| ManifestEntry {
                image_id: format!("db{i}"),
                feature_path: String::new(),
                keypoint_path: None,
                latitude: i as f64,
                longitude: 0.0,
                split: Split::Database,
            })
            .collect();
        let mut results = Vec::new();
        for (qi, hit) in hits.iter().enumerate() {
            // the query sits at the hit's location, or far from everything
            let lat = hit.map_or(-45.0, |h| h as f64);
            entries.push(ManifestEntry {
                image_id: format!("q{qi}"),
                feature_path: String::new(),
                keypoint_path: None,
                latitude: lat,
                longitude: 0.0,
                split: Split::Query,
            });
            let ranked = (0..12)
                .map(|i| RankedImage {
                    image_id: format!("db{i}"),
                    db_index: i,
                    score: 0.0,
                    global_distance: 0.0,
                    mean_match_distance: 0.0,
                    geo_distance: None,
                })
                .collect();
            results.push(QueryResult { query_id: format!("q{qi}"), ranked });
        }
        let manifest = DatasetManifest::new(entries).unwrap();
        let mut last = 0.0;
        for n in 1..=12 {
            let r = recall_at_n(&results, &manifest, n, 25.0).unwrap();
            let expected = hits.iter().filter(|h| h.is_some_and(|h| h < n)).count() as f64 / hits.len() as f64;
            prop_assert!((r - expected).abs() < 1e-12);
            prop_assert!(r >= last);
            last = r;
        }
    }

    #[test]
    fn ransac_keeps_a_planted_translation(
        tx in -30.0f32..30.0, ty in -30.0f32..30.0, inliers in 4usize..10, outliers in 0usize..4, seed in 0u64..100
    ) {
        let total = inliers + outliers;
        let desc = vec![1.0f32, 0.0];
        let a_pts: Vec<Keypoint> = (0..total)
            .map(|i| Keypoint { x: 40.0 + 7.0 * i as f32, y: 40.0 + 3.0 * i as f32, descriptor: desc.clone() })
            .collect();
        let b_pts: Vec<Keypoint> = a_pts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let (dx, dy) = if i < inliers { (tx, ty) } else { (tx + 60.0 + 13.0 * i as f32, ty - 55.0) };
                Keypoint { x: (p.x + dx).clamp(0.0, 299.0), y: (p.y + dy).clamp(0.0, 299.0), descriptor: desc.clone() }
            })
            .collect();
        let a = KeypointSet::new("a", 300, 300, a_pts).unwrap();
        let b = KeypointSet::new("b", 300, 300, b_pts).unwrap();
        let matches: Vec<(usize, usize)> = (0..total).map(|i| (i, i)).collect();
        let kept = ransac_filter(&matches, &a, &b, 200, 2.0, seed).unwrap();
        prop_assert_eq!(kept, matches[..inliers].to_vec());
    }

    #[test]
    fn feature_maps_round_trip_bit_exactly(h in 1usize..6, w in 1usize..6, d in 1usize..5, seed in any::<u32>()) {
        let data: Vec<f32> = (0..h * w * d).map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 / 1e6).collect();
        let map = FeatureMap::new("m", h, w, d, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pnvf");
        save_feature_map(&map, &path).unwrap();
        prop_assert_eq!(load_feature_map(&path).unwrap(), map);
    }

    #[test]
    fn keypoints_round_trip(points in vec((0.0f32..99.0, 0.0f32..49.0, vec(0.1f32..1.0, 3)), 0..6)) {
        let pts: Vec<Keypoint> = points
            .into_iter()
            .map(|(x, y, d)| {
                let n = d.iter().map(|v| v * v).sum::<f32>().sqrt();
                Keypoint { x, y, descriptor: d.iter().map(|v| v / n).collect() }
            })
            .collect();
        let set = KeypointSet::new("k", 50, 100, pts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.pnvk");
        save_keypoints(&set, &path).unwrap();
        prop_assert_eq!(load_keypoints(&path).unwrap(), set);
    }

    #[test]
    fn manifests_round_trip(rows in vec((-89.0f64..89.0, -179.0f64..179.0, any::<bool>(), any::<bool>()), 1..8)) {
        let entries: Vec<ManifestEntry> = rows
            .iter()
            .enumerate()
            .map(|(i, &(lat, lon, kp, db))| ManifestEntry {
                image_id: format!("img{i}"),
                feature_path: format!("f/img{i}.pnvf"),
                keypoint_path: kp.then(|| format!("k/img{i}.pnvk")),
                latitude: lat,
                longitude: lon,
                split: if db { Split::Database } else { Split::Query },
            })
            .collect();
        let m = DatasetManifest::new(entries).unwrap();
        prop_assert_eq!(DatasetManifest::parse(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn run_configs_round_trip(alpha in 1usize..8, extra in 0usize..8, lr in 0.0f64..1.0, seed in any::<u64>(), radius in 1.0f64..500.0) {
        let cfg = RunConfig {
            alpha,
            weight_clusters: alpha + extra,
            learning_rate: lr,
            seed,
            radius_m: radius,
            ..RunConfig::default()
        };
        prop_assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
