mod oracles;

use gscnn::data::ImageLabel;
use gscnn::evaluation::{cmc_map, fuse_multi_query, DistanceMatrix, Protocol};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random instance with coarse distances (so ties occur), few identities and
/// two cameras (so exclusions and match-free queries occur).
fn instance(rows: usize, cols: usize, seed: u64) -> DistanceMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = (rows / 2).max(2) as u64;
    let label = |rng: &mut ChaCha8Rng| ImageLabel {
        identity: rng.random_range(0..ids),
        camera: rng.random_range(0..2),
    };
    let query = (0..rows).map(|_| label(&mut rng)).collect();
    let gallery = (0..cols).map(|_| label(&mut rng)).collect();
    let values = (0..rows * cols).map(|_| rng.random_range(0..40) as f64 / 8.0).collect();
    DistanceMatrix::new(values, query, gallery).unwrap()
}

fn assert_matches_oracle(dm: &DistanceMatrix) {
    let r = cmc_map(dm, Protocol::Sq);
    let o = oracles::brute_force_ranking(&dm.values, &dm.query, &dm.gallery);
    assert_eq!(r.n_excluded, o.excluded);
    assert_eq!(r.n_queries, o.ap.len());
    assert_eq!(r.per_query_ap, o.ap);
    assert_eq!(r.map, o.map());
    for k in 1..=dm.cols {
        assert_eq!(r.rank(k), o.cmc(k), "rank {k}");
    }
}

#[test]
fn sq_ranking_equals_brute_force_on_full_size_instances() {
    for seed in 0..20 {
        assert_matches_oracle(&instance(50, 200, seed));
    }
}

proptest! {
    #[test]
    fn sq_ranking_equals_brute_force(rows in 1usize..=12, cols in 1usize..=30, seed in any::<u64>()) {
        assert_matches_oracle(&instance(rows, cols, seed));
    }

    #[test]
    fn cmc_is_monotone_and_reaches_one(seed in any::<u64>()) {
        let dm = instance(10, 40, seed);
        let r = cmc_map(&dm, Protocol::Sq);
        prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
        if r.n_queries > 0 {
            prop_assert_eq!(*r.cmc.last().unwrap(), 1.0);
        }
        prop_assert!((0.0..=1.0).contains(&r.map));
    }

    #[test]
    fn map_depends_only_on_order(seed in any::<u64>()) {
        let dm = instance(10, 40, seed);
        let mut warped = dm.clone();
        warped.values = dm.values.iter().map(|v| (v * 0.5).exp() + 3.0).collect();
        let (a, b) = (cmc_map(&dm, Protocol::Sq), cmc_map(&warped, Protocol::Sq));
        prop_assert_eq!(a.map, b.map);
        prop_assert_eq!(a.cmc, b.cmc);
    }

    #[test]
    fn mq_equals_sq_with_one_query_per_identity(seed in any::<u64>()) {
        let mut dm = instance(8, 30, seed);
        // distinct (identity, camera) per query row
        for (i, q) in dm.query.iter_mut().enumerate() {
            q.identity = i as u64 % 4;
            q.camera = i as u64 / 4;
        }
        prop_assert_eq!(cmc_map(&dm, Protocol::Sq), cmc_map(&dm, Protocol::Mq));
    }
}

#[test]
fn reference_rankings() {
    let l = |identity, camera| ImageLabel { identity, camera };
    let dm = DistanceMatrix::new(vec![0.1, 0.9], vec![l(1, 0)], vec![l(1, 1), l(2, 1)]).unwrap();
    let r = cmc_map(&dm, Protocol::Sq);
    assert_eq!((r.cmc.clone(), r.map), (vec![1.0, 1.0], 1.0));

    let dm = DistanceMatrix::new(vec![0.1, 0.2, 0.3], vec![l(1, 0)], vec![l(2, 1), l(1, 1), l(1, 1)]).unwrap();
    let r = cmc_map(&dm, Protocol::Sq);
    assert_eq!(r.cmc, vec![0.0, 1.0, 1.0]);
    assert!((r.map - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
}

#[test]
fn same_camera_matches_are_excluded_and_counted() {
    let l = |identity, camera| ImageLabel { identity, camera };
    let dm = DistanceMatrix::new(vec![0.0, 0.5, 0.2, 0.3], vec![l(1, 0), l(7, 0)], vec![l(1, 0), l(1, 1)]).unwrap();
    let r = cmc_map(&dm, Protocol::Sq);
    assert_eq!(r.n_queries, 1);
    assert_eq!(r.n_excluded, 1);
    assert_eq!(r.rank(1), 1.0);
}

#[test]
fn mq_rescales_and_averages_rows() {
    let l = |identity, camera| ImageLabel { identity, camera };
    let dm = DistanceMatrix::new(
        vec![1.0, 3.0, 2.0, 10.0, 10.0, 10.0],
        vec![l(1, 0), l(1, 0)],
        vec![l(1, 1), l(2, 1), l(3, 1)],
    )
    .unwrap();
    let (rows, keys) = fuse_multi_query(&dm);
    assert_eq!(keys, vec![l(1, 0)]);
    // first row rescales to [0, 1, 0.5]; the constant row maps to zeros
    assert_eq!(rows, vec![vec![0.0, 0.5, 0.25]]);
}
