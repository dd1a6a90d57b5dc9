use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajmoe::eval::{acc_at_k, rank_candidates};
use trajmoe::geo::{cross_layer, normalize_coords, popularity_rank, RANK_BUCKETS};
use trajmoe::synth::{preprocess, read_city, read_trajectories, write_city, write_trajectories, Location, PreprocessConfig};
use trajmoe::traj::{day_of_week, pad_batch, stay_bucket, tod_slot, Step, DOW_SLOTS, TOD_SLOTS};
use trajmoe::{City, ModelConfig, Tensor, Trajectory, TrajMoe};

fn city_from(seed: u64, c: usize, n: usize) -> City {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let locs = (0..n)
        .map(|id| Location {
            id,
            poi_counts: (0..c).map(|_| rng.gen_range(0..9)).collect(),
            lat: rng.gen_range(-60.0..60.0),
            lon: rng.gen_range(-170.0..170.0),
            flow: rng.gen_range(0.0..1e4),
        })
        .collect();
    City::new(0, c, locs).unwrap()
}

fn traj_from(seed: u64, len: usize, n: usize) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 1_700_000_000 + rng.gen_range(0..1_000_000);
    let steps = (0..len)
        .map(|_| {
            t += rng.gen_range(60..40_000);
            Step {
                location: rng.gen_range(0..n),
                time: t,
            }
        })
        .collect();
    Trajectory::new(3, 0, steps).unwrap()
}

fn small_model(seed: u64) -> TrajMoe<f64> {
    let cfg = ModelConfig {
        d: 8,
        heads: 2,
        layers: 2,
        categories: 3,
        max_len: 10,
        init_std: 0.2,
        ..Default::default()
    };
    TrajMoe::new(cfg, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, vals in prop::collection::vec(-60.0f64..60.0, 54)) {
        let t = Tensor::new(vec![rows, cols], vals[..rows * cols].to_vec()).unwrap();
        let s = t.softmax(1).unwrap();
        for i in 0..rows {
            let r = s.row(i);
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn zero_cross_weights_are_identity(e0 in prop::collection::vec(-5.0f64..5.0, 6), ei in prop::collection::vec(-5.0f64..5.0, 6)) {
        let z = vec![0.0; 6];
        prop_assert_eq!(cross_layer(&e0, &ei, &z, &z).unwrap(), ei);
    }

    #[test]
    fn popularity_ranks_are_quintiles(flows in prop::collection::vec(0.0f64..1e6, 1..80)) {
        let r = popularity_rank(&flows).unwrap();
        let n = flows.len();
        prop_assert!(r.iter().all(|&k| (1..=RANK_BUCKETS).contains(&k)));
        for i in 0..n {
            for j in 0..n {
                if flows[i] > flows[j] {
                    prop_assert!(r[i] <= r[j]);
                }
            }
        }
        for k in 1..=RANK_BUCKETS {
            let size = r.iter().filter(|&&x| x == k).count();
            let expect = (n * k).div_ceil(RANK_BUCKETS) - (n * (k - 1)).div_ceil(RANK_BUCKETS);
            prop_assert_eq!(size, expect);
        }
    }

    #[test]
    fn normalized_coords_have_zero_mean(coords in prop::collection::vec((-90.0f64..90.0, -180.0f64..180.0), 2..40)) {
        let z = normalize_coords(&coords).unwrap();
        let n = z.len() as f64;
        let mean: f64 = z.iter().map(|c| c.0).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        let var: f64 = z.iter().map(|c| c.1 * c.1).sum::<f64>() / n;
        let spread = coords.iter().any(|c| c.1 != coords[0].1);
        let ok = if spread { (var - 1.0).abs() < 1e-9 } else { var == 0.0 };
        prop_assert!(ok, "lon variance {}", var);
    }

    #[test]
    fn temporal_features_in_range(t in -4_000_000_000i64..4_000_000_000, a in 0i64..200_000, b in 0i64..200_000) {
        prop_assert!(tod_slot(t) < TOD_SLOTS);
        prop_assert!(day_of_week(t) < DOW_SLOTS);
        prop_assert_eq!(day_of_week(t + 7 * 86_400), day_of_week(t));
        prop_assert_eq!(tod_slot(t + 86_400), tod_slot(t));
        if a <= b {
            prop_assert!(stay_bucket(a) <= stay_bucket(b));
        }
    }

    #[test]
    fn acc_at_k_is_monotone(seed in any::<u64>(), n in 1usize..25, samples in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ranked: Vec<Vec<usize>> = (0..samples)
            .map(|_| rank_candidates(&(0..n).map(|_| rng.gen_range(-1.0f64..1.0)).collect::<Vec<_>>()))
            .collect();
        let truths: Vec<usize> = (0..samples).map(|_| rng.gen_range(0..n)).collect();
        let accs: Vec<f64> = (1..=n).map(|k| acc_at_k(&ranked, &truths, k).unwrap()).collect();
        prop_assert!(accs.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(accs[n - 1], 1.0);
    }

    #[test]
    fn rank_candidates_breaks_ties_by_id(scores in prop::collection::vec(prop::sample::select(vec![0.0f64, 0.5, 1.0]), 1..20)) {
        let r = rank_candidates(&scores);
        for w in r.windows(2) {
            prop_assert!(scores[w[0]] > scores[w[1]] || (scores[w[0]] == scores[w[1]] && w[0] < w[1]));
        }
    }

    #[test]
    fn preprocess_windows_respect_limits(seed in any::<u64>(), len in 2usize..60, max_len in 5usize..12) {
        let raw = vec![traj_from(seed, len, 7)];
        let cfg = PreprocessConfig { window_days: 1, min_len: 3, max_len: Some(max_len), stride_hours: None };
        let out = preprocess(&raw, &cfg);
        let total: usize = out.iter().map(Trajectory::len).sum();
        prop_assert!(total <= len);
        for t in &out {
            prop_assert!((3..=max_len).contains(&t.len()));
            prop_assert!(t.steps.last().unwrap().time - t.steps[0].time < 86_400);
            prop_assert!(t.steps.windows(2).all(|w| w[0].time < w[1].time));
        }
    }

    #[test]
    fn city_and_trajectory_files_round_trip(seed in any::<u64>(), c in 1usize..5, n in 2usize..12) {
        let city = city_from(seed, c, n);
        let mut buf = Vec::new();
        write_city(&mut buf, &city).unwrap();
        prop_assert_eq!(read_city(&buf[..], "mem", 0).unwrap(), city);
        let trajs: Vec<Trajectory> = (0..3).map(|i| traj_from(seed ^ i, 2 + i as usize, n)).collect();
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &trajs).unwrap();
        prop_assert_eq!(read_trajectories(&buf[..], "mem").unwrap(), trajs);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn candidate_rows_follow_location_permutation(seed in any::<u64>(), n in 2usize..10) {
        let model = small_model(seed);
        let city = city_from(seed, 3, n);
        let feats = city.all_features();
        let base = model.geo().encode_candidates(&model.store, &feats).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
        let shuffled: Vec<_> = perm.iter().map(|&i| feats[i].clone()).collect();
        let out = model.geo().encode_candidates(&model.store, &shuffled).unwrap();
        for (row, &src) in perm.iter().enumerate() {
            prop_assert_eq!(out.row(row), base.row(src));
        }
    }

    #[test]
    fn batching_and_extra_padding_leave_logits_unchanged(seed in any::<u64>(), la in 2usize..6, lb in 2usize..11) {
        let model = small_model(seed);
        let city = city_from(seed, 3, 6);
        let a = traj_from(seed, la, 6);
        let b = traj_from(seed.wrapping_add(1), lb, 6);
        let alone = pad_batch(&city, &[&a], la).unwrap();
        let (solo, _) = model.logits(&alone, &city).unwrap();
        let both = pad_batch(&city, &[&b, &a], 10).unwrap();
        let (joint, _) = model.logits(&both, &city).unwrap();
        for p in 0..la {
            prop_assert_eq!(solo.row(p), joint.row(10 + p));
        }
    }
}
