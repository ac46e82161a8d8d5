//! Property tests over randomized inputs for the crate's core invariants.

use glamor_core::io::{read_tensor, write_tensor};
use glamor_core::losses::{batch_hard_mine, pairwise_distances};
use glamor_core::norms::l2_normalize;
use glamor_core::reid::{rank, EmbeddingSet, Protocol};
use glamor_core::tensor::{sigmoid, Matrix, Tensor4};
use proptest::collection::vec;
use proptest::prelude::*;

proptest! {
    #[test]
    fn tensor_file_round_trips_any_finite_values(
        n in 1usize..3,
        c in 1usize..4,
        h in 1usize..5,
        w in 1usize..5,
        seed in any::<u64>(),
    ) {
        let mut rng = glamor_core::rng::SplitMix64::new(seed);
        let data: Vec<f64> = (0..n * c * h * w)
            .map(|_| rng.normal() * 10f64.powi((rng.below(40) as i32) - 20))
            .collect();
        let t = Tensor4::from_vec(n, c, h, w, data).unwrap();
        let text = write_tensor(&t);
        let back = read_tensor(&text).unwrap();
        prop_assert_eq!(&back, &t);
        prop_assert_eq!(write_tensor(&back), text);
    }

    #[test]
    fn sigmoid_output_strictly_inside_unit_interval(values in vec(-1e6f64..1e6, 1..32)) {
        let t = Tensor4::from_vec(1, 1, 1, values.len(), values).unwrap();
        for v in sigmoid(&t).data() {
            prop_assert!(*v > 0.0 && *v < 1.0);
        }
    }

    #[test]
    fn l2_normalize_is_scale_invariant(
        values in vec(-100f64..100.0, 2..16),
        k in 0.001f64..1000.0,
    ) {
        let norm: f64 = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(norm > 1e-6);
        let scaled: Vec<f64> = values.iter().map(|v| v * k).collect();
        let a = l2_normalize(&values).unwrap();
        let b = l2_normalize(&scaled).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn pairwise_distances_symmetric_zero_diagonal(seed in any::<u64>(), rows in 2usize..12) {
        let mut rng = glamor_core::rng::SplitMix64::new(seed);
        let emb = Matrix::random(rows, 4, &mut rng);
        let d = pairwise_distances(&emb).unwrap();
        for i in 0..rows {
            prop_assert_eq!(d.get(i, i), 0.0);
            for j in 0..rows {
                prop_assert_eq!(d.get(i, j), d.get(j, i));
                prop_assert!(d.get(i, j) >= 0.0);
            }
        }
    }

    #[test]
    fn mined_triplets_satisfy_identity_constraints(seed in any::<u64>(), p in 2usize..5, k in 2usize..5) {
        let mut rng = glamor_core::rng::SplitMix64::new(seed);
        let rows = p * k;
        let emb = Matrix::random(rows, 3, &mut rng);
        let ids: Vec<i64> = (0..rows).map(|i| (i / k) as i64).collect();
        let mined = batch_hard_mine(&emb, &ids).unwrap();
        prop_assert_eq!(mined.triplets.len(), rows);
        for t in &mined.triplets {
            prop_assert_eq!(ids[t.hardest_positive], ids[t.anchor]);
            prop_assert_ne!(t.hardest_positive, t.anchor);
            prop_assert_ne!(ids[t.hardest_negative], ids[t.anchor]);
            prop_assert!(t.d_ap >= 0.0 && t.d_an >= 0.0);
        }
    }

    #[test]
    fn cmc_curves_are_monotone_in_unit_range(seed in any::<u64>(), nq in 2usize..8, ng in 8usize..24) {
        let mut rng = glamor_core::rng::SplitMix64::new(seed);
        let make = |count: usize, prefix: &str, rng: &mut glamor_core::rng::SplitMix64| {
            let vectors = Matrix::random(count, 3, rng);
            let ids: Vec<String> = (0..count).map(|_| format!("id{}", rng.below(4))).collect();
            let cams: Vec<String> = (0..count).map(|_| format!("c{}", rng.below(2))).collect();
            EmbeddingSet::new(
                vectors,
                (0..count).map(|i| format!("{prefix}{i}")).collect(),
                ids,
                cams,
            )
            .unwrap()
        };
        let query = make(nq, "q", &mut rng);
        let gallery = make(ng, "g", &mut rng);
        for protocol in [Protocol::Plain, Protocol::Veri] {
            let report = rank(&query, &gallery, protocol).unwrap();
            prop_assert!(report.map <= 1.0 + 1e-12);
            for k in 1..report.cmc.len() {
                prop_assert!(report.cmc[k] + 1e-15 >= report.cmc[k - 1]);
                prop_assert!((0.0..=1.0).contains(&report.cmc[k]));
            }
            prop_assert_eq!(report.rank1(), report.cmc[1]);
        }
    }
}
