use proptest::prelude::*;
use stcorr_core::clusterer::{hierarchical_cluster, uniform_key_frames, ClusterModel, Metric};
use stcorr_core::metrics::hungarian_match;
use stcorr_core::numerics::{cosine_distance, row_entropy, sym_kl};
use stcorr_core::objective::weights_from_entropy;
use stcorr_core::*;

fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Matrix<f64> {
    Matrix::new(rows, cols, data).unwrap()
}

fn prob_rows(rows: usize, cols: usize) -> impl Strategy<Value = Matrix<f64>> {
    prop::collection::vec(0.0f64..1.0, rows * cols).prop_map(move |mut v| {
        for r in v.chunks_mut(cols) {
            let s: f64 = r.iter().sum::<f64>() + 1e-3;
            r.iter_mut().for_each(|x| *x = (*x + 1e-3 / cols as f64) / s);
        }
        matrix(rows, cols, v)
    })
}

fn volume(frames: usize, side: usize, max_label: u32) -> impl Strategy<Value = LabelVolume> {
    prop::collection::vec(0..=max_label, frames * side * side)
        .prop_map(move |l| LabelVolume::new(frames, side, side, l).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sym_kl_is_symmetric_and_nonnegative(m in prob_rows(2, 9)) {
        let (p, q) = (m.row(0), m.row(1));
        let a = sym_kl(p, q, 1e-8).unwrap();
        let b = sym_kl(q, p, 1e-8).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        prop_assert!(sym_kl(p, p, 1e-8).unwrap().abs() < 1e-15);
    }

    #[test]
    fn cosine_distance_bounds(u in prop::collection::vec(-5.0f64..5.0, 6), v in prop::collection::vec(-5.0f64..5.0, 6)) {
        prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
        let d = cosine_distance(&u, &v).unwrap();
        prop_assert!((0.0..=2.0).contains(&d));
        let scaled: Vec<f64> = u.iter().map(|x| 3.0 * x).collect();
        prop_assert!((cosine_distance(&scaled, &v).unwrap() - d).abs() < 1e-12);
    }

    #[test]
    fn entropy_weights_form_a_distribution(m in prob_rows(7, 5)) {
        let e = row_entropy(&m);
        prop_assert!(e.iter().all(|&x| (0.0..=5f64.ln() + 1e-12).contains(&x)));
        let w = weights_from_entropy(&e);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let shifted: Vec<f64> = e.iter().map(|x| x + 3.0).collect();
        for (a, b) in w.iter().zip(weights_from_entropy(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn clustering_partitions_rows(m in prob_rows(24, 6), tau in 0.01f64..2.0) {
        let c = hierarchical_cluster(&m, tau, Metric::SymKl).unwrap();
        let mut seen: Vec<usize> = c.members.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..24).collect::<Vec<_>>());
        prop_assert_eq!(c.centroids.rows(), c.members.len());
        for row in c.centroids.row_iter() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let model = ClusterModel::fit(&m, tau, Metric::SymKl).unwrap();
        let k = model.num_clusters() as u32;
        prop_assert!(model.assignments.iter().all(|&l| (1..=k).contains(&l)));
    }

    #[test]
    fn larger_threshold_never_adds_clusters_on_separated_data(jitter in prop::collection::vec(0.0f64..0.01, 4 * 12)) {
        // Four tight groups around distinct corners of the simplex.
        let rows = matrix(12, 4, (0..48).map(|i| {
            let (r, c) = (i / 4, i % 4);
            if c == r % 4 { 0.9 } else { 0.1 / 3.0 }
        }).zip(&jitter).map(|(v, j)| v + j).collect());
        let fine = hierarchical_cluster(&rows, 0.05, Metric::SymKl).unwrap().members.len();
        let coarse = hierarchical_cluster(&rows, 0.5, Metric::SymKl).unwrap().members.len();
        prop_assert_eq!(coarse, 4);
        prop_assert!(coarse <= fine);
    }

    #[test]
    fn fg_ari_ignores_label_names(gt in volume(2, 5, 3), pred in volume(2, 5, 4), shift in 1u32..50) {
        prop_assume!(gt.labels.iter().any(|&l| l > 0));
        let renamed = LabelVolume::new(2, 5, 5, pred.labels.iter().map(|l| l * 7 + shift).collect()).unwrap();
        let a = fg_ari(&pred, &gt).unwrap();
        let b = fg_ari(&renamed, &gt).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a <= 1.0 + 1e-12);
        prop_assert!((fg_ari(&gt, &gt).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hungarian_is_injective(rows in 1usize..6, cols in 1usize..6, seed in prop::collection::vec(0.0f64..1.0, 36)) {
        let scores = &seed[..rows * cols];
        let m = hungarian_match(scores, rows, cols).unwrap();
        prop_assert_eq!(m.pairs.len(), rows.min(cols));
        let mut r: Vec<usize> = m.pairs.iter().map(|p| p.0).collect();
        let mut c: Vec<usize> = m.pairs.iter().map(|p| p.1).collect();
        r.dedup();
        c.sort_unstable();
        c.dedup();
        prop_assert_eq!(r.len(), m.pairs.len());
        prop_assert_eq!(c.len(), m.pairs.len());
        let total: f64 = m.pairs.iter().map(|&(i, j)| scores[i * cols + j]).sum();
        prop_assert!((total - m.total).abs() < 1e-12);
    }

    #[test]
    fn key_frames_are_spread(frames in 1usize..200, ratio in 0.001f64..=1.0) {
        let keys = uniform_key_frames(frames, ratio).unwrap();
        prop_assert_eq!(keys.len(), ((ratio * frames as f64).ceil() as usize).clamp(1, frames));
        prop_assert!(keys.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(*keys.last().unwrap() < frames);
    }

    #[test]
    fn attention_rows_are_distributions(seed in 0u64..1000, frames in 1usize..4) {
        let p = CorrelatorParams::<f64>::init(CorrelatorConfig::new(8, 2, 4).unwrap(), seed).unwrap();
        let data = Matrix::from_fn(frames * 4, 8, |r, c| ((r * 31 + c * 17 + seed as usize) % 13) as f64 / 13.0 - 0.5);
        let clip = FeatureClip::new(frames, 2, 2, data, (0..frames).collect(), 1).unwrap();
        let (fused, att) = forward(&clip, &p).unwrap();
        prop_assert_eq!(fused.shape(), (frames * 4, 8));
        for row in att.probs.row_iter() {
            prop_assert!(row.iter().all(|&x| x >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn index_sets_stay_in_frame_and_disjoint(m in prob_rows(6, 6)) {
        // Two frames of three tokens each.
        let field = AttentionField { probs: m, query_frames: 2, key_frames: 2, tokens_per_frame: 3 };
        let sets = sample_index_sets(&field, 1, 2).unwrap();
        for i in 0..6 {
            let pos = sets.positives_of(i);
            let neg = sets.negatives_of(i);
            prop_assert_eq!(pos.len(), 2);
            prop_assert_eq!(neg.len(), 4);
            for f in 0..2 {
                prop_assert_eq!(pos[f] / 3, f);
                prop_assert!(neg[2 * f..2 * f + 2].iter().all(|&j| j / 3 == f));
                prop_assert!(!neg.contains(&pos[f]));
            }
        }
    }
}
