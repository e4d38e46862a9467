use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dcvae_core::episodic::{
    apply_absence, ci95, class_prototype, knn_classify, sample_episode, AbsenceConfig, AbsenceMode, EpisodeConfig,
    FeatureBank, Label, Split, SupportRecord,
};
use dcvae_core::model::{self, DcvaeParams, ModelDims};
use dcvae_core::training::partition_subbatches;
use dcvae_core::Matrix;

fn bank(classes: usize, per_class: usize, seed: u64) -> FeatureBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut feats = Vec::new();
    let mut sems = Vec::new();
    for c in 0..classes {
        for _ in 0..per_class {
            feats.push((format!("c{c:02}"), (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()));
        }
        sems.push((format!("c{c:02}"), vec![c as f64, 1.0]));
    }
    FeatureBank::from_named(Split::Test, feats, sems).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn episode_cardinalities(n in 1usize..6, k in 1usize..4, q in 1usize..5, seed: u64) {
        let b = bank(7, 8, 1);
        let cfg = EpisodeConfig::new(n, k, q);
        let ep = sample_episode(&b, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(ep.classes.len(), n);
        prop_assert_eq!(ep.classes.iter().collect::<BTreeSet<_>>().len(), n);
        prop_assert_eq!(ep.support.len(), n * k);
        prop_assert_eq!(ep.query.len(), n * q);
        for &c in &ep.classes {
            prop_assert_eq!(ep.support.iter().filter(|r| r.label == c).count(), k);
            prop_assert_eq!(ep.query.iter().filter(|r| r.label == c).count(), q);
        }
        let s: BTreeSet<usize> = ep.support_rows.iter().copied().collect();
        prop_assert!(ep.query_rows.iter().all(|r| !s.contains(r)));
        let again = sample_episode(&b, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(ep, again);
    }

    #[test]
    fn absence_counts_and_coverage(n in 1usize..6, k in 1usize..5, es in 0.0f64..=1.0, frac in 0.0f64..=1.0, cross: bool, seed: u64) {
        let ev = (1.0 - es) * frac;
        let b = bank(6, 10, 2);
        let ep = sample_episode(&b, EpisodeConfig::new(n, k, 2), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mode = if cross { AbsenceMode::CrossModal } else { AbsenceMode::Random };
        let cfg = AbsenceConfig { eta_s: es, eta_v: ev, mode };
        let Ok(masked) = apply_absence(&ep, &cfg, &mut ChaCha8Rng::seed_from_u64(seed ^ 1)) else {
            // only cross-modal layouts can be infeasible
            prop_assert!(cross);
            return Ok(());
        };
        let (want_s, want_v) = cfg.counts(n * k);
        prop_assert_eq!(want_s, ((es * (n * k) as f64) + 1e-9).floor() as usize);
        prop_assert_eq!(masked.support.iter().filter(|r| r.semantic.is_none()).count(), want_s);
        prop_assert_eq!(masked.support.iter().filter(|r| r.feature.is_none()).count(), want_v);
        prop_assert!(masked.support.iter().all(|r| r.feature.is_some() || r.semantic.is_some()));
        prop_assert_eq!(&masked.query, &ep.query);
        if cross {
            let lost_s: BTreeSet<Label> = masked.support.iter().filter(|r| r.semantic.is_none()).map(|r| r.label).collect();
            let lost_v: BTreeSet<Label> = masked.support.iter().filter(|r| r.feature.is_none()).map(|r| r.label).collect();
            prop_assert!(lost_s.is_disjoint(&lost_v));
        }
    }

    #[test]
    fn knn_ignores_support_order(points in prop::collection::vec((prop::collection::vec(-3i32..=3, 3), 0u32..4), 1..15),
                                 q in prop::collection::vec(-3i32..=3, 3), k in 1usize..8, seed: u64) {
        let rows: Vec<Vec<f64>> = points.iter().map(|(p, _)| p.iter().map(|&v| v as f64).collect()).collect();
        let labels: Vec<Label> = points.iter().map(|(_, l)| Label(*l)).collect();
        let q: Vec<f64> = q.iter().map(|&v| v as f64).collect();
        let base = knn_classify(&Matrix::from_rows(&rows).unwrap(), &labels, &q, k).unwrap();

        let mut order: Vec<usize> = (0..rows.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let r2: Vec<Vec<f64>> = order.iter().map(|&i| rows[i].clone()).collect();
        let l2: Vec<Label> = order.iter().map(|&i| labels[i]).collect();
        prop_assert_eq!(knn_classify(&Matrix::from_rows(&r2).unwrap(), &l2, &q, k).unwrap(), base);

        // a point far beyond every neighbour changes nothing while k <= n
        if k <= rows.len() {
            let mut r3 = rows.clone();
            r3.push(vec![1e6; 3]);
            let mut l3 = labels.clone();
            l3.push(Label(99));
            prop_assert_eq!(knn_classify(&Matrix::from_rows(&r3).unwrap(), &l3, &q, k).unwrap(), base);
        }
    }

    #[test]
    fn partition_is_exact(masks in prop::collection::vec(0u8..3, 0..20)) {
        let records: Vec<SupportRecord> = masks
            .iter()
            .map(|m| SupportRecord {
                label: Label(0),
                feature: (*m != 2).then(|| vec![0.0]),
                semantic: (*m != 1).then(|| vec![0.0]),
            })
            .collect();
        let plan = partition_subbatches(&records).unwrap();
        let mut all: Vec<usize> = plan.full.iter().chain(&plan.semantic_absent).chain(&plan.visual_absent).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..records.len()).collect::<Vec<_>>());
        prop_assert!(plan.full.iter().all(|&i| masks[i] == 0));
        prop_assert!(plan.semantic_absent.iter().all(|&i| masks[i] == 1));
        prop_assert!(plan.visual_absent.iter().all(|&i| masks[i] == 2));
    }

    #[test]
    fn mix_stays_in_envelope(seed: u64, scale in 0.1f64..100.0, rows in 1usize..5) {
        let dims = ModelDims::compact(6, 3, 4, 5);
        let p = DcvaeParams::init_seeded(dims, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = |c: usize| Matrix::new(rows, c, (0..rows * c).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (s, xs, xv) = (m(3), m(6), m(6));
        let (x_hat, eta) = model::mix(&p, &s, &xs, &xv).unwrap();
        prop_assert!(eta.data().iter().all(|&e| e > 0.0 && e < 1.0));
        for ((&h, &a), &b) in x_hat.data().iter().zip(xs.data()).zip(xv.data()) {
            prop_assert!(h >= a.min(b) && h <= a.max(b));
        }
    }

    #[test]
    fn prototype_is_naive_mean(rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 1..9)) {
        let p = class_prototype(&rows).unwrap();
        for j in 0..4 {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64;
            prop_assert!((p[j] - mean).abs() <= 1e-12);
        }
    }

    #[test]
    fn ci95_matches_definition(acc in prop::collection::vec(0.0f64..=100.0, 1..50)) {
        let (mean, half) = ci95(&acc);
        let n = acc.len() as f64;
        let m = acc.iter().sum::<f64>() / n;
        let sd = (acc.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!((mean - m).abs() < 1e-9);
        prop_assert!((half - 1.96 * sd / n.sqrt()).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&mean));
    }
}

#[test]
fn standard_episode_layout() {
    // 5-way 1-shot with 15 queries per class: 5 support records, 75 queries
    let b = bank(8, 20, 3);
    let ep = sample_episode(&b, EpisodeConfig::new(5, 1, 15), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(ep.support.len(), 5);
    assert_eq!(ep.query.len(), 75);
    let per_class: BTreeMap<Label, usize> = ep.query.iter().fold(BTreeMap::new(), |mut m, q| {
        *m.entry(q.label).or_default() += 1;
        m
    });
    assert!(per_class.values().all(|&c| c == 15));
}
