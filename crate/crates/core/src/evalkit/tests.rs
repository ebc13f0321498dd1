use ndarray::array;
use proptest::prelude::*;

use super::*;
use crate::pipeline::{StagePlan, TrainConfig};
use crate::synthdata::{build_dataset, DataConfig};

fn meta(pid: usize, camera_id: usize) -> SampleMeta {
    SampleMeta {
        pid,
        camera_id,
        domain_id: 0,
    }
}

fn single(relevant: Vec<bool>) -> RankingResult {
    RankingResult {
        queries: vec![QueryRanking {
            query: 0,
            order: (0..relevant.len()).collect(),
            relevant,
        }],
        dropped: vec![],
    }
}

#[test]
fn hand_computed_average_precision() {
    let r = single(vec![true, false, true]);
    assert!((compute_map(&r).unwrap() - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-15);
    assert_eq!(compute_map(&single(vec![true, true, false, false])).unwrap(), 1.0);
    for rank in 1..8 {
        let mut rel = vec![false; 8];
        rel[rank - 1] = true;
        assert!((compute_map(&single(rel)).unwrap() - 1.0 / rank as f64).abs() < 1e-15);
    }
}

#[test]
fn cmc_counts_first_hits() {
    let r = single(vec![false, false, true, false, false, false]);
    assert_eq!(compute_cmc(&r, &DEFAULT_KS).unwrap(), vec![0.0, 1.0, 1.0]);
    let all = single(vec![true, false]);
    assert_eq!(compute_cmc(&all, &DEFAULT_KS).unwrap(), vec![1.0, 1.0, 1.0]);
}

#[test]
fn empty_rankings_are_errors() {
    let empty = RankingResult::default();
    assert!(matches!(compute_map(&empty), Err(EvalError::NoValidQueries)));
    assert!(compute_cmc(&empty, &DEFAULT_KS).is_err());
    assert!(matches!(oracle_ap(&[0.5, 0.1], &[false, false]), Err(EvalError::NoRelevant)));
    assert_eq!(oracle_ap(&[0.3], &[true]).unwrap(), 1.0);
}

#[test]
fn oracle_matches_shared_cases() {
    // Scores chosen so the sorted order reproduces the hand cases above.
    let cases: [(&[f64], &[bool], f64); 3] = [
        (&[0.9, 0.5, 0.1], &[true, false, true], 0.5 * (1.0 + 2.0 / 3.0)),
        (&[0.2, 0.8, 0.4], &[false, true, true], 1.0),
        (&[0.7, 0.7, 0.1], &[false, true, false], 0.5),
    ];
    for (scores, rel, expected) in cases {
        assert!((oracle_ap(scores, rel).unwrap() - expected).abs() < 1e-15);
    }
}

#[test]
fn ties_rank_lower_gallery_index_first() {
    let q = array![[1.0, 0.0]];
    let g = array![[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]];
    let r = rank(&q, &g, &[meta(7, 0)], &[meta(1, 1), meta(2, 1), meta(7, 1)]).unwrap();
    assert_eq!(r.queries[0].order, vec![1, 2, 0]);
    assert_eq!(r.queries[0].relevant, vec![false, true, false]);
}

#[test]
fn same_identity_same_camera_entries_are_excluded() {
    let q = array![[1.0, 0.0]];
    let g = array![[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]];
    let r = rank(&q, &g, &[meta(3, 0)], &[meta(3, 0), meta(3, 1), meta(4, 0)]).unwrap();
    assert_eq!(r.queries[0].order, vec![1, 2]);
    let with_extra = rank(
        &q,
        &array![[1.0, 0.0], [0.6, 0.8], [0.0, 1.0], [0.99, 0.1]],
        &[meta(3, 0)],
        &[meta(3, 0), meta(3, 1), meta(4, 0), meta(3, 0)],
    )
    .unwrap();
    assert_eq!(compute_map(&r).unwrap(), compute_map(&with_extra).unwrap());
    assert_eq!(
        compute_cmc(&r, &DEFAULT_KS).unwrap(),
        compute_cmc(&with_extra, &DEFAULT_KS).unwrap()
    );
}

#[test]
fn duplicate_under_another_camera_is_a_rank1_hit() {
    let q = array![[0.6, 0.8], [0.8, -0.6]];
    let g = array![[0.0, 1.0], [0.6, 0.8], [1.0, 0.0], [0.8, -0.6]];
    let gm = [meta(9, 0), meta(1, 1), meta(8, 0), meta(2, 1)];
    let r = rank(&q, &g, &[meta(1, 0), meta(2, 0)], &gm).unwrap();
    assert_eq!(compute_cmc(&r, &[1]).unwrap(), vec![1.0]);
}

#[test]
fn queries_without_relevant_entries_are_dropped() {
    let q = array![[1.0, 0.0], [0.0, 1.0]];
    let g = array![[1.0, 0.0], [0.0, 1.0]];
    let r = rank(&q, &g, &[meta(1, 0), meta(5, 0)], &[meta(1, 1), meta(5, 0)]).unwrap();
    assert_eq!(r.queries.len(), 1);
    assert_eq!(r.dropped, vec![1]);
    assert!(rank(&q, &g, &[meta(1, 0)], &[meta(1, 1), meta(5, 0)]).is_err());
}

#[test]
fn feature_dump_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let f = array![[0.25, -1.5], [3.0, 1e-300]];
    let m = vec![meta(1, 0), meta(2, 3)];
    let (bin, side) = (dir.path().join("f.bin"), dir.path().join("f.json"));
    write_feature_dump(&f, &m, &bin, &side).unwrap();
    let (f2, m2) = read_feature_dump(&bin, &side).unwrap();
    assert_eq!(f, f2);
    assert_eq!(m, m2);
    assert!(write_feature_dump(&f, &m[..1], &bin, &side).is_err());
}

fn toy_family() -> DataConfig {
    DataConfig {
        num_domains: 2,
        source_domains: vec![0],
        held_out_domain: 1,
        pids_per_domain: 4,
        images_per_pid: 4,
        test_pids: 3,
        test_images_per_pid: 4,
        ..Default::default()
    }
}

fn toy_train() -> TrainConfig {
    TrainConfig {
        plan: StagePlan {
            initial_epochs: 1,
            id_token_epochs: 1,
            domain_token_epochs: 1,
            finetune_epochs: 1,
        },
        p: 2,
        k: 2,
        ..Default::default()
    }
}

#[test]
fn extracted_features_are_unit_norm_and_stable() {
    let data = build_dataset(&toy_family()).unwrap();
    let model = crate::pipeline::TrainedModel::init(&toy_train(), &data).unwrap();
    let samples = vec![data.query[0].clone(), data.query[0].clone(), data.query[1].clone()];
    let f = extract_features(&model, &samples).unwrap();
    assert_eq!(f.row(0), f.row(1));
    for row in f.rows() {
        assert!((row.dot(&row) - 1.0).abs() < 1e-6);
    }
    assert_eq!(extract_features(&model, &[]).unwrap().dim(), (0, 32));
    let report = evaluate(&model, &data.query, &data.gallery).unwrap();
    assert_eq!(report.stages, "untrained");
    assert!((0.0..=1.0).contains(&report.map));
}

#[test]
fn two_domain_protocols_run_end_to_end() {
    let family = toy_family();
    let cfg = toy_train();
    let p1 = run_protocol(&cfg, &family, Protocol::P1).unwrap();
    assert_eq!(p1.runs.len(), 1);
    assert_eq!(p1.average_map, p1.runs[0].report.map);
    let p2 = run_protocol(&cfg, &family, Protocol::P2).unwrap();
    let p3 = run_protocol(&cfg, &family, Protocol::P3).unwrap();
    assert_eq!(p2.runs.len(), 2);
    for (a, b) in p2.runs.iter().zip(&p3.runs) {
        assert!(b.train_images > a.train_images);
    }
    let mean = p2.runs.iter().map(|r| r.report.map).sum::<f64>() / 2.0;
    assert!((p2.average_map - mean).abs() < 1e-15);
    for r in p1.runs.iter().chain(&p2.runs).chain(&p3.runs) {
        assert!(r.report.cmc.windows(2).all(|w| w[0] <= w[1]));
        assert!((0.0..=1.0).contains(&r.report.map));
    }
    let one = DataConfig {
        num_domains: 1,
        ..family
    };
    assert!(matches!(
        run_protocol(&cfg, &one, Protocol::P2),
        Err(EvalError::TooFewDomains(1))
    ));
}

proptest! {
    #[test]
    fn ranking_is_invariant_to_monotone_transforms(
        sims in proptest::collection::vec(-1.0f64..1.0, 2..15),
        pids in proptest::collection::vec(0usize..3, 15),
        shift in -2.0f64..2.0,
        gain in 0.1f64..5.0,
    ) {
        let n = sims.len();
        let q = array![[1.0]];
        let g = Mat::from_shape_vec((n, 1), sims.clone()).unwrap();
        let g2 = Mat::from_shape_vec((n, 1), sims.iter().map(|s| (gain * s + shift).exp()).collect()).unwrap();
        let gm: Vec<SampleMeta> = (0..n).map(|i| meta(pids[i], 1)).collect();
        let a = rank(&q, &g, &[meta(0, 0)], &gm).unwrap();
        let b = rank(&q, &g2, &[meta(0, 0)], &gm).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn map_agrees_with_oracle(
        scores in proptest::collection::vec(prop_oneof![Just(0.5f64), -1.0f64..1.0], 1..20),
        seed in any::<u64>(),
    ) {
        let n = scores.len();
        let rel: Vec<bool> = (0..n).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
        prop_assume!(rel.iter().any(|&r| r));
        let q = array![[1.0]];
        let g = Mat::from_shape_vec((n, 1), scores.clone()).unwrap();
        let gm: Vec<SampleMeta> = rel.iter().map(|&r| meta(if r { 0 } else { 1 }, 1)).collect();
        let r = rank(&q, &g, &[meta(0, 0)], &gm).unwrap();
        let map = compute_map(&r).unwrap();
        prop_assert!((map - oracle_ap(&scores, &rel).unwrap()).abs() < 1e-12);
        let cmc = compute_cmc(&r, &DEFAULT_KS).unwrap();
        prop_assert!(cmc.windows(2).all(|w| w[0] <= w[1]));
    }
}
