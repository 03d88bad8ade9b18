use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::*;
use crate::data::SampleFlag;
use crate::tensor::Tensor;

fn normal(pid: i64, camid: i64) -> EvalItem {
    EvalItem {
        pid,
        camid,
        flag: SampleFlag::Normal,
    }
}

fn distractor(camid: i64) -> EvalItem {
    EvalItem {
        pid: -1,
        camid,
        flag: SampleFlag::Distractor,
    }
}

fn emb(rows: &[&[f64]]) -> Tensor {
    let d = rows[0].len();
    let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().cloned()).collect();
    Tensor::from_vec(data, &[rows.len(), d]).unwrap()
}

// ---------------------------------------------------------------------------
// cosine similarity

#[test]
fn cosine_examples() {
    let q = emb(&[&[1.0, 1.0]]);
    let g = emb(&[&[1.0, 1.0], &[1.0, -1.0], &[1.0, 0.0]]);
    let s = cosine_similarity_matrix(&q, &g).unwrap();
    assert_abs_diff_eq!(s.data()[0], 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(s.data()[1], 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(s.data()[2], 1.0 / 2.0f64.sqrt(), epsilon = 1e-9);
}

#[test]
fn cosine_rejects_zero_norm_rows() {
    let q = emb(&[&[0.0, 0.0]]);
    let g = emb(&[&[1.0, 0.0]]);
    match cosine_similarity_matrix(&q, &g) {
        Err(EvalError::DegenerateEmbedding { side: "query", row: 0 }) => {}
        other => panic!("expected degenerate-query error, got {other:?}"),
    }
}

// ---------------------------------------------------------------------------
// retrieve

#[test]
fn retrieve_prefers_exact_copy() {
    let g = emb(&[&[0.3, 0.7], &[1.0, 2.0], &[0.5, 0.5]]);
    assert_eq!(retrieve(&[1.0, 2.0], &g).unwrap(), 1);
}

#[test]
fn retrieve_single_item_gallery() {
    let g = emb(&[&[0.2, 0.4]]);
    assert_eq!(retrieve(&[9.0, 1.0], &g).unwrap(), 0);
}

#[test]
fn retrieve_hand_comparison() {
    let g = emb(&[&[0.0, 1.0], &[0.9, 0.1], &[1.0, 0.01]]);
    assert_eq!(retrieve(&[1.0, 0.0], &g).unwrap(), 2);
}

#[test]
fn retrieve_ties_break_to_lowest_index() {
    let g = emb(&[&[2.0, 0.0], &[1.0, 0.0]]);
    // both gallery rows are cosine-identical to the probe
    assert_eq!(retrieve(&[1.0, 0.0], &g).unwrap(), 0);
}

// ---------------------------------------------------------------------------
// average precision

#[test]
fn ap_modern_examples() {
    assert_abs_diff_eq!(ap_modern(&[true, true, false, false]).unwrap(), 1.0);
    assert_abs_diff_eq!(
        ap_modern(&[true, false, true, false]).unwrap(),
        (1.0 + 2.0 / 3.0) / 2.0,
        epsilon = 1e-12
    );
    // single relevant at rank k of n → 1/k
    for k in 1..=6usize {
        let mut order = vec![false; 6];
        order[k - 1] = true;
        assert_abs_diff_eq!(ap_modern(&order).unwrap(), 1.0 / k as f64, epsilon = 1e-12);
    }
    assert!(matches!(
        ap_modern(&[false, false]),
        Err(EvalError::NoRelevantItems)
    ));
}

#[test]
fn ap_legacy_examples() {
    assert_abs_diff_eq!(ap_legacy(&[true, true, false]).unwrap(), 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(
        ap_legacy(&[true, false, true, false]).unwrap(),
        0.9166666666666666,
        epsilon = 1e-12
    );
    assert_abs_diff_eq!(ap_legacy(&[true, false, false]).unwrap(), 1.0, epsilon = 1e-12);
}

#[test]
fn conventions_differ_by_the_expected_amount_on_the_example() {
    let order = [true, false, true, false, false];
    let modern = ap_modern(&order).unwrap();
    let legacy = ap_legacy(&order).unwrap();
    assert_abs_diff_eq!(legacy - modern, 0.083333, epsilon = 1e-6);
}

#[test]
fn both_conventions_hit_one_iff_relevants_are_top_contiguous() {
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    for _ in 0..200 {
        let n = rng.random_range(2..12usize);
        let rel = rng.random_range(1..=n);
        let mut order = vec![false; n];
        let mut placed = 0;
        while placed < rel {
            let pos = rng.random_range(0..n);
            if !order[pos] {
                order[pos] = true;
                placed += 1;
            }
        }
        let contiguous_top = order.iter().take(rel).all(|&b| b);
        let am = ap_modern(&order).unwrap();
        let al = ap_legacy(&order).unwrap();
        assert!(am <= 1.0 + 1e-12 && al <= 1.0 + 1e-12);
        assert!(am >= 0.0 && al >= 0.0);
        assert_eq!((am - 1.0).abs() < 1e-12, contiguous_top, "order {order:?}");
        assert_eq!((al - 1.0).abs() < 1e-12, contiguous_top, "order {order:?}");
    }
}

// ---------------------------------------------------------------------------
// evaluate

#[test]
fn exclusion_removes_same_pid_same_camera() {
    // gallery: same pid + same camera (nearest, excluded), same pid on
    // another camera (second), and a distractor
    let q = emb(&[&[1.0, 0.0]]);
    let qm = [normal(5, 1)];
    let g = emb(&[&[1.0, 0.0], &[0.9, 0.1], &[-1.0, 0.3]]);
    let gm = [normal(5, 1), normal(5, 2), distractor(3)];
    let result = evaluate(&q, &qm, &g, &gm).unwrap();
    assert_abs_diff_eq!(result.rank1(), 1.0);
    assert_abs_diff_eq!(result.map_modern, 1.0);
    assert_abs_diff_eq!(result.map_legacy, 1.0);
    assert_eq!(result.invalid_queries, 0);
}

#[test]
fn query_without_cross_camera_mates_is_invalid() {
    let q = emb(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let qm = [normal(5, 1), normal(6, 1)];
    // pid 5 only appears on camera 1 (excluded); pid 6 has a valid mate
    let g = emb(&[&[1.0, 0.1], &[0.1, 1.0]]);
    let gm = [normal(5, 1), normal(6, 2)];
    let result = evaluate(&q, &qm, &g, &gm).unwrap();
    assert_eq!(result.invalid_queries, 1);
    assert!(!result.per_query[0].valid);
    assert!(result.per_query[1].valid);

    // with only the invalid query the mean is undefined
    let q1 = emb(&[&[1.0, 0.0]]);
    assert!(matches!(
        evaluate(&q1, &qm[..1], &g, &gm),
        Err(EvalError::NoRelevantItems)
    ));
}

#[test]
fn identical_embedding_cross_camera_mate_scores_one() {
    let q = emb(&[&[0.6, 0.8]]);
    let qm = [normal(9, 1)];
    let g = emb(&[&[0.6, 0.8], &[0.9, -0.1], &[0.0, 1.0]]);
    let gm = [normal(9, 4), normal(3, 1), normal(4, 2)];
    let result = evaluate(&q, &qm, &g, &gm).unwrap();
    assert_abs_diff_eq!(result.cmc[0], 1.0);
    assert_abs_diff_eq!(result.per_query[0].ap_modern, 1.0);
    assert_abs_diff_eq!(result.per_query[0].ap_legacy, 1.0);
}

#[test]
fn junk_is_excluded_distractors_stay_as_negatives() {
    let q = emb(&[&[1.0, 0.0]]);
    let qm = [normal(5, 1)];
    // junk ranks first by similarity but must not count; the distractor
    // outranks the true mate and pushes it to rank 2
    let g = emb(&[&[1.0, 0.0], &[0.99, 0.01], &[0.7, 0.3]]);
    let gm = [
        EvalItem {
            pid: 0,
            camid: 2,
            flag: SampleFlag::Junk,
        },
        distractor(2),
        normal(5, 2),
    ];
    let result = evaluate(&q, &qm, &g, &gm).unwrap();
    assert_abs_diff_eq!(result.cmc[0], 0.0);
    assert_abs_diff_eq!(result.cmc[1], 1.0);
    assert_abs_diff_eq!(result.per_query[0].ap_modern, 0.5);
}

#[test]
fn cmc_is_non_decreasing_and_saturates() {
    let mut rng = ChaCha12Rng::seed_from_u64(6);
    let (m, g, d) = (6, 20, 8);
    let qdata: Vec<f64> = (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let gdata: Vec<f64> = (0..g * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let q = Tensor::from_vec(qdata, &[m, d]).unwrap();
    let ga = Tensor::from_vec(gdata, &[g, d]).unwrap();
    let qm: Vec<EvalItem> = (0..m).map(|i| normal(i as i64 + 1, 1)).collect();
    let gm: Vec<EvalItem> = (0..g).map(|j| normal((j % m) as i64 + 1, 2)).collect();
    let result = evaluate(&q, &qm, &ga, &gm).unwrap();
    for k in 1..result.cmc.len() {
        assert!(result.cmc[k] >= result.cmc[k - 1]);
    }
    // every query has relevants, so CMC reaches 1 by the gallery size
    assert_abs_diff_eq!(result.cmc[g - 1], 1.0);
}

#[test]
fn gallery_permutation_leaves_metrics_unchanged() {
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let (m, g, d) = (4, 12, 6);
    let q = Tensor::from_vec(
        (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        &[m, d],
    )
    .unwrap();
    let ga = Tensor::from_vec(
        (0..g * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        &[g, d],
    )
    .unwrap();
    let qm: Vec<EvalItem> = (0..m).map(|i| normal(i as i64 + 1, 1)).collect();
    let gm: Vec<EvalItem> = (0..g).map(|j| normal((j % m) as i64 + 1, 2 + (j % 2) as i64)).collect();

    let base = evaluate(&q, &qm, &ga, &gm).unwrap();

    let mut perm: Vec<usize> = (0..g).collect();
    use rand::seq::SliceRandom;
    perm.shuffle(&mut rng);
    let pdata: Vec<f64> = perm
        .iter()
        .flat_map(|&j| ga.data()[j * d..(j + 1) * d].to_vec())
        .collect();
    let pga = Tensor::from_vec(pdata, &[g, d]).unwrap();
    let pgm: Vec<EvalItem> = perm.iter().map(|&j| gm[j]).collect();
    let permuted = evaluate(&q, &qm, &pga, &pgm).unwrap();

    assert_abs_diff_eq!(base.map_modern, permuted.map_modern, epsilon = 1e-12);
    assert_abs_diff_eq!(base.map_legacy, permuted.map_legacy, epsilon = 1e-12);
    for (a, b) in base.cmc.iter().zip(&permuted.cmc) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
}

#[test]
fn retrieve_matches_evaluates_rank_one() {
    let mut rng = ChaCha12Rng::seed_from_u64(8);
    for _ in 0..50 {
        let (g, d) = (10, 5);
        let probe: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gdata: Vec<f64> = (0..g * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ga = Tensor::from_vec(gdata, &[g, d]).unwrap();
        let best = retrieve(&probe, &ga).unwrap();

        // evaluate with no exclusions: gallery all normal, different camera
        let q = Tensor::from_vec(probe.clone(), &[1, d]).unwrap();
        let qm = [normal(1, 1)];
        let gm: Vec<EvalItem> = (0..g).map(|j| normal(if j == best { 1 } else { 2 }, 2)).collect();
        let result = evaluate(&q, &qm, &ga, &gm).unwrap();
        assert_abs_diff_eq!(result.cmc[0], 1.0, epsilon = 1e-12);
    }
}

// ---------------------------------------------------------------------------
// dump + exports

#[test]
fn embedding_dump_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.bin");
    let items = vec![normal(3, 1), distractor(2)];
    let embs = emb(&[&[0.5, -1.5, 2.0], &[1.0, 0.25, -0.125]]);
    write_embedding_dump(&path, &items, &embs).unwrap();
    let (ritems, rembs) = read_embedding_dump(&path).unwrap();
    assert_eq!(ritems, items);
    assert_eq!(rembs.shape(), &[2, 3]);
    // values survive the f32 cast exactly for these representable numbers
    assert_eq!(rembs.data(), embs.data());
}

#[test]
fn csv_and_summary_exports() {
    let result = EvalResult {
        cmc: vec![0.5, 0.75, 1.0],
        map_modern: 0.8,
        map_legacy: 0.85,
        per_query: vec![],
        invalid_queries: 2,
    };
    let csv = cmc_csv(&result.cmc);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "k,cmc");
    assert_eq!(lines[1], "1,0.5");
    assert_eq!(lines.len(), 4);

    let summary: serde_json::Value = serde_json::from_str(&summary_json(&result)).unwrap();
    assert_eq!(summary["rank1"], 0.5);
    assert_eq!(summary["map_modern"], 0.8);
    assert_eq!(summary["map_legacy"], 0.85);
    assert_eq!(summary["invalid_queries"], 2);
}
