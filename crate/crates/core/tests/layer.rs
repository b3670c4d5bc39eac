use proptest::prelude::*;

use qna_core::oracle::{
    attention_weights_oracle, qna_unfold, qna_window_oracle, sasa_forward, sasa_unfold, SasaParams,
};
use qna_core::qna::{attention_heatmap, qna_backward, qna_forward, QnaConfig, QnaParams};
use qna_core::tensor::{read_tensor, read_tensor_any, write_tensor};
use qna_core::verify::{query_permutation, run_checks, score_shift, upsample_contract, CheckOptions, Grid};
use qna_core::{AllocationLedger, DType, QnaError, RngSeed, Tensor};

fn instance(cfg: &QnaConfig, h: usize, w: usize, seed: u64) -> (Tensor<f64>, QnaParams<f64>) {
    let x = Tensor::randn([h, w, cfg.dim_in], 1.0, &mut RngSeed(seed).rng()).unwrap();
    let p = QnaParams::random(cfg, 0.5, RngSeed(seed + 1)).unwrap();
    (x, p)
}

#[test]
fn small_grid_passes_in_both_dtypes() {
    for dtype in [DType::F64, DType::F32] {
        let opts = CheckOptions { grid: Grid::Small, dtype, ..CheckOptions::default() };
        let results = run_checks(&opts, |_| {}).unwrap();
        assert!(results.len() > 48);
        for r in &results {
            assert!(r.passed(), "{r}");
        }
    }
}

#[test]
fn injected_fault_is_reported() {
    let opts = CheckOptions { fault: Some(1e-3), ..CheckOptions::default() };
    let results = run_checks(&opts, |_| {}).unwrap();
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
    assert!(!failed.is_empty());
    assert!(failed.iter().all(|r| r.name.starts_with("oracle")));
}

#[test]
fn score_shift_and_query_order_do_not_matter() {
    let (exact, general) = score_shift(RngSeed(9)).unwrap();
    assert_eq!(exact, 0.0);
    assert!(general < 1e-12);
    assert!(query_permutation(RngSeed(9)).unwrap() < 1e-12);
}

#[test]
fn upsample_layout() {
    let (index, degenerate, oracle) = upsample_contract(RngSeed(5)).unwrap();
    assert_eq!((index, degenerate), (0.0, 0.0));
    assert!(oracle < 1e-10);
}

#[test]
fn unfold_baselines_agree_with_oracles() {
    let cfg = QnaConfig::new(4, 6).with_k(5).with_queries(2).with_heads(3).with_stride(2);
    let (x, p) = instance(&cfg, 9, 7, 20);
    let got = qna_unfold(&x, &cfg, &p, &mut AllocationLedger::new()).unwrap();
    assert!(got.max_abs_diff(&qna_window_oracle(&x, &cfg, &p).unwrap()).unwrap() < 1e-12);

    let sp = SasaParams::<f64>::random(4, 0.5, RngSeed(21)).unwrap();
    let a = sasa_unfold(&x, 3, &sp, &mut AllocationLedger::new()).unwrap();
    assert!(a.max_abs_diff(&sasa_forward(&x, 3, &sp).unwrap()).unwrap() < 1e-12);
}

#[test]
fn heatmap_collects_window_weights() {
    let cfg = QnaConfig::new(3, 4).with_k(3).with_queries(2).with_heads(2);
    let (x, p) = instance(&cfg, 5, 6, 30);
    let map = attention_heatmap(&x, &cfg, &p, 1, 0).unwrap();
    assert_eq!(map.shape(), &[5, 6]);
    // every window's weights sum to one
    assert!((map.sum() - 30.0).abs() < 1e-10);
    let mut want = vec![0.0; 30];
    for (_, _, taps) in attention_weights_oracle(&x, &cfg, &p, 1, 0).unwrap() {
        for (n, a) in taps {
            want[n] += a;
        }
    }
    let want = Tensor::new([5, 6], want).unwrap();
    assert!(map.max_abs_diff(&want).unwrap() < 1e-12);
    assert!(attention_heatmap(&x, &cfg, &p, 2, 0).is_err());
}

#[test]
fn mismatched_input_is_rejected() {
    let cfg = QnaConfig::new(3, 4);
    let p: QnaParams<f64> = QnaParams::random(&cfg, 0.5, RngSeed(1)).unwrap();
    let x = Tensor::<f64>::zeros([4, 4, 5]).unwrap();
    assert!(matches!(qna_forward(&x, &cfg, &p), Err(QnaError::ShapeMismatch { .. })));
    let x = Tensor::<f64>::zeros([4, 4, 3]).unwrap();
    let d = Tensor::<f64>::zeros([2, 2, 4]).unwrap();
    assert!(qna_backward(&x, &cfg, &p, &d).is_err());
}

#[test]
fn tensor_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.qnat");
    let t = Tensor::<f32>::randn([3, 2, 5], 1.0, &mut RngSeed(3).rng()).unwrap();
    write_tensor(&path, &t).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"QNAT");
    assert_eq!(bytes[4], 0);
    assert_eq!(bytes.len(), 8 + 3 * 4 + 30 * 4);
    assert!(read_tensor::<f32>(&path).unwrap().bit_eq(&t));
    assert_eq!(read_tensor_any(&path).unwrap().dtype(), DType::F32);
    assert!(read_tensor::<f64>(&path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn forward_matches_window_oracle(
        k in 1usize..=6,
        stride in 1usize..=3,
        heads in prop::sample::select(vec![1usize, 2, 3]),
        queries in 1usize..=3,
        h in 1usize..=9,
        w in 1usize..=9,
        seed in 0u64..1000,
    ) {
        let cfg = QnaConfig::new(3, 6).with_k(k).with_stride(stride).with_heads(heads).with_queries(queries);
        let (x, p) = instance(&cfg, h, w, seed);
        let got = qna_forward(&x, &cfg, &p).unwrap();
        let want = qna_window_oracle(&x, &cfg, &p).unwrap();
        prop_assert!(got.max_abs_diff(&want).unwrap() < 1e-10);
    }
}
