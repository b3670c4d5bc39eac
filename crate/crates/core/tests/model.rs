use qna_core::model::{
    build_model, count_flops, count_params, forward_inference, stage_grids, ArchConfig, Init, Model, QnaBackend,
    Variant,
};
use qna_core::{QnaError, RngSeed, Tensor};

fn image(res: usize, seed: u64) -> Tensor<f32> {
    Tensor::randn([res, res, 3], 1.0, &mut RngSeed(seed).rng()).unwrap()
}

#[test]
fn tiny_forward_is_finite() {
    let model: Model<f32> = build_model(Variant::Tiny, RngSeed(1)).unwrap();
    let logits = forward_inference(&model, &image(64, 2), QnaBackend::Efficient).unwrap();
    assert_eq!(logits.shape(), &[1000]);
    assert!(logits.data().iter().all(|v| v.is_finite()));
}

#[test]
fn zero_image_gives_zero_logits() {
    // conventional init has zero biases, so a zero image stays zero throughout
    let model: Model<f32> = build_model(Variant::Tiny, RngSeed(1)).unwrap();
    let zero = Tensor::<f32>::zeros([64, 64, 3]).unwrap();
    let logits = forward_inference(&model, &zero, QnaBackend::Efficient).unwrap();
    assert!(logits.data().iter().all(|&v| v.abs() < 1e-6));
}

#[test]
fn save_load_preserves_logits() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::<f32>::build(&ArchConfig::preset(Variant::Tiny), Init::Gaussian(0.05), RngSeed(4)).unwrap();
    model.save(dir.path()).unwrap();
    let back = Model::<f32>::load(dir.path()).unwrap();
    assert_eq!(back, model);
    let x = image(64, 5);
    let a = forward_inference(&model, &x, QnaBackend::Efficient).unwrap();
    let b = forward_inference(&back, &x, QnaBackend::Efficient).unwrap();
    assert!(a.bit_eq(&b));
}

#[test]
fn resolution_must_divide() {
    let model: Model<f32> = build_model(Variant::Tiny, RngSeed(1)).unwrap();
    assert!(matches!(count_flops(&model, 100), Err(QnaError::InvalidArgument { .. })));
    assert!(forward_inference(&model, &image(48, 1), QnaBackend::Efficient).is_err());
    assert_eq!(stage_grids(&model.arch, 224, 224).unwrap(), vec![(56, 56), (28, 28), (14, 14), (7, 7)]);
}

#[test]
fn costs_scale_with_variant_and_resolution() {
    let reports: Vec<_> = Variant::ALL
        .iter()
        .map(|&v| {
            let m: Model<f32> = build_model(v, RngSeed(1)).unwrap();
            (count_params(&m).unwrap().params, count_flops(&m, 224).unwrap().flops)
        })
        .collect();
    assert!(reports.windows(2).all(|p| p[0].0 < p[1].0 && p[0].1 < p[1].1));
    let tiny: Model<f32> = build_model(Variant::Tiny, RngSeed(1)).unwrap();
    assert!(count_flops(&tiny, 448).unwrap().flops > 3 * count_flops(&tiny, 224).unwrap().flops);
}

#[test]
fn random_inputs_give_finite_logits() {
    let model = Model::<f32>::build(&ArchConfig::preset(Variant::Tiny), Init::Gaussian(0.05), RngSeed(8)).unwrap();
    for n in 0..100 {
        let logits = forward_inference(&model, &image(32, 100 + n), QnaBackend::Efficient).unwrap();
        assert_eq!(logits.shape(), &[1000]);
        assert!(logits.data().iter().all(|v| v.is_finite()), "input {n}");
    }
}
