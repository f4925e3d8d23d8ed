use dynexec::channel::{random_mask, ChannelMask};
use dynexec::nn::checkpoint::{self, Precision};
use dynexec::nn::{desk_descriptor, tiny_descriptor, Mode, Model};
use dynexec::surgeon::{count_params, extract_compact, masked_cost, FlopConvention};
use dynexec::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A few SGD-free train-mode passes so running BN statistics are not trivial.
fn warmed(model: &mut Model, rng: &mut ChaCha8Rng) {
    let shape = model.descriptor().input_shape;
    for _ in 0..3 {
        let x = Tensor::randn(vec![4, shape[0], shape[1], shape[2]], 1.0, rng);
        let mask = model.all_active();
        model.forward(&x, &mask, Mode::Train).unwrap();
    }
}

#[test]
fn compact_model_reproduces_masked_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = Model::build(&tiny_descriptor([1, 12, 12], 10), 1).unwrap();
    warmed(&mut model, &mut rng);
    let x = Tensor::randn(vec![3, 1, 12, 12], 1.0, &mut rng);
    for i in 0..100 {
        let p = [0.2, 0.4, 0.6, 0.9][i % 4];
        let mask = random_mask(model.registry(), p, 1, &mut rng).unwrap().mask;
        let (compact, plan) = extract_compact(&model, &mask).unwrap();
        assert_eq!(plan.widths(), mask.active_per_layer());
        let want = model.predict(&x, &mask).unwrap();
        let got = compact.predict(&x, &compact.all_active()).unwrap();
        assert!(want.max_abs_diff(&got) < 1e-9, "mask {i}: {}", want.max_abs_diff(&got));
        let cost = masked_cost(model.descriptor(), &mask, FlopConvention::MacsOnly).unwrap();
        assert_eq!(cost.params(), count_params(compact.descriptor()).unwrap());
    }
}

#[test]
fn checkpoint_roundtrip_keeps_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut model = Model::build(&desk_descriptor([1, 28, 28], 10), 2).unwrap();
    warmed(&mut model, &mut rng);
    let mask = random_mask(model.registry(), 0.5, 1, &mut rng).unwrap().mask;
    let x = Tensor::randn(vec![2, 1, 28, 28], 1.0, &mut rng);
    let want = model.predict(&x, &mask).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &model, Some(&mask), Precision::F64).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.mask.as_ref(), Some(&mask));
    assert_eq!(back.model.predict(&x, &mask).unwrap().max_abs_diff(&want), 0.0);

    checkpoint::save(&path, &model, None, Precision::F32).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert!(back.mask.is_none());
    assert!(back.model.predict(&x, &mask).unwrap().max_abs_diff(&want) < 1e-3);
}

#[test]
fn all_active_mask_extracts_an_identical_network() {
    let model = Model::build(&desk_descriptor([1, 28, 28], 10), 3).unwrap();
    let mask: ChannelMask = model.all_active();
    let (compact, _) = extract_compact(&model, &mask).unwrap();
    assert_eq!(compact.descriptor(), model.descriptor());
    for role in model.param_roles() {
        assert_eq!(compact.param(role), model.param(role));
    }
}
