use dynexec::channel::ChannelId;
use dynexec::nn::{tiny_descriptor, Mode, Model};
use dynexec::saliency::{
    eval_taylor_saliencies, gated_loss, inner_products, normalize_saliencies, oracle_saliencies, oracle_saliency,
    raw_saliencies, spearman,
};
use dynexec::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup(seed: u64) -> (Model, Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::build(&tiny_descriptor([1, 8, 8], 4), seed).unwrap();
    let all = model.all_active();
    for _ in 0..2 {
        let x = Tensor::randn(vec![8, 1, 8, 8], 1.0, &mut rng);
        model.forward(&x, &all, Mode::Train).unwrap();
    }
    let x = Tensor::randn(vec![6, 1, 8, 8], 1.0, &mut rng);
    let y = (0..6).map(|_| rng.random_range(0..4)).collect();
    (model, x, y)
}

#[test]
fn channel_without_downstream_influence_scores_zero() {
    let (mut model, x, y) = setup(1);
    let next = &mut model.conv_units_mut()[1].weight;
    let (o, i) = (next.shape()[0], next.shape()[1]);
    for oc in 0..o {
        for j in 0..9 {
            next.data_mut()[(oc * i + 3) * 9 + j] = 0.0;
        }
    }
    let mask = model.all_active();
    let id = ChannelId::new(0, 3);
    assert_eq!(oracle_saliency(&model, &x, &y, &mask, id).unwrap(), 0.0);
    assert_eq!(eval_taylor_saliencies(&model, &x, &y, &mask).unwrap().averaged[&id], 0.0);
}

#[test]
fn duplicate_channels_score_equally() {
    let (mut model, x, y) = setup(2);
    {
        let units = model.conv_units_mut();
        let u = &mut units[0];
        let per = u.weight.numel() / u.out_channels();
        let src = u.weight.data()[0..per].to_vec();
        u.weight.data_mut()[per..2 * per].copy_from_slice(&src);
        let g = u.gamma.data()[0];
        u.gamma.data_mut()[1] = g;
        let b = u.beta.data()[0];
        u.beta.data_mut()[1] = b;
        u.running_mean[1] = u.running_mean[0];
        u.running_var[1] = u.running_var[0];
        let next = &mut units[1].weight;
        let (o, i) = (next.shape()[0], next.shape()[1]);
        for oc in 0..o {
            for j in 0..9 {
                let v = next.data()[(oc * i) * 9 + j];
                next.data_mut()[(oc * i + 1) * 9 + j] = v;
            }
        }
    }
    let mask = model.all_active();
    let a = oracle_saliency(&model, &x, &y, &mask, ChannelId::new(0, 0)).unwrap();
    let b = oracle_saliency(&model, &x, &y, &mask, ChannelId::new(0, 1)).unwrap();
    assert!(a > 0.0);
    assert!((a - b).abs() < 1e-6, "{a} vs {b}");
}

#[test]
fn oracle_batch_form_matches_single_channel_form() {
    let (model, x, y) = setup(3);
    let mask = model.all_active();
    let all = oracle_saliencies(&model, &x, &y, &mask).unwrap();
    assert_eq!(all.len(), 24);
    for (id, v) in all.iter().step_by(5) {
        assert_eq!(*v, oracle_saliency(&model, &x, &y, &mask, *id).unwrap());
    }
    let off = dynexec::channel::ChannelMask::from_bits(model.registry(), {
        let mut b = vec![true; 24];
        b[0] = false;
        b
    })
    .unwrap();
    assert!(oracle_saliency(&model, &x, &y, &off, ChannelId::new(0, 0)).is_err());
}

#[test]
fn gated_loss_delta_converges_to_inner_product() {
    let (model, x, y) = setup(4);
    let mask = model.all_active();
    let mut pass = model.forward_pass(&x, &mask.gates(), Mode::Eval, true).unwrap();
    let loss = pass.graph.softmax_cross_entropy(pass.logits, &y).unwrap();
    pass.graph.backward(loss).unwrap();
    let inner = inner_products(&pass, &mask).unwrap();
    let base = gated_loss(&model, &x, &y, &mask.gates(), Mode::Eval).unwrap();
    for id in [ChannelId::new(0, 2), ChannelId::new(1, 5), ChannelId::new(1, 11)] {
        let residual = |eps: f64| {
            let mut g = mask.gates();
            g[id.layer][id.index] = 1.0 - eps;
            let l = gated_loss(&model, &x, &y, &g, Mode::Eval).unwrap();
            ((l - base).abs() / eps - inner[&id]).abs()
        };
        let (r3, r4) = (residual(1e-3), residual(1e-4));
        // First-order residual shrinks roughly with eps.
        assert!(r4 < r3 * 0.2 + 1e-9, "{id:?}: {r3:e} -> {r4:e}");
        assert!(r4 < 1e-3 * inner[&id].max(1e-3), "{id:?}: {r4:e}");
    }
}

#[test]
fn loss_scale_equivariance() {
    let (model, x, y) = setup(5);
    let mask = model.all_active();
    let raw_for = |c: f64| {
        let mut pass = model.forward_pass(&x, &mask.gates(), Mode::Train, true).unwrap();
        let loss = pass.graph.softmax_cross_entropy(pass.logits, &y).unwrap();
        let scaled = pass.graph.mul_scalar(loss, c).unwrap();
        pass.graph.backward(scaled).unwrap();
        raw_saliencies(&pass, &mask).unwrap()
    };
    let (one, seven) = (raw_for(1.0), raw_for(7.0));
    for (id, v) in &one {
        assert!((seven[id] - 7.0 * v).abs() <= 1e-12 * (1.0 + v.abs()));
    }
    let (a, b) = (normalize_saliencies(0, &one), normalize_saliencies(0, &seven));
    assert_eq!(a.len(), 24);
    for ((ia, va), (ib, vb)) in a.iter().zip(b.iter()) {
        assert_eq!(ia, ib);
        assert!((va - vb).abs() < 1e-10);
    }
}

#[test]
fn taylor_ranks_track_the_oracle_on_a_small_net() {
    let mut rhos = Vec::new();
    for seed in 10..15 {
        let (model, x, y) = setup(seed);
        let mask = model.all_active();
        let oracle = oracle_saliencies(&model, &x, &y, &mask).unwrap();
        let taylor = eval_taylor_saliencies(&model, &x, &y, &mask).unwrap();
        let o: Vec<f64> = oracle.values().copied().collect();
        let t: Vec<f64> = taylor.averaged.values().copied().collect();
        let u: Vec<f64> = taylor.inner.values().copied().collect();
        rhos.push((spearman(&o, &t), spearman(&o, &u)));
    }
    eprintln!("{rhos:?}");
    let mean = rhos.iter().map(|r| r.0).sum::<f64>() / rhos.len() as f64;
    assert!(mean >= 0.6, "mean Spearman {mean}");
}
