mod common;

use common::{phantom_stack, rel_err};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsenet::net::{
    self, build_network, build_network_with_encoder, checkpoint, se_block_forward, tap_forward, upsample_to_input,
    upsampler_geom, Conv, ConvGeom, FeatureMap, ParamArray, SeParams,
};
use rsenet::train::{loss_and_gradient, TrainConfig};
use rsenet::{Error, InputStack, ModelParams, NetworkConfig};

fn random_map(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
    FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-2.0..2.0)).collect())
}

fn random_stack(h: usize, w: usize, seed: u64) -> InputStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    InputStack {
        height: h,
        width: w,
        channels: (0..3 * h * w).map(|_| rng.random_range(-1.5..1.5)).collect(),
        center_index: 0,
        exam_id: "rand".into(),
    }
}

fn tap_conv(in_ch: usize, k: usize, fill: impl Fn(usize, usize, usize) -> f64) -> Conv {
    let mut weight = ParamArray::zeros(&[k, in_ch, 3, 3]);
    for o in 0..k {
        for i in 0..in_ch {
            for t in 0..9 {
                weight.data[(o * in_ch + i) * 9 + t] = fill(o, i, t);
            }
        }
    }
    Conv {
        geom: ConvGeom {
            in_ch,
            out_ch: k,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        weight,
        bias: ParamArray::zeros(&[k]),
    }
}

#[test]
fn tiny_forward_shape_and_range() {
    let model = build_network(&NetworkConfig::tiny(), 0).unwrap();
    for (h, w) in [(64, 64), (32, 96)] {
        let p = net::forward(&model, &random_stack(h, w, 1)).unwrap();
        assert_eq!((p.height, p.width, p.values.len()), (h, w, h * w));
        assert!(p.values.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn input_contract_errors() {
    let model = build_network(&NetworkConfig::tiny(), 0).unwrap();
    assert!(matches!(net::forward(&model, &random_stack(100, 100, 0)), Err(Error::Shape(_))));
    let mut two = random_stack(64, 64, 0);
    two.channels.truncate(2 * 64 * 64);
    assert!(matches!(net::forward(&model, &two), Err(Error::Shape(_))));
}

#[test]
fn forward_is_bit_deterministic() {
    let model = build_network(&NetworkConfig::tiny(), 4).unwrap();
    let s = random_stack(64, 64, 2);
    assert_eq!(net::forward(&model, &s).unwrap(), net::forward(&model, &s).unwrap());
    let again = build_network(&NetworkConfig::tiny(), 4).unwrap();
    assert_eq!(net::forward(&again, &s).unwrap(), net::forward(&model, &s).unwrap());
}

#[test]
fn se_with_zero_weights_halves_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random_map(16, 5, 7, &mut rng);
    let y = se_block_forward(&x, &SeParams::zeros(16, 4)).unwrap();
    assert_eq!(y.data, x.data.iter().map(|v| 0.5 * v).collect::<Vec<_>>());
}

#[test]
fn se_scales_each_channel_uniformly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = build_network(&NetworkConfig::tiny(), 9).unwrap();
    for block in &model.blocks {
        let se = &block.se;
        let x = random_map(se.channels, 6, 6, &mut rng);
        let y = se_block_forward(&x, se).unwrap();
        for c in 0..se.channels {
            let ratios: Vec<f64> = x
                .plane(c)
                .iter()
                .zip(y.plane(c))
                .filter(|(a, _)| a.abs() > 1e-3)
                .map(|(a, b)| b / a)
                .collect();
            let r0 = ratios[0];
            assert!(r0 > 0.0 && r0 < 1.0);
            assert!(ratios.iter().all(|r| rel_err(*r, r0, 1e-300) < 1e-6));
        }
    }
    assert!(matches!(se_block_forward(&random_map(3, 2, 2, &mut rng), &SeParams::zeros(16, 4)), Err(Error::Shape(_))));
}

#[test]
fn se_squeeze_of_constant_channel_is_the_constant() {
    // With W1 = identity on channel 0 feeding a gate of W2 = 1, the gate is sigmoid(c).
    let mut se = SeParams::zeros(4, 4);
    se.reduce_weight.data[0] = 1.0;
    se.expand_weight.data[0] = 1.0;
    let c = 0.75;
    let x = FeatureMap::from_vec(4, 3, 3, vec![c; 36]);
    let y = se_block_forward(&x, &se).unwrap();
    let gate = 1.0 / (1.0 + (-c).exp());
    assert!((y.data[0] - c * gate).abs() < 1e-15);
}

#[test]
fn tap_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_map(16, 8, 8, &mut rng);
    let identity = tap_conv(16, 16, |o, i, t| if o == i && t == 4 { 1.0 } else { 0.0 });
    let y = tap_forward(&x, &identity).unwrap();
    assert_eq!(y.data, x.data.iter().map(|v| v.max(0.0)).collect::<Vec<_>>());
    let zero = tap_conv(16, 16, |_, _, _| 0.0);
    assert!(tap_forward(&x, &zero).unwrap().data.iter().all(|&v| v == 0.0));
    assert!(matches!(tap_forward(&random_map(8, 4, 4, &mut rng), &zero), Err(Error::Shape(_))));
}

#[test]
fn taps_have_fixed_width_on_every_stage() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for cfg in [NetworkConfig::tiny(), NetworkConfig::default()] {
        let model = build_network(&cfg, 0).unwrap();
        assert_eq!(model.taps.len(), 4);
        for (tap, &c) in model.taps.iter().zip(&cfg.stage_channels) {
            assert_eq!(tap.conv.geom.in_ch, c);
            let y = tap_forward(&random_map(c, 7, 7, &mut rng), &tap.conv).unwrap();
            assert_eq!((y.channels, y.height, y.width), (cfg.tap_channels, 7, 7));
        }
    }
}

#[test]
fn upsampler_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = build_network(&NetworkConfig::default(), 0).unwrap();
    let coarse = &model.taps[3];
    assert_eq!((coarse.stride, coarse.upsamplers.len()), (32, 5));
    let y = upsample_to_input(&random_map(16, 7, 7, &mut rng), 32, &coarse.upsamplers).unwrap();
    assert_eq!((y.channels, y.height, y.width), (16, 224, 224));
    let fine = &model.taps[0];
    let y = upsample_to_input(&random_map(16, 56, 56, &mut rng), 4, &fine.upsamplers).unwrap();
    assert_eq!((y.height, y.width), (224, 224));

    let zero: Vec<Conv> = (0..2)
        .map(|_| Conv {
            geom: upsampler_geom(16),
            weight: ParamArray::zeros(&[16, 16, 4, 4]),
            bias: ParamArray::zeros(&[16]),
        })
        .collect();
    let y = upsample_to_input(&random_map(16, 5, 5, &mut rng), 4, &zero).unwrap();
    assert!(y.data.iter().all(|&v| v == 0.0));
    assert!(matches!(upsample_to_input(&random_map(16, 5, 5, &mut rng), 6, &zero), Err(Error::Config(_))));
}

/// Model with small random biases so every parameter sits at a generic point.
fn generic_model(seed: u64) -> ModelParams {
    let mut model = build_network(&NetworkConfig::tiny(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
    for (_, p) in model.params_mut() {
        if p.shape.len() == 1 {
            p.data.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
    }
    model.round_to_f32();
    model
}

fn loss_at(model: &ModelParams, batch: &[(&InputStack, &rsenet::Mask)]) -> f64 {
    loss_and_gradient(model, batch, &TrainConfig::default()).unwrap().0
}

fn central_difference(model: &ModelParams, group: usize, index: usize, h: f64, batch: &[(&InputStack, &rsenet::Mask)]) -> f64 {
    let mut m = model.clone();
    m.params_mut()[group].1.data[index] += h;
    let plus = loss_at(&m, batch);
    m.params_mut()[group].1.data[index] -= 2.0 * h;
    let minus = loss_at(&m, batch);
    (plus - minus) / (2.0 * h)
}

#[test]
fn gradient_matches_finite_differences_on_random_scalars() {
    let model = generic_model(3);
    let (stack, mask) = phantom_stack(64, 7);
    let batch = [(&stack, &mask)];
    let (_, grads) = loss_and_gradient(&model, &batch, &TrainConfig::default()).unwrap();
    let grads: Vec<Vec<f64>> = grads.named_params().iter().map(|(_, p)| p.data.clone()).collect();
    let sizes: Vec<usize> = grads.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..24 {
        let mut flat = rng.random_range(0..total);
        let group = sizes.iter().position(|&s| if flat < s { true } else { flat -= s; false }).unwrap();
        let fd = central_difference(&model, group, flat, 1e-4, &batch);
        let analytic = grads[group][flat];
        let err = rel_err(analytic, fd, 1e-8);
        assert!(err < 1e-3, "group {group} index {flat}: analytic {analytic:e} fd {fd:e} rel {err:e}");
    }
}

#[test]
fn every_parameter_group_gets_a_checked_nonzero_gradient() {
    let model = generic_model(5);
    let (stack, mask) = phantom_stack(64, 8);
    let batch = [(&stack, &mask)];
    let (_, grads) = loss_and_gradient(&model, &batch, &TrainConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (g, (name, p)) in grads.named_params().iter().enumerate() {
        assert!(p.data.iter().any(|&v| v != 0.0), "{name} has an all-zero gradient");
        let j = rng.random_range(0..p.len());
        let analytic = p.data[j];
        // A perturbation that moves a ReLU or max-pool kink breaks the
        // difference quotient, not the gradient; a smaller step avoids it.
        let err = [1e-4, 1e-6]
            .iter()
            .map(|&h| rel_err(analytic, central_difference(&model, g, j, h, &batch), 1e-8))
            .fold(f64::INFINITY, f64::min);
        assert!(err < 1e-3, "{name}[{j}]: rel {err:e}");
    }
}

#[test]
fn checkpoint_round_trip_reproduces_forward() {
    let dir = tempfile::tempdir().unwrap();
    let model = generic_model(6);
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&model, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.config, model.config);
    let s = random_stack(64, 64, 3);
    let (a, b) = (net::forward(&model, &s).unwrap(), net::forward(&back, &s).unwrap());
    assert_eq!(back, model);
    let worst = a.values.iter().zip(&b.values).map(|(x, y)| rel_err(*x, *y, 1e-300)).fold(0.0, f64::max);
    assert!(worst < 1e-6, "worst relative deviation {worst:e}");
}

#[test]
fn encoder_hook_copies_stem_and_stages_only() {
    let dir = tempfile::tempdir().unwrap();
    let donor = build_network(&NetworkConfig::tiny(), 77).unwrap();
    let path = dir.path().join("enc.ckpt");
    checkpoint::save(&donor, &path).unwrap();
    let fresh = build_network(&NetworkConfig::tiny(), 1).unwrap();
    let hooked = build_network_with_encoder(&NetworkConfig::tiny(), 1, Some(&path)).unwrap();
    for ((name, a), ((_, d), (_, f))) in hooked
        .named_params()
        .iter()
        .zip(donor.named_params().iter().zip(fresh.named_params().iter()))
    {
        let expected = if name.starts_with("stem.") || name.starts_with("stage") { d } else { f };
        assert_eq!(a.data, expected.data, "{name}");
    }
    let other = NetworkConfig {
        stem_channels: 4,
        ..NetworkConfig::tiny()
    };
    assert!(matches!(build_network_with_encoder(&other, 0, Some(&path)), Err(Error::Config(_))));
}
