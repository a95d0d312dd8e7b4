mod common;

use alps_core::models::{AlpsModel, LatentCode, ModelConfig, Trainable};
use alps_core::scoring::score_batch;
use alps_core::{Graph, Tensor};
use common::*;
use proptest::prelude::*;

fn tiny(delta_max: f64) -> ModelConfig {
    ModelConfig {
        resolution: 16,
        latent_dim: 4,
        delta_max,
        encoder_channels: [2, 3, 2],
        decoder_seed_channels: 2,
        decoder_channels: [2, 2, 2, 2, 2],
    }
}

fn images(seed: u64, n: usize, side: usize) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_vec(&[n, 1, side, side], uniform_vec(&mut r, n * side * side, 0.0, 1.0)).unwrap()
}

/// Checks the gradient of `reduce(network(x))` w.r.t. the parameter `name`
/// of network `which` (0 encoder, 2 distorter) by central differences.
fn param_grad_error(which: usize, name: &str, reduce_mean: bool) -> f64 {
    let model = AlpsModel::<f64>::new(tiny(0.7), 5).unwrap();
    let x = images(11, 2, 16);
    let eval = |m: &AlpsModel<f64>| -> f64 {
        let out = if which == 0 { m.encoder.encode(&x).unwrap().z } else { m.distorter.distort(&x).unwrap() };
        let s: f64 = out.data().iter().sum();
        if reduce_mean { s / out.len() as f64 } else { s }
    };
    let index = model.parameter_sets()[which].iter().position(|(n, _)| n == name).unwrap();

    let mut g = Graph::new();
    let b = model.bind(&mut g, if which == 0 { Trainable::Autoencoder } else { Trainable::Distorter });
    let xv = g.constant(x.clone());
    let (out, vars) = if which == 0 {
        (model.encoder.forward(&mut g, &b.encoder, xv).unwrap(), &b.encoder)
    } else {
        (model.distorter.forward(&mut g, &b.distorter, xv).unwrap(), &b.distorter)
    };
    let l = if reduce_mean { g.mean(out) } else { g.sum(out) };
    g.backward(l).unwrap();
    let analytic = g.grad(vars[index]).unwrap().to_vec();

    let eps = 1e-5;
    let len = model.parameter_sets()[which].get(name).unwrap().len();
    let numeric: Vec<f64> = (0..len)
        .map(|i| {
            let mut m = model.clone();
            let shift = |m: &mut AlpsModel<f64>, by: f64| {
                m.parameter_sets_mut()[which].get_mut(name).unwrap().data_mut()[i] += by;
            };
            shift(&mut m, eps);
            let up = eval(&m);
            shift(&mut m, -2.0 * eps);
            let down = eval(&m);
            (up - down) / (2.0 * eps)
        })
        .collect();
    rel_err(&analytic, &numeric)
}

#[test]
fn encoder_weight_gradients_match_differences() {
    for name in ["encoder.conv0.weight", "encoder.conv2.weight", "encoder.conv3.bias"] {
        let err = param_grad_error(0, name, false);
        assert!(err < 1e-6, "{name}: {err}");
    }
}

#[test]
fn distorter_weight_gradients_match_differences() {
    for name in ["distorter.conv0.weight", "distorter.conv3.weight", "distorter.dense.weight"] {
        let err = param_grad_error(2, name, true);
        assert!(err < 1e-6, "{name}: {err}");
    }
}

#[test]
fn reconstructions_finite_for_many_seeds() {
    let config = ModelConfig::default();
    for seed in 0..100 {
        let model = AlpsModel::<f32>::new(config, seed).unwrap();
        let x: Tensor<f32> = images(seed + 1000, 1, 32).cast();
        let code = model.encoder.encode(&x).unwrap();
        let delta = model.distorter.distort(&x).unwrap();
        let plain = model.decoder.decode(&code).unwrap();
        let perturbed = model.decoder.decode(&code.perturb(&delta).unwrap()).unwrap();
        for v in plain.data().iter().chain(perturbed.data()) {
            assert!(v.is_finite() && (0.0..=1.0).contains(v), "seed {seed}: {v}");
        }
    }
}

#[test]
fn zero_bound_pipeline_is_bitwise_plain() {
    let model = AlpsModel::<f32>::new(ModelConfig { delta_max: 0.0, ..Default::default() }, 3).unwrap();
    for seed in 0..100 {
        let x: Tensor<f32> = images(seed, 1, 32).cast();
        let run = |perturbed: bool| {
            let mut g = Graph::new();
            let b = model.bind(&mut g, Trainable::Nothing);
            let xv = g.constant(x.clone());
            let pass = model.objective(&mut g, &b, xv, perturbed).unwrap();
            (g.item(pass.loss).to_bits(), g.value(pass.reconstruction).iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(false), run(true), "seed {seed}");
        let t = score_batch(&model, &x).unwrap()[0];
        assert_eq!(t.plain.to_bits(), t.perturbed.to_bits());
        assert_eq!(t.mean.to_bits(), t.plain.to_bits());
    }
}

#[test]
fn perfect_reconstruction_scores_zero() {
    // zero decoder weights give a constant 0.5 image whatever the code
    let mut model = AlpsModel::<f32>::new(ModelConfig { delta_max: 0.0, ..Default::default() }, 9).unwrap();
    for (_, t) in model.decoder.params_mut().iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let x = Tensor::<f32>::full(&[1, 1, 32, 32], 0.5);
    let t = score_batch(&model, &x).unwrap()[0];
    assert_eq!(t.as_array(), [0.0, 0.0, 0.0]);
}

#[test]
fn perturbed_decode_matches_graph_objective() {
    let model = AlpsModel::<f64>::new(tiny(0.5), 1).unwrap();
    let x = images(2, 3, 16);
    let code = LatentCode::new(model.encoder.encode(&x).unwrap().z);
    let delta = model.distorter.distort(&x).unwrap();
    let direct = model.decoder.decode(&code.perturb(&delta).unwrap()).unwrap();
    let mut g = Graph::new();
    let b = model.bind(&mut g, Trainable::Nothing);
    let xv = g.constant(x);
    let pass = model.objective(&mut g, &b, xv, true).unwrap();
    assert_eq!(g.value(pass.reconstruction), direct.data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn perturbation_stays_inside_bound(seed in 0u64..1000, bound in 0.01f64..3.0, scale in 0.0f64..50.0) {
        let model = AlpsModel::<f64>::new(tiny(bound), seed).unwrap();
        let mut x = images(seed, 2, 16);
        x.data_mut().iter_mut().for_each(|v| *v *= scale);
        let d = model.distorter.distort(&x).unwrap();
        for v in d.data() {
            prop_assert!(v.abs() < bound, "{} >= {}", v, bound);
        }
    }

    #[test]
    fn scoring_leaves_parameters_untouched(seed in 0u64..100) {
        let model = AlpsModel::<f32>::new(tiny(1.0), seed).unwrap();
        let before = model.clone();
        score_batch(&model, &images(seed, 2, 16).cast()).unwrap();
        prop_assert_eq!(model, before);
    }
}
