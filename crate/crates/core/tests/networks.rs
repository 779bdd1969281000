use ndarray::Array2;
use pda_core::gradcheck::{self, tiny_shape};
use pda_core::math::DiagGaussianParams;
use pda_core::networks::{grad_reverse, sample_latent, ClassPriorBank, ModelParams};
use pda_core::tape::Tape;
use pda_core::tensors::TensorMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[test]
fn every_gradient_check_passes() {
    let results = gradcheck::run_suite();
    assert!(results.len() >= 20);
    for r in &results {
        assert!(r.passed, "{r}");
        assert!(r.rel_error < gradcheck::TOLERANCE);
    }
}

#[test]
fn sample_latent_moments_within_three_standard_errors() {
    let g = DiagGaussianParams::new(vec![1.5, -0.7, 0.0], vec![0.4, -1.2, 1.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = 100_000;
    let draws: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let eps: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
            sample_latent(&g, &eps).unwrap()
        })
        .collect();
    for j in 0..3 {
        let var = g.logvar[j].exp();
        let mean = draws.iter().map(|z| z[j]).sum::<f64>() / n as f64;
        let sample_var = draws.iter().map(|z| (z[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se_mean = (var / n as f64).sqrt();
        // variance of the sample variance of a Gaussian is 2 sigma^4 / (n - 1)
        let se_var = (2.0 * var * var / (n - 1) as f64).sqrt();
        assert!((mean - g.mean[j]).abs() < 3.0 * se_mean, "mean {j}: {mean}");
        assert!((sample_var - var).abs() < 3.0 * se_var, "var {j}: {sample_var}");
    }
}

#[test]
fn sample_gradient_wrt_mean_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = ModelParams::init(&tiny_shape(), &mut rng).unwrap();
    let mut tape = Tape::new();
    let model = params.bind(&mut tape);
    let mean = tape.leaf(Array2::from_shape_vec((2, 3), vec![0.1, 0.2, 0.3, -1.0, 0.5, 2.0]).unwrap());
    let logvar = tape.leaf(Array2::from_elem((2, 3), 0.3));
    let eps = Array2::from_shape_vec((2, 3), vec![0.5, -1.0, 2.0, 0.0, 1.0, -0.3]).unwrap();
    let z = model.sample(&mut tape, mean, logvar, eps);
    let coeffs: Vec<f64> = (0..2).map(|i| i as f64 + 1.0).collect();
    let per_row = tape.row_sum(z);
    let out = tape.weighted_sum(per_row, coeffs.clone());
    let g = tape.backward(out).get(mean, (2, 3));
    for i in 0..2 {
        for j in 0..3 {
            assert_eq!(g[[i, j]], coeffs[i]);
        }
    }
}

#[test]
fn grad_reverse_is_identity_forward_and_negated_backward() {
    let v = Array2::from_shape_vec((2, 2), vec![1.0, -2.0, 3.5, 0.25]).unwrap();
    for lambda in [0.0, 0.5, 1.0, 3.0] {
        let mut tape = Tape::new();
        let x = tape.leaf(v.clone());
        let r = grad_reverse(&mut tape, x, lambda);
        assert_eq!(tape.value(r), &v);
        let s = tape.row_sum(r);
        let total = tape.weighted_sum(s, vec![1.0, 1.0]);
        let g = tape.backward(total).get(x, (2, 2));
        assert!(g.iter().all(|&e| e == -lambda));
    }
}

#[test]
fn zero_lambda_blocks_discriminator_gradient_into_encoder() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = ModelParams::init(&tiny_shape(), &mut rng).unwrap();
    let mut tape = Tape::new();
    let model = params.bind(&mut tape);
    let x = tape.leaf(Array2::from_elem((3, tiny_shape().input_dim), 0.7));
    let f = model.encode(&mut tape, x);
    let r = grad_reverse(&mut tape, f, 0.0);
    let logits = model.discriminator_logits::<ChaCha8Rng>(&mut tape, r, None);
    let out = tape.weighted_sum(logits, vec![1.0, -2.0, 0.5]);
    let grads = tape.backward(out);
    let encoder_vars = model.encoder.layers.iter().flat_map(|l| [l.weight, l.bias]);
    for v in encoder_vars {
        if let Some(g) = grads.try_get(v) {
            assert!(g.iter().all(|&e| e == 0.0));
        }
    }
}

#[test]
fn checkpoint_file_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = ModelParams::init(&tiny_shape(), &mut rng).unwrap();
    let priors = ClassPriorBank::init(3, 3, &mut rng);
    let mut map = params.to_tensor_map();
    priors.write_to(&mut map);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.txt");
    map.save(&path).unwrap();
    let loaded = TensorMap::load(&path).unwrap();
    assert_eq!(ModelParams::from_tensor_map(&loaded).unwrap(), params);
    assert_eq!(ClassPriorBank::read_from(&loaded).unwrap(), priors);
}

#[test]
fn forward_passes_are_bit_identical_on_repeat() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params = ModelParams::init(&tiny_shape(), &mut rng).unwrap();
    let x = [0.3, -1.1, 2.0, 0.05];
    let a = params.forward_latent(&x).unwrap();
    let b = params.forward_latent(&x).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.dim(), tiny_shape().latent_dim);
    let z = sample_latent(&a, &[0.0; 3]).unwrap();
    assert_eq!(z, a.mean);
    assert_eq!(params.decode(&z).unwrap(), params.decode(&z).unwrap());
    assert_eq!(params.decode(&z).unwrap().len(), tiny_shape().input_dim);
    let p = params.classify(&z).unwrap();
    assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let f = params.encode(&x).unwrap();
    let d = params.discriminate(&f).unwrap();
    assert!(d > 0.0 && d < 1.0);
}
