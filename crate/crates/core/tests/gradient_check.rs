//! Finite-difference verification of every hand-written backward pass, at
//! f64 where central differences are trustworthy: 20 seeded random shapes
//! per primitive, plus an end-to-end check of the full two-layer model.

use cabert::model::{CaBertModel, ModelConfig};
use cabert::tensor::{
    cross_entropy, dropout_cached, finite_diff_grad, gelu, gelu_backward, hadamard, layer_norm,
    layer_norm_backward, matmul, matmul_backward, softmax_rows, softmax_rows_backward, Tensor,
};
use cabert::tokenizer::{TokenSequence, CLS_ID, PAD_ID, SEP_ID};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;
const PER_OP_TOL: f64 = 1e-5;
const END_TO_END_TOL: f64 = 1e-3;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect(),
    )
    .unwrap()
}

fn assert_grad_close(analytic: &Tensor<f64>, numeric: &Tensor<f64>, tol: f64, what: &str) {
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let denom = a.abs().max(n.abs());
        let ok = (a - n).abs() <= tol * denom + 1e-9;
        assert!(ok, "{what}: element {i}: analytic {a} vs numeric {n}");
    }
}

#[test]
fn matmul_backward_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k, n) = (
            rng.gen_range(1..6),
            rng.gen_range(1..6),
            rng.gen_range(1..6),
        );
        let a = rand_tensor(&mut rng, &[m, k]);
        let b = rand_tensor(&mut rng, &[k, n]);
        // random projection makes the scalar objective generic
        let r = rand_tensor(&mut rng, &[m, n]);
        let loss = |a: &Tensor<f64>, b: &Tensor<f64>| {
            hadamard(&matmul(a, b).unwrap(), &r)
                .unwrap()
                .data()
                .iter()
                .sum::<f64>()
        };
        let (da, db) = matmul_backward(&a, &b, &r).unwrap();
        let fa = finite_diff_grad(|x| loss(x, &b), &a, 1e-5);
        let fb = finite_diff_grad(|x| loss(&a, x), &b, 1e-5);
        assert_grad_close(&da, &fa, PER_OP_TOL, &format!("matmul dA seed {seed}"));
        assert_grad_close(&db, &fb, PER_OP_TOL, &format!("matmul dB seed {seed}"));
    }
}

#[test]
fn softmax_backward_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let rows = rng.gen_range(1..5);
        let cols = rng.gen_range(2..7);
        let x = rand_tensor(&mut rng, &[rows, cols]);
        let r = rand_tensor(&mut rng, &[rows, cols]);
        let y = softmax_rows(&x);
        let analytic = softmax_rows_backward(&y, &r).unwrap();
        let numeric = finite_diff_grad(
            |x| {
                hadamard(&softmax_rows(x), &r)
                    .unwrap()
                    .data()
                    .iter()
                    .sum::<f64>()
            },
            &x,
            1e-5,
        );
        assert_grad_close(&analytic, &numeric, PER_OP_TOL, &format!("softmax seed {seed}"));
    }
}

#[test]
fn layer_norm_backward_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let rows = rng.gen_range(1..5);
        let d = rng.gen_range(2..8);
        let x = rand_tensor(&mut rng, &[rows, d]);
        let gamma = rand_tensor(&mut rng, &[d]);
        let beta = rand_tensor(&mut rng, &[d]);
        let r = rand_tensor(&mut rng, &[rows, d]);
        let eps = 1e-5;
        let loss = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| {
            hadamard(&layer_norm(x, g, b, eps).unwrap(), &r)
                .unwrap()
                .data()
                .iter()
                .sum::<f64>()
        };
        let (dx, dgamma, dbeta) = layer_norm_backward(&x, &gamma, eps, &r).unwrap();
        let fx = finite_diff_grad(|t| loss(t, &gamma, &beta), &x, 1e-6);
        let fg = finite_diff_grad(|t| loss(&x, t, &beta), &gamma, 1e-6);
        let fb = finite_diff_grad(|t| loss(&x, &gamma, t), &beta, 1e-6);
        assert_grad_close(&dx, &fx, PER_OP_TOL, &format!("layer_norm dx seed {seed}"));
        assert_grad_close(&dgamma, &fg, PER_OP_TOL, &format!("layer_norm dgamma seed {seed}"));
        assert_grad_close(&dbeta, &fb, PER_OP_TOL, &format!("layer_norm dbeta seed {seed}"));
    }
}

#[test]
fn gelu_backward_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let n = rng.gen_range(1..30);
        let x = rand_tensor(&mut rng, &[n]);
        let r = rand_tensor(&mut rng, &[n]);
        let analytic = gelu_backward(&x, &r).unwrap();
        let numeric = finite_diff_grad(
            |x| hadamard(&gelu(x), &r).unwrap().data().iter().sum::<f64>(),
            &x,
            1e-5,
        );
        assert_grad_close(&analytic, &numeric, PER_OP_TOL, &format!("gelu seed {seed}"));
    }
}

#[test]
fn dropout_backward_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let n = rng.gen_range(4..40);
        let x = rand_tensor(&mut rng, &[n]);
        let r = rand_tensor(&mut rng, &[n]);
        let p = rng.gen_range(0.05..0.6);
        // reseeding per evaluation freezes the mask, making dropout a fixed
        // linear map that finite differences can probe
        let mask_seed = 1000 + seed;
        let loss = |x: &Tensor<f64>| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
            let (y, _) = dropout_cached(x, p, true, &mut mask_rng).unwrap();
            hadamard(&y, &r).unwrap().data().iter().sum::<f64>()
        };
        let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
        let (_, mask) = dropout_cached(&x, p, true, &mut mask_rng).unwrap();
        let analytic = hadamard(&r, &mask).unwrap();
        let numeric = finite_diff_grad(loss, &x, 1e-5);
        assert_grad_close(&analytic, &numeric, PER_OP_TOL, &format!("dropout seed {seed}"));
    }
}

#[test]
fn cross_entropy_backward_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let b = rng.gen_range(1..6);
        let c = rng.gen_range(2..5);
        let logits = rand_tensor(&mut rng, &[b, c]);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let (_, dlogits) = cross_entropy(&logits, &labels).unwrap();
        let numeric = finite_diff_grad(
            |x| cross_entropy(x, &labels).unwrap().0,
            &logits,
            1e-6,
        );
        assert_grad_close(&dlogits, &numeric, 1e-6, &format!("cross_entropy seed {seed}"));
    }
}

fn toy_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 30,
        d_model: 32,
        n_heads: 4,
        n_layers: 2,
        d_ff: 48,
        max_len: 10,
        dropout_p: 0.1,
        n_classes: 2,
    }
}

fn random_sequence(rng: &mut ChaCha8Rng, max_len: usize, vocab_size: usize) -> TokenSequence {
    let true_length = rng.gen_range(3..=max_len);
    let mut ids = vec![PAD_ID; max_len];
    ids[0] = CLS_ID;
    for slot in ids.iter_mut().take(true_length - 1).skip(1) {
        *slot = rng.gen_range(4..vocab_size) as u32;
    }
    ids[true_length - 1] = SEP_ID;
    let mut attention_mask = vec![0u8; max_len];
    attention_mask[..true_length].fill(1);
    TokenSequence {
        ids,
        attention_mask,
        true_length,
    }
}

/// End-to-end gradient of the mean training loss (dropout active, masks
/// frozen by reseeding) with respect to randomly chosen parameter
/// coordinates of the full two-layer model.
#[test]
fn full_model_gradients_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let config = toy_config();
        let mut model = CaBertModel::<f64>::init(config.clone(), 700 + seed).unwrap();
        let batch: Vec<TokenSequence> = (0..3)
            .map(|_| random_sequence(&mut rng, config.max_len, config.vocab_size))
            .collect();
        let refs: Vec<&TokenSequence> = batch.iter().collect();
        let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..2)).collect();
        let dropout_seed = 800 + seed;

        model.zero_grads();
        let mut step_rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        model
            .train_step(&refs, &labels, None, &mut step_rng)
            .unwrap();

        let n_params = model.parameters().len();
        for probe in 0..5 {
            let pi = rng.gen_range(0..n_params);
            let ci = rng.gen_range(0..model.parameters()[pi].value.len());
            let analytic = model.parameters()[pi].grad.data()[ci];

            let h = 1e-5;
            let mut loss_at = |delta: f64| {
                let mut params = model.parameters_mut();
                let original = params[pi].value.data()[ci];
                params[pi].value.data_mut()[ci] = original + delta;
                drop(params);
                let mut fd_rng = ChaCha8Rng::seed_from_u64(dropout_seed);
                let (logits, _) = model.forward_train(&refs, &mut fd_rng).unwrap();
                let (loss, _) = cross_entropy(&logits, &labels).unwrap();
                let mut params = model.parameters_mut();
                params[pi].value.data_mut()[ci] = original;
                loss
            };
            let numeric = (loss_at(h) - loss_at(-h)) / (2.0 * h);

            let denom = analytic.abs().max(numeric.abs());
            assert!(
                (analytic - numeric).abs() <= END_TO_END_TOL * denom + 1e-8,
                "seed {seed} probe {probe}: param {pi} coord {ci}: analytic {analytic} vs numeric {numeric}"
            );
        }
    }
}
