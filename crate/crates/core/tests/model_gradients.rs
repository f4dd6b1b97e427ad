mod common;

use giftsw::model::{self, init_params, ModelConfig};
use giftsw::tensor::SeededRng;

fn config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 7,
        context_length: 6,
        d_model: 8,
        n_layers: 2,
        n_heads: 1,
        d_ff: 12,
        seed,
        init_std: 0.5,
    }
}

fn batch(rng: &mut SeededRng, n: usize, len: usize, vocab: usize) -> Vec<Vec<usize>> {
    (0..n).map(|_| (0..len).map(|_| rng.below(vocab)).collect()).collect()
}

#[test]
fn backward_matches_finite_differences() {
    let cfg = config(1);
    let mut rng = SeededRng::new(cfg.seed);
    let params = init_params(&cfg, &mut rng).unwrap();
    let tokens = batch(&mut rng, 2, 5, cfg.vocab_size);
    let targets = batch(&mut rng, 2, 5, cfg.vocab_size);
    let (h, report) = common::check_gradients(&cfg, &params, &tokens, &targets, &[1e-2, 1e-3, 1e-4], 1e-8);
    println!("h={h:e} max_rel={:e} worst={} checked={}", report.max_rel, report.worst, report.checked);
    assert!(report.max_rel <= 1e-5, "{}", report.worst);
}

#[test]
fn zero_gradient_entry_is_second_order() {
    let cfg = config(2);
    let mut rng = SeededRng::new(cfg.seed);
    let params = init_params(&cfg, &mut rng).unwrap();
    // token 6 never appears, so its embedding row has an exactly zero gradient
    let tokens = vec![vec![0, 1, 2, 3]];
    let targets = vec![vec![1, 2, 3, 4]];
    let (base, grads) = model::loss_and_backward(&params, &tokens, &targets).unwrap();
    let g = grads.get("tok_emb").unwrap();
    assert!(g.row(6).iter().all(|&v| v == 0.0));
    let mut p = params.clone();
    p.get_mut("tok_emb").unwrap().data_mut()[6 * 8] += 1e-3;
    let moved = model::loss(&p, &tokens, &targets).unwrap();
    assert!((moved - base).abs() <= 1e-6);
}
