//! Hand-written backward pass against central finite differences on every
//! parameter of a small model.

use giftsw::model::{init_params, loss, loss_and_backward, ModelConfig};
use giftsw::tensor::SeededRng;

fn main() -> giftsw::Result<()> {
    let cfg = ModelConfig {
        vocab_size: 7,
        context_length: 5,
        d_model: 6,
        n_layers: 2,
        n_heads: 1,
        d_ff: 10,
        seed: 0,
        init_std: 0.5,
    };
    let mut rng = SeededRng::new(11);
    let params = init_params(&cfg, &mut rng)?;
    let tokens: Vec<Vec<usize>> = (0..2).map(|_| (0..5).map(|_| rng.below(7)).collect()).collect();
    let targets: Vec<Vec<usize>> = (0..2).map(|_| (0..5).map(|_| rng.below(7)).collect()).collect();
    let (_, grads) = loss_and_backward(&params, &tokens, &targets)?;

    let h = 1e-5;
    for (name, g) in grads.iter() {
        let mut worst: f64 = 0.0;
        for i in 0..g.len() {
            let probe = |delta: f64| -> giftsw::Result<f64> {
                let mut p = params.clone();
                p.get_mut(name)?.data_mut()[i] += delta;
                loss(&p, &tokens, &targets)
            };
            let fd = (probe(h)? - probe(-h)?) / (2.0 * h);
            let a = g.data()[i];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-8));
        }
        println!("{name:<22} max relative error {worst:.2e}");
    }
    Ok(())
}
