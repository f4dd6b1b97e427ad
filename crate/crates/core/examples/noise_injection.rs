//! Noise scaled by the quantization step of the non-salient columns: the
//! empirical per-row std approaches Δ/2 and salient columns never move.

use giftsw::noise::{compute_noise_scale, inject};
use giftsw::partition::SalientPartition;
use giftsw::quantizer::BitWidth;
use giftsw::tensor::{sample_gaussian, SeededRng};

fn main() -> giftsw::Result<()> {
    let mut rng = SeededRng::new(3);
    let w = sample_gaussian(&[4, 10], &mut rng);
    let partition = SalientPartition::new(10, vec![0, 7])?;
    let delta = compute_noise_scale(&w, &partition, BitWidth::new(4)?, 100, "demo")?;

    let draws = 20_000;
    let mut sum_sq = vec![0.0; 4];
    for _ in 0..draws {
        let noisy = inject(&w, &partition, &delta, &mut rng)?;
        for (r, acc) in sum_sq.iter_mut().enumerate() {
            assert_eq!(noisy.get(r, 7), w.get(r, 7));
            for &c in partition.non_salient() {
                let d = noisy.get(r, c) - w.get(r, c);
                *acc += d * d;
            }
        }
    }
    let n = (draws * partition.non_salient().len()) as f64;
    for (r, acc) in sum_sq.iter().enumerate() {
        println!("row {r}: Δ/2 = {:.5}, empirical std = {:.5}", delta[r] / 2.0, (acc / n).sqrt());
    }
    Ok(())
}
