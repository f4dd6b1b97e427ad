//! Salient columns chosen by each metric preset on a freshly initialized
//! model, from activations of a random calibration batch.

use giftsw::model::{init_params, ModelConfig};
use giftsw::quantizer::{BitWidth, QuantSpec};
use giftsw::sensitivity::{calibrate, reselect, MetricConfig};
use giftsw::tensor::SeededRng;

fn main() -> giftsw::Result<()> {
    let cfg = ModelConfig {
        init_std: 0.2,
        ..ModelConfig::tiny(20)
    };
    let mut rng = SeededRng::new(1);
    let params = init_params(&cfg, &mut rng)?;
    let batch: Vec<Vec<usize>> = (0..16).map(|_| (0..32).map(|_| rng.below(20)).collect()).collect();
    let spec = QuantSpec::new(BitWidth::new(4)?);

    let first = calibrate(&params, &batch, &MetricConfig::default(), 4, Some(&spec))?;
    for preset in ["giftsw-default", "quik", "owq", "wanda"] {
        let metric = MetricConfig::preset(preset)?;
        let sel = reselect(&params, &first, &metric, 4, Some(&spec))?;
        println!("{preset:>15}: mlp.down {:?}  head {:?}", sel["blocks.0.mlp.down"].salient, sel["head"].salient);
    }
    Ok(())
}
