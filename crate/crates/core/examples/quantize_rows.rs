//! Per-row scale search, integer codes, and a mixed-precision layer that
//! keeps a few columns in full precision.

use giftsw::partition::SalientPartition;
use giftsw::quantizer::{quant_error, quantize_dequantize, quantize_layer, search_scale, BitWidth, QuantSpec};
use giftsw::tensor::{sample_gaussian, SeededRng};

fn main() -> giftsw::Result<()> {
    let row = [0.9, -0.31, 0.07, 0.44, -1.2, 0.02];
    for bits in BitWidth::SUPPORTED {
        let bits = BitWidth::new(bits)?;
        let s = search_scale(&row, bits, 100)?;
        println!("{bits}-bit: alpha {:.4} delta {:.5} mse {:.3e}", s.alpha, s.delta, s.error);
    }

    let mut rng = SeededRng::new(7);
    let mut w = sample_gaussian(&[8, 16], &mut rng);
    // two outlier input channels
    for r in 0..8 {
        w.set(r, 3, 6.0 * w.get(r, 3));
        w.set(r, 11, -5.0 * w.get(r, 11).abs());
    }
    let spec = QuantSpec::new(BitWidth::new(3)?);
    let plain = quantize_dequantize(&w, &spec)?;
    let mixed = quantize_layer(&w, &SalientPartition::new(16, vec![3, 11])?, &spec)?;
    println!("3-bit error, all columns quantized: {:.4}", quant_error(&w, &plain)?);
    println!("3-bit error, columns 3 and 11 kept:  {:.4}", quant_error(&w, &mixed.reconstruct()?)?);
    println!("first row codes: {:?}", mixed.w_int.row(0));
    Ok(())
}
