//! Runs the four regimes on the bundled character corpus and prints the
//! per-regime mean eval loss.
//!
//! cargo run --release --example regime_sweep -- [spec.json] [out-dir]

use std::path::PathBuf;

use giftsw::pipeline::{sweep, ExperimentSpec};
use giftsw::quantizer::BitWidth;

fn main() -> giftsw::Result<()> {
    let mut args = std::env::args().skip(1);
    let spec = match args.next() {
        Some(path) => ExperimentSpec::load(&PathBuf::from(path))?,
        None => ExperimentSpec {
            bits: vec![BitWidth::new(2)?, BitWidth::new(4)?],
            ..ExperimentSpec::default()
        },
    };
    let out = args.next().map(PathBuf::from);
    let outcome = sweep(&spec, out.as_deref())?;
    let r = &outcome.report;
    if let Some(fp) = &r.reference {
        println!("unquantized base: loss {:.4}  acc {:.4}", fp.eval_loss, fp.eval_accuracy);
    }
    println!("{:<16} {:>4} {:>10} {:>10} {:>10} {:>10}", "regime", "bits", "loss", "± std", "acc", "trainable");
    for a in &r.aggregates {
        println!(
            "{:<16} {:>4} {:>10.4} {:>10.4} {:>10.4} {:>10}",
            a.regime.name(),
            a.bits,
            a.eval_loss_mean.unwrap_or(f64::NAN),
            a.eval_loss_std.unwrap_or(0.0),
            a.eval_accuracy_mean.unwrap_or(f64::NAN),
            a.trainable_param_count
        );
    }
    println!("prepare {:.1}s, cells {:.1}s", outcome.timings.prepare_seconds, outcome.timings.cells.values().sum::<f64>());
    Ok(())
}
