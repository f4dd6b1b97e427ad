//! Linear warmup then cosine decay.

use giftsw::trainer::{lr_at, TrainConfig};

fn main() -> giftsw::Result<()> {
    let cfg = TrainConfig {
        steps: 100,
        warmup_ratio: 0.1,
        peak_lr: 1e-3,
        ..TrainConfig::default()
    };
    for t in (0..=100).step_by(10) {
        let lr = lr_at(t, &cfg)?;
        println!("{t:>4} {lr:.6} {}", "#".repeat((lr / cfg.peak_lr * 40.0).round() as usize));
    }
    Ok(())
}
