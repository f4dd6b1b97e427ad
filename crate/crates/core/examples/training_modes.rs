//! Fine-tunes a briefly pretrained model on modular addition in every
//! training mode, then checks that salient-only modes left the frozen
//! columns bit-identical.

use std::collections::BTreeMap;
use std::path::Path;

use giftsw::model::{is_eligible, ParamSet};
use giftsw::pipeline::{finetune, ingest_corpus, prepare_with_base, pretrain, select_for_bits, ExperimentSpec, TaskSpec};
use giftsw::quantizer::BitWidth;
use giftsw::sensitivity::partitions_of;
use giftsw::trainer::TrainMode;

fn frozen_unchanged(before: &ParamSet, after: &ParamSet, parts: &BTreeMap<String, giftsw::partition::SalientPartition>) -> bool {
    before.iter().filter(|(n, _)| is_eligible(n)).all(|(name, w)| {
        let a = after.get(name).unwrap();
        let cols = parts[name].non_salient();
        w.select_columns(cols).to_le_bytes() == a.select_columns(cols).to_le_bytes()
    })
}

fn main() -> giftsw::Result<()> {
    let mut spec = ExperimentSpec {
        task: TaskSpec::ModularArithmetic { modulus: 11, seq_len: 8 },
        ..ExperimentSpec::default()
    };
    spec.model.context_length = 8;
    spec.pretrain.steps = 400;
    spec.train.steps = 150;
    spec.train.eval_every = 0;

    let data = ingest_corpus(&spec.task, spec.model.context_length, 32, spec.seed, Path::new("."))?;
    let eval = data.eval.sequential(spec.eval_sequences);
    let (base, _) = pretrain(&spec, &data, &eval)?;
    let prepared = prepare_with_base(&spec, data, base, Default::default())?;
    println!("base: loss {:.4} acc {:.4}", prepared.reference.eval_loss, prepared.reference.eval_accuracy);

    let bits = BitWidth::new(4)?;
    let parts = partitions_of(&select_for_bits(&spec, &prepared.base, &prepared.stats, bits)?)?;
    for mode in [TrainMode::Giftsw, TrainMode::SalientFt, TrainMode::FullFt, TrainMode::FullFtNoise, TrainMode::Ste] {
        let ft = finetune(&spec, &prepared, prepared.base.clone(), &parts, mode, bits, 0)?;
        let last = ft.log.evals.last().expect("final eval");
        println!(
            "{:<14} loss {:.4} acc {:.4} frozen columns intact: {}",
            mode.name(),
            last.eval_loss,
            last.eval_accuracy,
            frozen_unchanged(&prepared.base, &ft.params, &parts)
        );
    }
    Ok(())
}
