use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use giftsw::model::ParamSet;
use giftsw::pipeline::{
    self, emit_report, finetune, load_report, prepare_with_base, quantize_model, select_for_bits, write_prepared,
    ExperimentSpec, Prepared, ReportFormat,
};
use giftsw::quantizer::{save_quantized, BitWidth, QuantSpec};
use giftsw::sensitivity::{partitions_of, ActivationStats, LayerSelection, MetricConfig};
use giftsw::trainer::{evaluate, MetricsLog, TrainMode};
use giftsw::{Error, Result};

/// Salient-column fine-tuning with quantization-noise injection on a tiny
/// decoder. Every artifact lands under --out-dir.
#[derive(Parser)]
#[command(name = "giftsw", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize the task and write the vocabulary and split sizes.
    Ingest(Common),
    /// Pretrain (or reuse) the base model and collect activation statistics.
    Calibrate(Common),
    /// Rank columns and choose the salient set for one bit-width.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        quant_bits: Option<u32>,
    },
    /// Quantize the base model's non-salient columns and evaluate it.
    Quantize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        quant_bits: Option<u32>,
    },
    /// Fine-tune the base model once per listed seed.
    Train {
        #[command(flatten)]
        common: Common,
        /// giftsw, salient_ft, full_ft, full_ft_noise or ste.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Run every (regime, bits, seed) cell and write the report.
    Sweep(Common),
    /// Evaluate a saved parameter directory on the held-out split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory holding params.archive and model.json (default: base model).
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Re-emit or print a finished sweep's report.
    Report {
        #[arg(long)]
        out_dir: PathBuf,
        /// csv, json, or omit for a table on stdout.
        #[arg(long)]
        format: Option<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment spec; flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    /// Comma-separated bit-widths, e.g. 2,4.
    #[arg(long, value_delimiter = ',')]
    bits: Option<Vec<u32>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    regimes: Option<Vec<String>>,
    /// Metric preset: giftsw-default, quik, owq or wanda.
    #[arg(long)]
    metric: Option<String>,
    /// Fine-tuning steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    pretrain_steps: Option<usize>,
    #[arg(long)]
    peak_lr: Option<f64>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.spec {
            Some(path) => ExperimentSpec::load(path)?,
            None => ExperimentSpec::default(),
        };
        if let Some(seed) = self.seed {
            spec.seed = seed;
        }
        if let Some(k) = self.k {
            spec.k = k;
        }
        if let Some(bits) = &self.bits {
            spec.bits = bits.iter().map(|&b| BitWidth::new(b)).collect::<Result<_>>()?;
        }
        if let Some(seeds) = &self.seeds {
            spec.seeds = seeds.clone();
        }
        if let Some(regimes) = &self.regimes {
            spec.regimes = regimes.iter().map(|r| r.parse()).collect::<Result<_>>()?;
        }
        if let Some(metric) = &self.metric {
            spec.metric = MetricConfig::preset(metric)?;
        }
        if let Some(steps) = self.steps {
            spec.train.steps = steps;
        }
        if let Some(steps) = self.pretrain_steps {
            spec.pretrain.steps = steps;
        }
        if let Some(lr) = self.peak_lr {
            spec.train.peak_lr = lr;
        }
        spec.validate()?;
        Ok(spec)
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("--out-dir is required".into()))
    }

    /// `train` and `sweep` refuse to run without an explicit seed.
    fn require_seed(&self) -> Result<()> {
        match self.seed {
            Some(_) => Ok(()),
            None => Err(Error::InvalidConfig("--seed is required".into())),
        }
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Loads `out/base` if present, otherwise pretrains and saves it.
fn base(spec: &ExperimentSpec, out: &Path) -> Result<Prepared> {
    let dataset = pipeline::ingest(spec)?;
    let dir = out.join("base");
    if dir.join("params.archive").exists() {
        tracing::info!(dir = %dir.display(), "reusing base model");
        let params = ParamSet::load(&dir)?;
        return prepare_with_base(spec, dataset, params, MetricsLog::default());
    }
    tracing::info!("pretraining base model");
    let eval = dataset.eval.sequential(spec.eval_sequences);
    let (params, log) = pipeline::pretrain(spec, &dataset, &eval)?;
    let prepared = prepare_with_base(spec, dataset, params, log)?;
    write_prepared(spec, &prepared, out)?;
    Ok(prepared)
}

fn first_bits(spec: &ExperimentSpec, flag: Option<u32>) -> Result<BitWidth> {
    match flag {
        Some(b) => BitWidth::new(b),
        None => Ok(spec.bits[0]),
    }
}

fn selection(spec: &ExperimentSpec, prepared: &Prepared, bits: BitWidth, out: &Path) -> Result<std::collections::BTreeMap<String, LayerSelection>> {
    let sel = select_for_bits(spec, &prepared.base, &prepared.stats, bits)?;
    write_json(&out.join(format!("calibration/selection-b{}.json", bits.bits())), &sel)?;
    Ok(sel)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(common) => {
            let spec = common.resolve()?;
            let out = common.out_dir()?;
            let data = pipeline::ingest(&spec)?;
            write_json(&out.join("data/vocab.json"), &data.vocab)?;
            let summary = serde_json::json!({
                "vocab_size": data.vocab.len(),
                "train_tokens": data.train.tokens.len(),
                "eval_tokens": data.eval.tokens.len(),
                "calibration_sequences": data.calibration.len(),
            });
            write_json(&out.join("data/splits.json"), &summary)?;
            println!("{summary}");
        }
        Command::Calibrate(common) => {
            let spec = common.resolve()?;
            let out = common.out_dir()?;
            let prepared = base(&spec, out)?;
            write_json(&out.join("calibration/stats.json"), &prepared.stats)?;
            println!(
                "base eval loss {:.6}, {} layers calibrated",
                prepared.reference.eval_loss,
                prepared.stats.len()
            );
        }
        Command::Select { common, quant_bits } => {
            let spec = common.resolve()?;
            let out = common.out_dir()?;
            let mut prepared = base(&spec, out)?;
            let stats_path = out.join("calibration/stats.json");
            if stats_path.exists() {
                let text = std::fs::read_to_string(&stats_path).map_err(|e| Error::Io {
                    path: stats_path.clone(),
                    source: e,
                })?;
                prepared.stats = serde_json::from_str::<std::collections::BTreeMap<String, ActivationStats>>(&text)?;
            }
            let bits = first_bits(&spec, quant_bits)?;
            for (name, s) in selection(&spec, &prepared, bits, out)? {
                println!("{name}: {:?}", s.salient);
            }
        }
        Command::Quantize { common, quant_bits } => {
            let spec = common.resolve()?;
            let out = common.out_dir()?;
            let prepared = base(&spec, out)?;
            let bits = first_bits(&spec, quant_bits)?;
            let parts = partitions_of(&selection(&spec, &prepared, bits, out)?)?;
            let qspec = QuantSpec::new(bits).with_grid_points(spec.grid_points);
            let (params, layers) = quantize_model(&prepared.base, &parts, &qspec)?;
            let dir = out.join(format!("quantized/b{}", bits.bits()));
            std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
            params.save(&dir)?;
            save_quantized(&layers, &dir.join("quantized.archive"), &dir.join("quantized.json"))?;
            let rec = evaluate(&params, &prepared.eval_batch)?;
            println!(
                "{}-bit: eval loss {:.6} (unquantized {:.6}), accuracy {:.4}",
                bits,
                rec.eval_loss,
                prepared.reference.eval_loss,
                rec.eval_accuracy
            );
        }
        Command::Train { common, mode } => {
            common.require_seed()?;
            let spec = common.resolve()?;
            let out = common.out_dir()?;
            let mode: TrainMode = match mode {
                Some(m) => serde_json::from_value(serde_json::Value::String(m))?,
                None => spec.train.mode,
            };
            let prepared = base(&spec, out)?;
            let bits = spec.train.noise_bits;
            let parts = partitions_of(&selection(&spec, &prepared, bits, out)?)?;
            for &seed in &spec.seeds {
                let run_seed = pipeline::cell_seed(spec.seed, seed);
                let ft = finetune(&spec, &prepared, prepared.base.clone(), &parts, mode, bits, run_seed)?;
                let dir = out.join(format!("train/{}-s{seed}", mode.name()));
                std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
                ft.params.save(&dir)?;
                ft.log.write_jsonl(&dir.join("metrics.jsonl"))?;
                let last = ft.log.evals.last();
                println!(
                    "{} seed {seed}: eval loss {:.6}",
                    mode.name(),
                    last.map_or(f64::NAN, |e| e.eval_loss)
                );
            }
        }
        Command::Sweep(common) => {
            common.require_seed()?;
            let spec = common.resolve()?;
            let out = common.out_dir()?;
            let outcome = pipeline::sweep(&spec, Some(out))?;
            print_table(&outcome.report);
        }
        Command::Eval { common, params } => {
            let spec = common.resolve()?;
            let dir = match params {
                Some(p) => p,
                None => common.out_dir()?.join("base"),
            };
            let params = ParamSet::load(&dir)?;
            let data = pipeline::ingest(&spec)?;
            let rec = evaluate(&params, &data.eval.sequential(spec.eval_sequences))?;
            println!(
                "{}",
                serde_json::json!({"eval_loss": rec.eval_loss, "eval_accuracy": rec.eval_accuracy})
            );
        }
        Command::Report { out_dir, format, output } => {
            let report = load_report(&out_dir.join("report.json"))?;
            match format {
                None => print_table(&report),
                Some(f) => {
                    let format: ReportFormat = f.parse()?;
                    let ext = if format == ReportFormat::Csv { "csv" } else { "json" };
                    let path = output.unwrap_or_else(|| out_dir.join(format!("report.{ext}")));
                    emit_report(&report, format, &path)?;
                    println!("{}", path.display());
                }
            }
        }
    }
    Ok(())
}

fn print_table(report: &pipeline::EvalReport) {
    if let Some(r) = &report.reference {
        println!("unquantized: loss {:.4} acc {:.4}", r.eval_loss, r.eval_accuracy);
    }
    println!("{:<16} {:>4} {:>6} {:>10} {:>10} {:>8}", "regime", "bits", "seeds", "loss", "std", "acc");
    for a in &report.aggregates {
        println!(
            "{:<16} {:>4} {:>6} {:>10.4} {:>10.4} {:>8.4}",
            a.regime.name(),
            a.bits,
            a.n_seeds,
            a.eval_loss_mean.unwrap_or(f64::NAN),
            a.eval_loss_std.unwrap_or(0.0),
            a.eval_accuracy_mean.unwrap_or(f64::NAN)
        );
    }
    for c in report.cells.iter().filter(|c| c.reason.is_some()) {
        println!("failed {}: {}", c.id(), c.reason.as_deref().unwrap_or(""));
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
