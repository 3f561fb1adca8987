//! Command-line interface. [`run`] executes a parsed command and writes its
//! human-readable output to the given writer.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fxpnet_core::data::Dataset;
use fxpnet_core::eval::Evaluator;
use fxpnet_core::finetune::{finetune, FinetuneConfig};
use fxpnet_core::net::{datapath_report, lenet};
use fxpnet_core::quantflow::{mode_sweep, part_scheme, run_flow, FlowConfig, FlowEvent};
use fxpnet_core::stats::{build_scheme, profile_activations, PartBits, DEFAULT_PROFILE_IMAGES};
use fxpnet_core::train::{train_float, TrainConfig};
use fxpnet_core::{Model, Part, QuantScheme, SchemeMode};

use crate::dataio::{load_mnist, Split};
use crate::error::{Error, Result};
use crate::modelio::netdef::META_FINAL_LR;
use crate::modelio::report::{self, RECHECK_POLICY};
use crate::modelio::{load_params, profile_sha256, profile_to_text, save_params, NetDef, Provenance, SchemeFile};
use crate::parallel::ParallelEvaluator;

/// Metadata key for the float test accuracy recorded by `train`.
pub const META_BASELINE: &str = "baseline_accuracy";

#[derive(Debug, Parser)]
#[command(name = "fxpnet", version, about = "Condense CNNs to dynamic fixed point")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a float network on MNIST.
    Train(TrainArgs),
    /// Search per-part bit widths under an accuracy budget.
    Quantize(QuantizeArgs),
    /// Write a scheme for fixed per-part bit widths.
    Scheme(SchemeArgs),
    /// Measure top-1 accuracy in float or fixed point.
    Eval(EvalArgs),
    /// Fine-tune a fixed-point network with shadow weights.
    Finetune(FinetuneArgs),
    /// Print the MAC datapath bit widths implied by a scheme.
    ReportDatapath(DatapathArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory holding the four MNIST IDX files.
    #[arg(long, default_value = "data/mnist")]
    pub data: PathBuf,
    /// Evaluation threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub netdef: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Network definition; the built-in LeNet when omitted.
    #[arg(long)]
    pub netdef: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out_netdef: PathBuf,
    #[arg(long)]
    pub out_params: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lr_decay: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Train on the first N training images only.
    #[arg(long)]
    pub train_images: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Dynamic,
    Static,
}

impl From<ModeArg> for SchemeMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Dynamic => SchemeMode::Dynamic,
            ModeArg::Static => SchemeMode::Static,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PartArg {
    ConvWeights,
    FcWeights,
    LayerOutputs,
}

impl From<PartArg> for Part {
    fn from(p: PartArg) -> Self {
        match p {
            PartArg::ConvWeights => Part::ConvWeights,
            PartArg::FcWeights => Part::FcWeights,
            PartArg::LayerOutputs => Part::LayerOutputs,
        }
    }
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Largest accepted top-1 drop in percentage points.
    #[arg(long, default_value_t = 1.0)]
    pub tolerance: f64,
    #[arg(long, value_enum, default_value = "dynamic")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 2)]
    pub b_lo: u32,
    #[arg(long, default_value_t = 16)]
    pub b_hi: u32,
    /// Test images used to score search probes (the combined check uses all).
    #[arg(long, default_value_t = 2000)]
    pub calib_images: usize,
    /// Training images run through the float network to profile ranges.
    #[arg(long, default_value_t = DEFAULT_PROFILE_IMAGES)]
    pub profile_images: usize,
    #[arg(long)]
    pub out_scheme: PathBuf,
    /// Write the machine-readable flow report (JSON).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write the range profile.
    #[arg(long)]
    pub profile_out: Option<PathBuf>,
    /// Write a static-vs-dynamic accuracy table (CSV) over `--sweep-bits`.
    #[arg(long)]
    pub sweep: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "16,12,10,8,6,4")]
    pub sweep_bits: Vec<u32>,
    /// Recorded in the report; the flow itself is deterministic.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SchemeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub conv_bits: u32,
    #[arg(long)]
    pub fc_bits: u32,
    #[arg(long)]
    pub output_bits: u32,
    #[arg(long, value_enum, default_value = "dynamic")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = DEFAULT_PROFILE_IMAGES)]
    pub profile_images: usize,
    #[arg(long)]
    pub out_scheme: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Evaluate under this scheme file.
    #[arg(long, conflicts_with_all = ["bits", "part"])]
    pub scheme: Option<PathBuf>,
    /// Quantize at this bit width, with fractional lengths from profiling.
    #[arg(long)]
    pub bits: Option<u32>,
    /// With `--bits`: quantize only this part, the rest stays float.
    #[arg(long, value_enum, requires = "bits")]
    pub part: Option<PartArg>,
    #[arg(long, value_enum, default_value = "dynamic")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = DEFAULT_PROFILE_IMAGES)]
    pub profile_images: usize,
    /// Use the first N test images only.
    #[arg(long)]
    pub images: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub scheme: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub iterations: usize,
    /// Adam step size; defaults to a tenth of the training run's final rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 100)]
    pub validate_every: usize,
    /// Validate on the first N test images (default: all).
    #[arg(long)]
    pub val_images: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out_params: PathBuf,
    /// Write the validation history (CSV).
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DatapathArgs {
    /// Network definition; the built-in LeNet when omitted.
    #[arg(long)]
    pub netdef: Option<PathBuf>,
    /// Take bit widths from this scheme file.
    #[arg(long, conflicts_with_all = ["output_bits", "weight_bits"])]
    pub scheme: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub output_bits: u32,
    #[arg(long, default_value_t = 8)]
    pub weight_bits: u32,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

macro_rules! say {
    ($out:expr, $($arg:tt)*) => {
        writeln!($out, $($arg)*).map_err(|e| Error::io("<output>", e))?
    };
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Quantize(a) => cmd_quantize(&a, out),
        Command::Scheme(a) => cmd_scheme(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Finetune(a) => cmd_finetune(&a, out),
        Command::ReportDatapath(a) => cmd_report_datapath(&a, out),
    }
}

pub fn load_model(args: &ModelArgs) -> Result<(NetDef, Model)> {
    let def = NetDef::load(&args.netdef)?;
    let mut model = def.model()?;
    load_params(&mut model, &args.params)?;
    Ok((def, model))
}

fn load_split(dir: &Path, split: Split, def: &NetDef, limit: Option<usize>) -> Result<Dataset> {
    let data = load_mnist(dir, split, def.normalization()?)?;
    if data.sample_shape() != def.input_shape {
        return Err(Error::Usage(format!(
            "images are {:?} but the network expects {:?}",
            data.sample_shape(),
            def.input_shape
        )));
    }
    Ok(match limit {
        Some(n) => data.head(n)?,
        None => data,
    })
}

fn positive(name: &str, v: usize) -> Result<usize> {
    if v == 0 {
        return Err(Error::Usage(format!("--{name} must be positive")));
    }
    Ok(v)
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut def = match &a.netdef {
        Some(p) => NetDef::load(p)?,
        None => {
            let mut d = NetDef::from_model(&lenet());
            d.set_normalization(Default::default());
            d
        }
    };
    positive("batch-size", a.batch_size)?;
    let train = load_split(&a.data.data, Split::Train, &def, a.train_images)?;
    let test = load_split(&a.data.data, Split::Test, &def, None)?;
    let mut model = def.model()?;
    model.init_params(a.seed);
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        base_lr: a.lr,
        lr_decay: a.lr_decay,
        weight_decay: a.weight_decay,
        seed: a.seed,
        ..Default::default()
    };
    say!(out, "seed {}", a.seed);
    say!(out, "training on {} images, testing on {}", train.len(), test.len());
    let started = Instant::now();
    let mut lines = Vec::new();
    let report = train_float(&mut model, &train, &cfg, &mut |e| {
        let line = format!(
            "epoch {}/{} lr {:.3e} loss {:.4} ({:.0}s)",
            e.epoch + 1,
            cfg.epochs,
            e.lr,
            e.mean_loss,
            started.elapsed().as_secs_f64()
        );
        eprintln!("{line}");
        lines.push(line);
    })?;
    for l in lines {
        say!(out, "{l}");
    }
    let accuracy = ParallelEvaluator::new(&test, a.data.threads)?.accuracy(&model, None)?;
    say!(out, "test_accuracy {accuracy:.2}");
    say!(out, "train_seconds {:.1}", started.elapsed().as_secs_f64());
    def.set_meta(META_FINAL_LR, report.final_lr);
    def.set_meta(META_BASELINE, accuracy);
    def.save(&a.out_netdef)?;
    save_params(&model, &a.out_params)?;
    Ok(())
}

pub fn cmd_quantize(a: &QuantizeArgs, out: &mut dyn Write) -> Result<()> {
    let (def, model) = load_model(&a.model)?;
    let test = load_split(&a.data.data, Split::Test, &def, None)?;
    let calib = test.head(positive("calib-images", a.calib_images)?)?;
    let profile_data = load_split(&a.data.data, Split::Train, &def, None)?;
    let cfg = FlowConfig {
        max_accuracy_drop: a.tolerance,
        b_lo: a.b_lo,
        b_hi: a.b_hi,
        mode: a.mode.into(),
        profile_images: positive("profile-images", a.profile_images)?,
        ..Default::default()
    };
    let mut calib_eval = ParallelEvaluator::new(&calib, a.data.threads)?;
    let mut val_eval = ParallelEvaluator::new(&test, a.data.threads)?;
    say!(out, "seed {}", a.seed);
    let mut events = Vec::new();
    let outcome = run_flow(&model, &profile_data, &mut calib_eval, &mut val_eval, &cfg, &mut |e| {
        events.push(*e)
    })?;
    for e in &events {
        match e {
            FlowEvent::Baseline { calibration, validation } => {
                say!(out, "baseline calibration {calibration:.2} validation {validation:.2}")
            }
            FlowEvent::Profiled { samples } => say!(out, "profiled {samples} images"),
            FlowEvent::Probe { part, bits, accuracy } => say!(
                out,
                "probe {} {bits} {accuracy:.2}",
                part.map_or("shared", |p| p.name())
            ),
            FlowEvent::Recheck(r) => say!(
                out,
                "combined {}/{}/{} {:.2}",
                r.bits.conv_weights,
                r.bits.fc_weights,
                r.bits.layer_outputs,
                r.accuracy
            ),
        }
    }
    let b = outcome.scheme.bits;
    say!(
        out,
        "chosen conv_weights {} fc_weights {} layer_outputs {}",
        b.conv_weights,
        b.fc_weights,
        b.layer_outputs
    );
    say!(out, "combined_accuracy {:.2}", outcome.combined_accuracy);
    say!(out, "probes {}", outcome.probe_count());

    let mut file = SchemeFile::new(outcome.scheme.clone());
    file.provenance = Provenance {
        profile_sha256: Some(profile_sha256(&outcome.profile)),
        budget: Some(a.tolerance),
        traces: outcome
            .searches
            .iter()
            .map(|s| (s.part.map_or("shared", |p| p.name()).to_string(), s.trace.clone()))
            .collect(),
        notes: if outcome.rechecks.len() > 1 { vec![RECHECK_POLICY.into()] } else { vec![] },
    };
    file.save(&a.out_scheme)?;
    if let Some(p) = &a.report {
        report::write_json(p, &report::flow_report(&outcome, a.seed))?;
    }
    if let Some(p) = &a.profile_out {
        crate::modelio::write_bytes(p, profile_to_text(&outcome.profile))?;
    }
    if let Some(p) = &a.sweep {
        let rows = mode_sweep(&model, &outcome.profile, &a.sweep_bits, &mut val_eval)?;
        for r in &rows {
            say!(out, "sweep {} static {:.2} dynamic {:.2}", r.bits, r.static_accuracy, r.dynamic_accuracy);
        }
        report::write_sweep_csv(p, &rows)?;
    }
    if outcome.unmeetable {
        say!(out, "budget unmeetable");
        return Err(Error::Unmeetable(format!(
            "combined accuracy {:.2} is below {:.2} - {}",
            outcome.combined_accuracy, outcome.validation_baseline, a.tolerance
        )));
    }
    Ok(())
}

/// Scheme for `--bits` (and optionally `--part`) with fractional lengths
/// profiled on the first `profile_images` training images.
pub fn scheme_for_bits(
    model: &Model,
    profile_data: &Dataset,
    profile_images: usize,
    bits: u32,
    part: Option<Part>,
    mode: SchemeMode,
) -> Result<QuantScheme> {
    let profile = profile_activations(model, profile_data, profile_images, 100)?;
    Ok(match part {
        Some(p) if mode == SchemeMode::Dynamic => part_scheme(&profile, p, bits)?,
        Some(p) => build_scheme(&profile, PartBits::uniform(bits), mode)?.restricted_to(fxpnet_core::PartSet::only(p)),
        None => build_scheme(&profile, PartBits::uniform(bits), mode)?,
    })
}

pub fn cmd_scheme(a: &SchemeArgs, out: &mut dyn Write) -> Result<()> {
    let (def, model) = load_model(&a.model)?;
    let train = load_split(&a.data.data, Split::Train, &def, None)?;
    let profile = profile_activations(&model, &train, positive("profile-images", a.profile_images)?, 100)?;
    let bits = PartBits {
        conv_weights: a.conv_bits,
        fc_weights: a.fc_bits,
        layer_outputs: a.output_bits,
    };
    let scheme = build_scheme(&profile, bits, a.mode.into())?;
    let mut file = SchemeFile::new(scheme);
    file.provenance.profile_sha256 = Some(profile_sha256(&profile));
    file.save(&a.out_scheme)?;
    say!(out, "input_fl {}", file.scheme.input_frac_len);
    for l in &file.scheme.layers {
        say!(out, "layer {} weight_fl {} output_fl {}", l.name, l.weight, l.output);
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let (def, model) = load_model(&a.model)?;
    let test = load_split(&a.data.data, Split::Test, &def, a.images)?;
    let scheme = match (&a.scheme, a.bits) {
        (Some(p), _) => Some(SchemeFile::load_for(p, &model)?.scheme),
        (None, Some(b)) => {
            let train = load_split(&a.data.data, Split::Train, &def, None)?;
            Some(scheme_for_bits(&model, &train, a.profile_images, b, a.part.map(Into::into), a.mode.into())?)
        }
        (None, None) => None,
    };
    let accuracy = ParallelEvaluator::new(&test, a.data.threads)?.accuracy(&model, scheme.as_ref())?;
    match &scheme {
        Some(s) => say!(
            out,
            "scheme {} bits {}/{}/{} parts {}",
            s.mode.name(),
            s.bits.conv_weights,
            s.bits.fc_weights,
            s.bits.layer_outputs,
            s.parts.iter().map(|p| p.name()).collect::<Vec<_>>().join(",")
        ),
        None => say!(out, "scheme float"),
    }
    say!(out, "images {}", test.len());
    say!(out, "accuracy {accuracy:.2}");
    Ok(())
}

pub fn cmd_finetune(a: &FinetuneArgs, out: &mut dyn Write) -> Result<()> {
    let (def, model) = load_model(&a.model)?;
    let scheme = SchemeFile::load_for(&a.scheme, &model)?.scheme;
    let lr = match (a.lr, def.meta_f64(META_FINAL_LR)?) {
        (Some(lr), _) => lr,
        (None, Some(final_lr)) => FinetuneConfig::from_baseline_lr(final_lr).learning_rate,
        (None, None) => {
            return Err(Error::Usage(format!(
                "no --lr given and the network definition has no `{META_FINAL_LR}`"
            )))
        }
    };
    let train = load_split(&a.data.data, Split::Train, &def, None)?;
    let val = load_split(&a.data.data, Split::Test, &def, a.val_images)?;
    let cfg = FinetuneConfig {
        learning_rate: lr,
        iterations: a.iterations,
        batch_size: positive("batch-size", a.batch_size)?,
        validate_every: positive("validate-every", a.validate_every)?,
        seed: a.seed,
        ..Default::default()
    };
    say!(out, "seed {}", a.seed);
    say!(out, "learning_rate {lr:e}");
    let mut evaluator = ParallelEvaluator::new(&val, a.data.threads)?;
    let started = Instant::now();
    let outcome = finetune(&model, &scheme, &train, &mut evaluator, &cfg, &mut |h| {
        eprintln!(
            "iteration {} loss {} val_accuracy {:.2} ({:.0}s)",
            h.iteration,
            h.train_loss.map_or_else(|| "-".into(), |l| format!("{l:.4}")),
            h.val_accuracy,
            started.elapsed().as_secs_f64()
        )
    })?;
    let h = &outcome.history;
    for e in &h.entries {
        say!(out, "iteration {} val_accuracy {:.2}", e.iteration, e.val_accuracy);
    }
    say!(
        out,
        "before {:.2} after {:.2}",
        h.initial_accuracy().unwrap_or(f64::NAN),
        h.final_accuracy().unwrap_or(f64::NAN)
    );
    say!(out, "finetune_seconds {:.1}", started.elapsed().as_secs_f64());
    save_params(&outcome.model, &a.out_params)?;
    if let Some(p) = &a.history {
        report::write_history_csv(p, &h.entries)?;
    }
    Ok(())
}

pub fn cmd_report_datapath(a: &DatapathArgs, out: &mut dyn Write) -> Result<()> {
    let model = match &a.netdef {
        Some(p) => NetDef::load(p)?.model()?,
        None => lenet(),
    };
    let scheme = match &a.scheme {
        Some(p) => SchemeFile::load_for(p, &model)?.scheme,
        None => {
            let mut s = QuantScheme {
                mode: SchemeMode::Dynamic,
                bits: PartBits {
                    conv_weights: a.weight_bits,
                    fc_weights: a.weight_bits,
                    layer_outputs: a.output_bits,
                },
                parts: fxpnet_core::PartSet::ALL,
                input_frac_len: 0,
                layers: Vec::new(),
            };
            s.layers = model
                .quantizable_layers()
                .map(|(_, l)| fxpnet_core::stats::LayerFracLens { name: l.name.clone(), weight: 0, output: 0 })
                .collect();
            s
        }
    };
    let rep = datapath_report(&model, &scheme)?;
    say!(out, "{:<12} {:>3} {:>3} {:>7} {:>7} {:>5} {:>5}  adder levels", "layer", "m", "n", "x", "product", "acc", "bias");
    for r in &rep.rows {
        let levels: Vec<String> = r.adder_level_widths.iter().map(u32::to_string).collect();
        say!(
            out,
            "{:<12} {:>3} {:>3} {:>7} {:>7} {:>5} {:>5}  {}",
            r.layer,
            r.m,
            r.n,
            r.x,
            r.product_width,
            r.accumulator_width,
            r.bias_stage_width,
            levels.join(" ")
        );
    }
    if let Some(p) = &a.json {
        report::write_json(p, &report::datapath_json(&rep))?;
    }
    Ok(())
}
