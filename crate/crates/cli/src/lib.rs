//! The `tlq` command-line driver: fixtures, calibration, quantization,
//! evaluation, distributed runs and exports.

pub mod config;
pub mod eval;
pub mod fixtures;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use tlq_core::calibration::{baseline_result, calibrate, quantize_with_result, CalibrationResult, Method};
use tlq_core::distcal::{distributed_calibrate, DistConfig, MemoryReport};
use tlq_core::importance::{heatmap, HeatmapOptions, DEFAULT_FRACTION};
use tlq_core::model::{backward_token_grads, read_checkpoint, CalibSet, LayerStack, ProxyLoss};
use tlq_core::{Scalar, Tensor};

use config::{calib_config, input_path, pick, require, transport, usage, CalibOptions, FileConfig, Precision, Preset};
use fixtures::{check_fixture, generate_calib, generate_model, CalibFixture, ModelFixture};

#[derive(Debug, Parser)]
#[command(
    name = "tlq",
    version,
    about = "Token-level importance calibration for post-training quantization"
)]
pub struct Cli {
    /// TOML file supplying defaults for any flag; flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic checkpoint with planted outlier channels.
    GenModel(GenModelArgs),
    /// Generate a calibration set for a generated model.
    GenCalib(GenCalibArgs),
    /// Calibrate smoothing scales in a single context.
    Calibrate(CalibrateArgs),
    /// Calibrate with role-split workers and write a memory report.
    DistCalibrate(DistCalibrateArgs),
    /// Fuse scales and quantize weights into an artifact.
    Quantize(QuantizeArgs),
    /// Evaluate a calibration result on a calibration set.
    Eval(EvalArgs),
    /// Export token-gradient heatmaps before and after Top-K selection.
    Heatmap(HeatmapArgs),
    /// Summarize result, memory and eval files as text.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub outlier_fraction: Option<f64>,
    #[arg(long)]
    pub outlier_gain: Option<f64>,
    /// Ordinary channels paired into the first layer's null space.
    #[arg(long)]
    pub null_channels: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub bias: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenCalibArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Companion model whose first layer defines the visual directions.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub tokens: Option<usize>,
    #[arg(long)]
    pub visual_fraction: Option<f64>,
    #[arg(long)]
    pub redundancy: Option<f64>,
    #[arg(long)]
    pub visual_magnitude: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// rtn, sq or tlq.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub bits_w: Option<u32>,
    #[arg(long)]
    pub bits_a: Option<u32>,
    /// none, passact1 or passact2.
    #[arg(long)]
    pub strategy: Option<String>,
    /// mean, max or topk.
    #[arg(long)]
    pub stat_mode: Option<String>,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub grid_start: Option<f64>,
    #[arg(long)]
    pub grid_stop: Option<f64>,
    #[arg(long)]
    pub grid_step: Option<f64>,
    /// f64 or f32.
    #[arg(long)]
    pub precision: Option<String>,
}

impl CalibrateArgs {
    fn options(&self) -> CalibOptions {
        CalibOptions {
            preset: self.preset.clone(),
            bits_w: self.bits_w,
            bits_a: self.bits_a,
            strategy: self.strategy.clone(),
            stat_mode: self.stat_mode.clone(),
            fraction: self.fraction,
            grid_start: self.grid_start,
            grid_stop: self.grid_stop,
            grid_step: self.grid_step,
        }
    }
}

#[derive(Debug, Args)]
pub struct DistCalibrateArgs {
    #[command(flatten)]
    pub calibrate: CalibrateArgs,
    #[arg(long)]
    pub workers: Option<usize>,
    /// channel or tcp.
    #[arg(long)]
    pub transport: Option<String>,
    #[arg(long)]
    pub timeout_ms: Option<u64>,
    #[arg(long)]
    pub overhead_coeff: Option<f64>,
    #[arg(long)]
    pub memory_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub result: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub precision: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub result: Option<PathBuf>,
    /// Evaluation set; without it a fresh set is generated from `--seed`.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub tokens: Option<usize>,
    #[arg(long)]
    pub visual_fraction: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub precision: Option<String>,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// Index into the layer stack; gradients are taken at this layer's input.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub token_budget: Option<usize>,
    #[arg(long)]
    pub channel_budget: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub result: Option<PathBuf>,
    #[arg(long)]
    pub memory: Option<PathBuf>,
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Writes through a temporary sibling so readers never see partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn load_model<T: Scalar>(path: &Path) -> Result<LayerStack<T>> {
    let m = read_checkpoint::<f64>(path).with_context(|| format!("reading model {}", path.display()))?;
    Ok(m.cast())
}

fn load_calib<T: Scalar>(path: &Path) -> Result<CalibSet<T>> {
    let c = CalibSet::<f64>::read(path).with_context(|| format!("reading calibration set {}", path.display()))?;
    Ok(c.cast())
}

fn gen_model(a: GenModelArgs, file: &FileConfig, out: &mut dyn Write) -> Result<()> {
    let d = ModelFixture::default();
    let spec = ModelFixture {
        seed: pick(a.seed, &file.seed).unwrap_or(d.seed),
        depth: pick(a.depth, &file.depth).unwrap_or(d.depth),
        channels: pick(a.channels, &file.channels).unwrap_or(d.channels),
        outlier_fraction: pick(a.outlier_fraction, &file.outlier_fraction).unwrap_or(d.outlier_fraction),
        outlier_gain: pick(a.outlier_gain, &file.outlier_gain).unwrap_or(d.outlier_gain),
        null_channels: pick(a.null_channels, &file.null_channels).unwrap_or(d.null_channels),
        bias: pick(a.bias, &file.bias).unwrap_or(d.bias),
    };
    let path = require(pick(a.out, &file.out), "out")?;
    if spec.depth == 0 {
        return Err(usage("depth must be at least 1"));
    }
    let model = generate_model(&spec).map_err(|e| usage(e.to_string()))?;
    let bytes = tlq_core::model::save_checkpoint(&model)?;
    write_atomic(&path, &bytes)?;
    writeln!(out, "wrote model with {} layers to {}", model.len(), path.display())?;
    Ok(())
}

fn gen_calib(a: GenCalibArgs, file: &FileConfig, out: &mut dyn Write) -> Result<()> {
    let d = CalibFixture::default();
    let spec = CalibFixture {
        seed: pick(a.seed, &file.seed).unwrap_or(d.seed),
        batch: pick(a.batch, &file.batch).unwrap_or(d.batch),
        tokens: pick(a.tokens, &file.tokens).unwrap_or(d.tokens),
        visual_fraction: pick(a.visual_fraction, &file.visual_fraction).unwrap_or(d.visual_fraction),
        redundancy: pick(a.redundancy, &file.redundancy).unwrap_or(d.redundancy),
        visual_magnitude: pick(a.visual_magnitude, &file.visual_magnitude).unwrap_or(d.visual_magnitude),
    };
    if !(0.0..=1.0).contains(&spec.visual_fraction) {
        return Err(usage("visual_fraction must be in [0, 1]"));
    }
    let model_path = input_path(pick(a.model, &file.model), "model")?;
    let path = require(pick(a.out, &file.out), "out")?;
    let model = load_model::<f64>(&model_path)?;
    let calib = generate_calib(&spec, &model)?;
    write_atomic(&path, &calib.to_bytes()?)?;
    let chk = check_fixture(&model, &calib)?;
    writeln!(
        out,
        "wrote {}×{}×{} calibration set to {} (visual {:.2}, outlier ratio {:.1}, visual/text gradient {:.2e})",
        calib.batch(),
        calib.tokens(),
        calib.channels(),
        path.display(),
        calib.visual_fraction(),
        chk.outlier_absmax_ratio,
        chk.visual_text_grad_ratio
    )?;
    Ok(())
}

struct CalibInputs {
    model: PathBuf,
    calib: PathBuf,
    out: PathBuf,
    precision: Precision,
    preset: Option<Preset>,
    cfg: tlq_core::calibration::CalibConfig,
}

fn calib_inputs(a: &CalibrateArgs, file: &FileConfig) -> Result<CalibInputs> {
    let (preset, cfg) = calib_config(&a.options(), file)?;
    Ok(CalibInputs {
        model: input_path(pick(a.model.clone(), &file.model), "model")?,
        calib: input_path(pick(a.calib.clone(), &file.calib), "calib")?,
        out: require(pick(a.out.clone(), &file.out), "out")?,
        precision: Precision::parse(pick(a.precision.clone(), &file.precision).as_deref())?,
        preset,
        cfg,
    })
}

fn run_calibrate<T: Scalar>(inp: &CalibInputs) -> Result<CalibrationResult> {
    let stack = load_model::<T>(&inp.model)?;
    let calib = load_calib::<T>(&inp.calib)?;
    Ok(match inp.preset {
        Some(Preset::Rtn) => baseline_result(&stack, &calib, Method::Rtn, &inp.cfg.scheme)?,
        Some(Preset::Sq) => baseline_result(&stack, &calib, Method::Sq, &inp.cfg.scheme)?,
        Some(Preset::Tlq) | None => calibrate(&stack, &calib, &inp.cfg)?,
    })
}

fn cmd_calibrate(a: CalibrateArgs, file: &FileConfig, out: &mut dyn Write) -> Result<()> {
    let inp = calib_inputs(&a, file)?;
    let result = match inp.precision {
        Precision::F64 => run_calibrate::<f64>(&inp)?,
        Precision::F32 => run_calibrate::<f32>(&inp)?,
    };
    write_atomic(&inp.out, result.to_json()?.as_bytes())?;
    writeln!(
        out,
        "calibrated {} linear layers → {}",
        result.layers.len(),
        inp.out.display()
    )?;
    Ok(())
}

fn run_dist<T: Scalar>(inp: &CalibInputs, dist: &DistConfig) -> Result<(CalibrationResult, MemoryReport)> {
    let stack = load_model::<T>(&inp.model)?;
    let calib = load_calib::<T>(&inp.calib)?;
    let o = distributed_calibrate(&stack, &calib, &inp.cfg, dist)?;
    Ok((o.result, o.report))
}

fn cmd_dist_calibrate(a: DistCalibrateArgs, file: &FileConfig, out: &mut dyn Write) -> Result<()> {
    let inp = calib_inputs(&a.calibrate, file)?;
    if matches!(inp.preset, Some(Preset::Rtn | Preset::Sq)) {
        return Err(usage(
            "dist-calibrate runs the grid search; presets rtn and sq have none",
        ));
    }
    let d = DistConfig::default();
    let dist = DistConfig {
        workers: pick(a.workers, &file.workers).unwrap_or(d.workers),
        transport: transport(a.transport, file)?,
        timeout: pick(a.timeout_ms, &file.timeout_ms).map_or(d.timeout, Duration::from_millis),
        overhead_coeff: pick(a.overhead_coeff, &file.overhead_coeff).unwrap_or(d.overhead_coeff),
        fault: None,
    };
    dist.validate()?;
    let memory_out = pick(a.memory_out, &file.memory_out);
    let (result, report) = match inp.precision {
        Precision::F64 => run_dist::<f64>(&inp, &dist)?,
        Precision::F32 => run_dist::<f32>(&inp, &dist)?,
    };
    write_atomic(&inp.out, result.to_json()?.as_bytes())?;
    if let Some(p) = &memory_out {
        write_atomic(p, report.to_json()?.as_bytes())?;
    }
    writeln!(
        out,
        "calibrated {} linear layers on {} workers → {}; peak {} B of baseline {} B ({:.1}%)",
        result.layers.len(),
        dist.workers,
        inp.out.display(),
        report.max_worker_peak_bytes,
        report.baseline_peak_bytes,
        100.0 * report.peak_ratio
    )?;
    Ok(())
}

fn cmd_quantize(a: QuantizeArgs, file: &FileConfig, out: &mut dyn Write) -> Result<()> {
    let model = input_path(pick(a.model, &file.model), "model")?;
    let result_path = input_path(pick(a.result, &file.result), "result")?;
    let path = require(pick(a.out, &file.out), "out")?;
    let result = CalibrationResult::read(&result_path)?;
    let bytes = match Precision::parse(pick(a.precision, &file.precision).as_deref())? {
        Precision::F64 => quantize_with_result(&load_model::<f64>(&model)?, &result)?.to_bytes()?,
        Precision::F32 => quantize_with_result(&load_model::<f32>(&model)?, &result)?.to_bytes()?,
    };
    write_atomic(&path, &bytes)?;
    writeln!(out, "wrote quantized artifact → {}", path.display())?;
    Ok(())
}

fn run_eval<T: Scalar>(model: &Path, result: &CalibrationResult, calib: &CalibSet<f64>) -> Result<eval::EvalReport> {
    Ok(eval::evaluate(&load_model::<T>(model)?, result, &calib.cast::<T>())?)
}

fn cmd_eval(a: EvalArgs, file: &FileConfig, out: &mut dyn Write) -> Result<()> {
    let model_path = input_path(pick(a.model, &file.model), "model")?;
    let result_path = input_path(pick(a.result, &file.result), "result")?;
    let result = CalibrationResult::read(&result_path)?;
    let calib = match pick(a.calib, &file.calib) {
        Some(p) => load_calib::<f64>(&input_path(Some(p), "calib")?)?,
        None => {
            let seed = require(pick(a.seed, &file.seed), "calib or seed")?;
            let d = CalibFixture::default();
            let spec = CalibFixture {
                seed,
                batch: pick(a.batch, &file.batch).unwrap_or(d.batch),
                tokens: pick(a.tokens, &file.tokens).unwrap_or(d.tokens),
                visual_fraction: pick(a.visual_fraction, &file.visual_fraction).unwrap_or(d.visual_fraction),
                redundancy: file.redundancy.unwrap_or(d.redundancy),
                visual_magnitude: file.visual_magnitude.unwrap_or(d.visual_magnitude),
            };
            generate_calib(&spec, &load_model::<f64>(&model_path)?)?
        }
    };
    let report = match Precision::parse(pick(a.precision, &file.precision).as_deref())? {
        Precision::F64 => run_eval::<f64>(&model_path, &result, &calib)?,
        Precision::F32 => run_eval::<f32>(&model_path, &result, &calib)?,
    };
    let text = report.to_json()?;
    match pick(a.out, &file.out) {
        Some(p) => {
            write_atomic(&p, text.as_bytes())?;
            writeln!(
                out,
                "gap {:.6e} (relative {:.4e}) → {}",
                report.end_to_end.gap,
                report.end_to_end.relative_gap,
                p.display()
            )?;
        }
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Per-sample FP gradients at the input of `layer`, stacked `B×N×C`.
pub fn layer_input_grads(stack: &LayerStack<f64>, calib: &CalibSet<f64>, layer: usize) -> Result<Tensor<f64>> {
    let per_sample = (0..calib.batch())
        .map(|b| {
            let loss = ProxyLoss::SumSqOutput.for_sample(b, calib.tokens());
            Ok(backward_token_grads(stack, &calib.sample(b)?, &loss)?
                .input_grad(layer)
                .clone())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&per_sample)?)
}

fn cmd_heatmap(a: HeatmapArgs, file: &FileConfig, out: &mut dyn Write) -> Result<()> {
    let stack = load_model::<f64>(&input_path(pick(a.model, &file.model), "model")?)?;
    let calib = load_calib::<f64>(&input_path(pick(a.calib, &file.calib), "calib")?)?;
    let layer = require(pick(a.layer, &file.layer), "layer")?;
    if layer >= stack.len() {
        return Err(usage(format!(
            "layer {layer} out of range (model has {} layers)",
            stack.len()
        )));
    }
    let dir = require(pick(a.out_dir, &file.out_dir), "out_dir")?;
    let opts = HeatmapOptions {
        fraction: pick(a.fraction, &file.fraction).unwrap_or(DEFAULT_FRACTION),
        token_budget: pick(a.token_budget, &file.token_budget),
        channel_budget: pick(a.channel_budget, &file.channel_budget),
        seed: pick(a.seed, &file.seed).unwrap_or(0),
    };
    let grads = layer_input_grads(&stack, &calib, layer)?;
    let hm = heatmap(&grads, calib.modality(), layer, &opts)?;
    write_atomic(&dir.join("heatmap_pre.csv"), hm.pre.to_csv()?.as_bytes())?;
    write_atomic(&dir.join("heatmap_post.csv"), hm.post.to_csv()?.as_bytes())?;
    let (pre, post) = hm.near_zero_fractions();
    writeln!(
        out,
        "layer {layer}: {} → {} rows, near-zero fraction {pre:.3} → {post:.3} → {}",
        hm.pre.rows.len(),
        hm.post.rows.len(),
        dir.display()
    )?;
    Ok(())
}

fn cmd_report(a: ReportArgs, file: &FileConfig, out: &mut dyn Write) -> Result<()> {
    let mut text = String::from("# tlq report v1\n");
    let result_path = pick(a.result, &file.result);
    if result_path.is_none() && a.memory.is_none() && a.eval.is_none() {
        return Err(usage("report needs at least one of --result, --memory, --eval"));
    }
    if let Some(p) = result_path {
        let r = CalibrationResult::read(&input_path(Some(p), "result")?)?;
        text.push_str(&format!(
            "\n## calibration\nmethod {}  strategy {}  stat {}  W{}A{}  scalar {}\n\n{:<12} {:>6} {:>14}\n",
            r.method.name(),
            r.strategy.name(),
            r.stat_mode.map_or("-", |s| s.name()),
            r.scheme.weights.bits,
            r.scheme.activations.bits,
            r.scalar,
            "layer",
            "ratio",
            "loss"
        ));
        for l in &r.layers {
            let ratio = l.ratio.map_or("-".to_string(), |v| format!("{v:.2}"));
            text.push_str(&format!("{:<12} {:>6} {:>14.6e}\n", l.name, ratio, l.loss));
        }
    }
    if let Some(p) = a.memory {
        let m = MemoryReport::from_json(&std::fs::read_to_string(input_path(Some(p), "memory")?)?)?;
        text.push_str(&format!(
            "\n## memory ({} transport)\n{:<8} {:<12} {:>12} {:>12} {:>8}\n",
            m.transport.name(),
            "worker",
            "roles",
            "peak B",
            "bound B",
            "events"
        ));
        for w in &m.workers {
            text.push_str(&format!(
                "{:<8} {:<12} {:>12} {:>12} {:>8}\n",
                w.id,
                w.roles.join("+"),
                w.peak_bytes,
                w.bound_bytes,
                w.event_count
            ));
        }
        text.push_str(&format!(
            "baseline {} B, max worker peak {} B ({:.1}%)\n",
            m.baseline_peak_bytes,
            m.max_worker_peak_bytes,
            100.0 * m.peak_ratio
        ));
    }
    if let Some(p) = a.eval {
        let e: eval::EvalReport = serde_json::from_str(&std::fs::read_to_string(input_path(Some(p), "eval")?)?)?;
        text.push_str(&format!(
            "\n## eval ({} samples)\nfp loss {:.6e}  quant loss {:.6e}  gap {:.6e}  relative {:.4e}\n",
            e.samples, e.end_to_end.fp_loss, e.end_to_end.quant_loss, e.end_to_end.gap, e.end_to_end.relative_gap
        ));
        for l in &e.layers {
            text.push_str(&format!(
                "{:<12} replay {:.6e}  eq8 estimate {:+.4e}  measured {:+.4e}\n",
                l.name, l.replay_loss, l.first_order_estimate, l.first_order_measured
            ));
        }
    }
    match a.out {
        Some(p) => write_atomic(&p, text.as_bytes())?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Runs a parsed command, writing human output to `out`.
pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenModel(a) => gen_model(a, &file, out),
        Command::GenCalib(a) => gen_calib(a, &file, out),
        Command::Calibrate(a) => cmd_calibrate(a, &file, out),
        Command::DistCalibrate(a) => cmd_dist_calibrate(a, &file, out),
        Command::Quantize(a) => cmd_quantize(a, &file, out),
        Command::Eval(a) => cmd_eval(a, &file, out),
        Command::Heatmap(a) => cmd_heatmap(a, &file, out),
        Command::Report(a) => cmd_report(a, &file, out),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    match execute(cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            config::exit_code(&e)
        }
    }
}
