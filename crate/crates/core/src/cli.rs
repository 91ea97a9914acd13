//! `nap` command-line front end.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for data errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{channel_stats, score_histogram, write_channel_stats_csv, write_histogram_csv, DEFAULT_MIN_MEAN};
use crate::baselines::{
    ash_score, calibrate, knn_score, react_score, AshVariant, CalibrationConfig, CalibrationStats, ClassifierHead,
    DiceHead, DiceMask, DEFAULT_ASH_KEEP_PERCENT, DEFAULT_BANK_SIZE, DEFAULT_DICE_SPARSITY, DEFAULT_KNN_K,
    DEFAULT_REACT_PERCENTILE,
};
use crate::combine::{combine_geometric, combine_multilayer, CombineConfig, DEFAULT_FLOOR};
use crate::csv_io::{format_sig17, read_scores, write_scores};
use crate::metrics::{evaluate, ScoreSet, DEFAULT_TPR};
use crate::scoring::{
    energy_score, msp_score, nap_former_score, nap_score, ActivationTensor, AttentionVector, ClsSelfAttention,
    NapConfig, DEFAULT_EPSILON,
};
use crate::synth::{generate, SynthConfig};
use crate::tensor_io::{load_manifest, Dataset, Label, SampleRecord, ATTENTION_LAYER, DEFAULT_LAYER};
use crate::tuning::{tune_w, TuneConfig, TuneInput, DEFAULT_GRID_POINTS, DEFAULT_ITERS};
use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

/// Environment variable capping the worker pool size.
pub const THREADS_ENV: &str = "NAP_THREADS";

#[derive(Debug, Parser)]
#[command(name = "nap", version, about = "Activation-prior OOD scoring and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic fixture.
    Synth(SynthArgs),
    /// Score every sample of a manifest.
    Score(ScoreArgs),
    /// FPR/AUROC report for ID vs OOD score files.
    Eval(EvalArgs),
    /// Pick the fusion weight w on pseudo-OOD scores.
    Tune(TuneArgs),
    /// Export plot data.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    n_id: usize,
    #[arg(long, default_value_t = 500)]
    n_ood: usize,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    #[arg(long, default_value_t = 8)]
    height: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 8.0)]
    spike_mean: f64,
    #[arg(long, default_value_t = 1.0)]
    spike_sd: f64,
    #[arg(long, default_value_t = 0.2)]
    noise_hi_id: f64,
    /// Defaults to the bound that matches ID channel means.
    #[arg(long)]
    noise_hi_ood: Option<f64>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    k_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Nap,
    Energy,
    Msp,
    React,
    Ash,
    Dice,
    Knn,
    Former,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CombineWith {
    Nap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AshVariantArg {
    Prune,
    Scale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DiceMaskArg {
    PerClass,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LabelArg {
    Id,
    Ood,
    PseudoOod,
}

impl From<LabelArg> for Label {
    fn from(l: LabelArg) -> Self {
        match l {
            LabelArg::Id => Label::Id,
            LabelArg::Ood => Label::Ood,
            LabelArg::PseudoOod => Label::PseudoOod,
        }
    }
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum)]
    method: Method,
    /// Fuse the method's score with the NAP score.
    #[arg(long, value_enum, requires = "w")]
    combine_with: Option<CombineWith>,
    /// Fusion weight on the base score, in [0, 1].
    #[arg(long, requires = "combine_with")]
    w: Option<f64>,
    /// Activation layer(s) for NAP; several layers multiply their scores.
    /// For `former`, the attention tensor tag.
    #[arg(long)]
    layer: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    /// Floor applied to non-positive scores before fusion.
    #[arg(long, default_value_t = DEFAULT_FLOOR)]
    floor: f64,
    /// Only score samples with this label.
    #[arg(long, value_enum)]
    label: Option<LabelArg>,
    /// Manifest whose ID samples calibrate react/dice/knn. Defaults to the
    /// ID samples of --manifest.
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_REACT_PERCENTILE)]
    react_percentile: f64,
    #[arg(long, default_value_t = DEFAULT_ASH_KEEP_PERCENT)]
    ash_keep: f64,
    #[arg(long, value_enum, default_value = "scale")]
    ash_variant: AshVariantArg,
    #[arg(long, default_value_t = DEFAULT_DICE_SPARSITY)]
    dice_sparsity: f64,
    #[arg(long, value_enum, default_value = "per-class")]
    dice_mask: DiceMaskArg,
    #[arg(long, default_value_t = DEFAULT_KNN_K)]
    knn_k: usize,
    #[arg(long, default_value_t = DEFAULT_BANK_SIZE)]
    bank_size: usize,
    /// Leave the cls token's self-attention out of the `former` max.
    #[arg(long)]
    exclude_cls: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    id: PathBuf,
    #[arg(long)]
    ood: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TPR)]
    tpr: f64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the ROC points as `fpr,tpr` CSV.
    #[arg(long)]
    roc: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TuneArgs {
    #[arg(long)]
    id_base: PathBuf,
    #[arg(long)]
    id_nap: PathBuf,
    #[arg(long)]
    pseudo_base: PathBuf,
    #[arg(long)]
    pseudo_nap: PathBuf,
    /// Name recorded in the output.
    #[arg(long, default_value = "base")]
    method: String,
    #[arg(long, default_value_t = DEFAULT_ITERS)]
    iters: usize,
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    grid_points: usize,
    #[arg(long, default_value_t = DEFAULT_FLOOR)]
    floor: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum AnalyzeCommand {
    /// Per-(sample, channel) mean and max activation.
    ChannelStats {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = DEFAULT_LAYER)]
        layer: String,
        #[arg(long, default_value_t = DEFAULT_MIN_MEAN)]
        min_mean: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Equal-width histogram of a score file.
    Hist {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = 50)]
        bins: usize,
        /// Defaults to the smallest score.
        #[arg(long)]
        lo: Option<f64>,
        /// Defaults to the largest score.
        #[arg(long)]
        hi: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Data(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = thread_pool().and_then(|pool| match pool {
        Some(pool) => pool.install(|| dispatch(cli.command)),
        None => dispatch(cli.command),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

fn thread_pool() -> CliResult<Option<rayon::ThreadPool>> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| usage(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map(Some)
        .map_err(|e| usage(format!("cannot build thread pool: {e}")))
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Score(a) => cmd_score(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Tune(a) => cmd_tune(a),
        Command::Analyze(a) => cmd_analyze(a),
    }
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    let cfg = SynthConfig {
        n_id: a.n_id,
        n_ood: a.n_ood,
        channels: a.channels,
        height: a.height,
        width: a.width,
        spike_mean: a.spike_mean,
        spike_sd: a.spike_sd,
        noise_hi_id: a.noise_hi_id,
        noise_hi_ood: a.noise_hi_ood,
        seed: a.seed,
        k_classes: a.k_classes,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let path = generate(&cfg, &a.out)?;
    println!("{}", path.display());
    Ok(())
}

/// Everything a per-sample scorer needs, prepared once.
enum Base {
    Nap,
    Former(ClsSelfAttention),
    Energy,
    Msp,
    React(ClassifierHead, CalibrationStats),
    Ash(ClassifierHead, f64, AshVariant),
    Dice(DiceHead),
    Knn(CalibrationStats, usize),
}

struct Scorer {
    base: Base,
    layers: Vec<String>,
    nap: NapConfig,
    combine: Option<CombineConfig>,
}

fn feature_of(r: &SampleRecord) -> crate::Result<&[f32]> {
    r.feature
        .as_deref()
        .ok_or_else(|| Error::Manifest(format!("sample {} has no pooled feature", r.sample_id)))
}

impl Scorer {
    fn nap_score(&self, r: &SampleRecord) -> crate::Result<f64> {
        let per_layer = self
            .layers
            .iter()
            .map(|tag| {
                let t = r.activations.get(tag).ok_or_else(|| {
                    Error::Manifest(format!("sample {} has no layer {tag:?}", r.sample_id))
                })?;
                nap_score(&ActivationTensor::from_tensor(t)?, &self.nap)
            })
            .collect::<crate::Result<Vec<_>>>()?;
        combine_multilayer(&per_layer)
    }

    fn base_score(&self, r: &SampleRecord) -> crate::Result<f64> {
        match &self.base {
            Base::Nap => self.nap_score(r),
            Base::Former(cls) => {
                let tag = &self.layers[0];
                let t = r.activations.get(tag).ok_or_else(|| {
                    Error::Manifest(format!("sample {} has no attention tensor {tag:?}", r.sample_id))
                })?;
                Ok(nap_former_score(&AttentionVector::from_tensor(t)?, *cls))
            }
            Base::Energy => energy_score(&r.logits),
            Base::Msp => msp_score(&r.logits),
            Base::React(head, stats) => react_score(feature_of(r)?, head, stats),
            Base::Ash(head, keep, variant) => ash_score(feature_of(r)?, head, *keep, *variant),
            Base::Dice(dice) => dice.score(feature_of(r)?),
            Base::Knn(stats, k) => knn_score(feature_of(r)?, stats, *k),
        }
    }

    fn score(&self, r: &SampleRecord) -> crate::Result<f64> {
        let base = self.base_score(r)?;
        match &self.combine {
            Some(cfg) => combine_geometric(base, self.nap_score(r)?, cfg),
            None => Ok(base),
        }
    }
}

fn require_head(ds: &Dataset) -> CliResult<ClassifierHead> {
    ds.head
        .clone()
        .ok_or_else(|| CliError::Data(Error::Manifest("manifest has no classifier head".into())))
}

fn cmd_score(a: ScoreArgs) -> CliResult<()> {
    let nap = NapConfig::new(a.epsilon).map_err(|e| usage(e.to_string()))?;
    let combine = match (a.combine_with, a.w) {
        (Some(CombineWith::Nap), Some(w)) => Some(CombineConfig::new(w, a.floor).map_err(|e| usage(e.to_string()))?),
        (None, None) => None,
        _ => return Err(usage("--combine-with and --w go together")),
    };
    let layers = if a.layer.is_empty() {
        let default = if a.method == Method::Former {
            ATTENTION_LAYER
        } else {
            DEFAULT_LAYER
        };
        vec![default.to_string()]
    } else {
        a.layer.clone()
    };
    if a.method == Method::Former && combine.is_some() {
        return Err(usage("--method former cannot be fused with NAP; the attention tag and NAP layer would collide"));
    }
    if a.method == Method::Former && layers.len() != 1 {
        return Err(usage("--method former takes exactly one --layer"));
    }
    if !(0.0..1.0).contains(&a.dice_sparsity) {
        return Err(usage("--dice-sparsity must lie in [0, 1)"));
    }
    if !(a.ash_keep > 0.0 && a.ash_keep <= 100.0) {
        return Err(usage("--ash-keep must lie in (0, 100]"));
    }
    if !(a.react_percentile > 0.0 && a.react_percentile < 100.0) {
        return Err(usage("--react-percentile must lie in (0, 100)"));
    }
    if a.knn_k == 0 || a.bank_size == 0 {
        return Err(usage("--knn-k and --bank-size must be >= 1"));
    }

    let ds = load_manifest(&a.manifest)?;
    let needs_calibration = matches!(a.method, Method::React | Method::Dice | Method::Knn);
    let stats = if needs_calibration {
        let head = require_head(&ds)?;
        let cfg = CalibrationConfig {
            react_percentile: a.react_percentile,
            bank_size: a.bank_size,
        };
        let stats = match &a.calib {
            Some(p) => calibrate(&load_manifest(p)?, &head, &cfg)?,
            None => calibrate(&ds, &head, &cfg)?,
        };
        Some(stats)
    } else {
        None
    };

    let base = match a.method {
        Method::Nap => Base::Nap,
        Method::Former => Base::Former(if a.exclude_cls {
            ClsSelfAttention::Exclude
        } else {
            ClsSelfAttention::Include
        }),
        Method::Energy => Base::Energy,
        Method::Msp => Base::Msp,
        Method::React => Base::React(require_head(&ds)?, stats.expect("calibrated")),
        Method::Ash => {
            let variant = match a.ash_variant {
                AshVariantArg::Prune => AshVariant::Prune,
                AshVariantArg::Scale => AshVariant::Scale,
            };
            Base::Ash(require_head(&ds)?, a.ash_keep, variant)
        }
        Method::Dice => {
            let mask = match a.dice_mask {
                DiceMaskArg::PerClass => DiceMask::PerClass,
                DiceMaskArg::Global => DiceMask::Global,
            };
            let stats = stats.expect("calibrated");
            Base::Dice(DiceHead::new(&require_head(&ds)?, &stats, a.dice_sparsity, mask)?)
        }
        Method::Knn => Base::Knn(stats.expect("calibrated"), a.knn_k),
    };
    let scorer = Scorer {
        base,
        layers,
        nap,
        combine,
    };

    let label = a.label.map(Label::from);
    let selected: Vec<&SampleRecord> = ds
        .records
        .iter()
        .filter(|r| label.is_none_or(|l| r.label == l))
        .collect();
    let scored: Vec<crate::Result<(String, f64)>> = selected
        .par_iter()
        .map(|r| scorer.score(r).map(|s| (r.sample_id.clone(), s)))
        .collect();
    let scores = scored.into_iter().collect::<crate::Result<Vec<_>>>()?;
    write_scores(&a.out, &scores)?;
    println!("scored {} samples -> {}", scores.len(), a.out.display());
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Data(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    if !(a.tpr > 0.0 && a.tpr <= 1.0) {
        return Err(usage("--tpr must lie in (0, 1]"));
    }
    let set = ScoreSet::new(read_scores(&a.id)?, read_scores(&a.ood)?);
    let report = evaluate(&set, a.tpr)?;
    write_json(&a.out, &report)?;
    if let Some(roc) = &a.roc {
        let mut text = String::from("fpr,tpr\n");
        for (f, t) in &report.roc_points {
            text.push_str(&format!("{},{}\n", format_sig17(*f), format_sig17(*t)));
        }
        fs::write(roc, text).map_err(|e| CliError::Data(Error::Io {
            path: roc.clone(),
            source: e,
        }))?;
    }
    println!(
        "auroc={} fpr@{}={} n_id={} n_ood={}",
        format_sig17(report.auroc),
        a.tpr,
        format_sig17(report.fpr95),
        report.n_id,
        report.n_ood
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct TuneOutput<'a> {
    method: &'a str,
    w: f64,
    auroc: f64,
}

fn cmd_tune(a: TuneArgs) -> CliResult<()> {
    if a.iters < 1 || a.grid_points < 3 {
        return Err(usage("--iters must be >= 1 and --grid-points >= 3"));
    }
    if !(a.floor > 0.0) {
        return Err(usage("--floor must be > 0"));
    }
    let inp = TuneInput::from_named(
        &read_scores(&a.id_base)?,
        &read_scores(&a.id_nap)?,
        &read_scores(&a.pseudo_base)?,
        &read_scores(&a.pseudo_nap)?,
    )?;
    let cfg = TuneConfig {
        iters: a.iters,
        grid_points: a.grid_points,
        floor: a.floor,
    };
    let r = tune_w(&inp, &cfg)?;
    write_json(
        &a.out,
        &TuneOutput {
            method: &a.method,
            w: r.w,
            auroc: r.auroc,
        },
    )?;
    println!("{}: w={} auroc={}", a.method, format_sig17(r.w), format_sig17(r.auroc));
    Ok(())
}

fn cmd_analyze(cmd: AnalyzeCommand) -> CliResult<()> {
    match cmd {
        AnalyzeCommand::ChannelStats {
            manifest,
            layer,
            min_mean,
            out,
        } => {
            let ds = load_manifest(&manifest)?;
            let rows = channel_stats(&ds, &layer, min_mean)?;
            write_channel_stats_csv(&out, &rows)?;
            println!("{} rows -> {}", rows.len(), out.display());
        }
        AnalyzeCommand::Hist {
            scores,
            bins,
            lo,
            hi,
            out,
        } => {
            if bins == 0 {
                return Err(usage("--bins must be >= 1"));
            }
            let values: Vec<f64> = read_scores(&scores)?.into_iter().map(|p| p.1).collect();
            let lo = lo.or_else(|| values.iter().copied().reduce(f64::min)).unwrap_or(0.0);
            let hi = hi.or_else(|| values.iter().copied().reduce(f64::max)).unwrap_or(1.0);
            if !(lo < hi) {
                return Err(usage(format!("histogram range needs lo < hi, got ({lo}, {hi})")));
            }
            let h = score_histogram(&values, bins, (lo, hi))?;
            write_histogram_csv(&out, &h)?;
            println!(
                "{} in range, {} below, {} above -> {}",
                h.in_range(),
                h.below,
                h.above,
                out.display()
            );
        }
    }
    Ok(())
}
