//! Command-line surface of the `tps` binary.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{self, render_table, time_adapt, SynthSpec};
use crate::engine::{bongard_adapt, run_dataset, EngineConfig, SupportSet, Summary};
use crate::error::{Result, TpsError};
use crate::gradcheck::{run_suite, DEFAULT_STEP, DEFAULT_THRESHOLD};
use crate::io::manifest::LoadedManifest;
use crate::io::predictions::{read_predictions, write_record, PredictionRecord};
use crate::io::tpse::read_tpse;
use crate::optim::{OptimConfig, OptimizerKind};
use crate::prototypes::{pool_macro, pool_micro, save_prototypes};
use crate::transforms::{ParamInit, TransformKind};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "tps", version, about = "Test-time prototype shifting over cached embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pool the manifest's prompt groups into a prototype file.
    Pool(PoolArgs),
    /// Adapt to every sample in a manifest and write predictions.
    Adapt(AdaptArgs),
    /// Score a predictions file against manifest labels.
    Eval(EvalArgs),
    /// Binary support-set adaptation.
    Bongard(BongardArgs),
    /// Time single-sample adaptation across label-set sizes.
    Bench(BenchArgs),
    /// Write a synthetic domain-shift dataset.
    Synth(SynthArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PoolMode {
    Micro,
    Macro,
}

#[derive(Debug, Args)]
pub struct PoolArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = PoolMode::Micro)]
    pub mode: PoolMode,
    /// Output prototype file; defaults to the manifest's prototype_file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    /// lr 5e-3
    Default,
    /// lr 1e-3
    CrossDataset,
}

#[derive(Debug, Clone, Args)]
pub struct EngineArgs {
    #[arg(long, default_value = "shift")]
    pub transform: TransformKind,
    /// Learning rate; overrides the profile default.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub steps: usize,
    /// Fraction of views kept for the marginal entropy.
    #[arg(long, default_value_t = 0.1)]
    pub rho: f64,
    #[arg(long, default_value_t = 64)]
    pub views: usize,
    #[arg(long, default_value_t = 100.0)]
    pub logit_scale: f64,
    #[arg(long, default_value = "adamw")]
    pub optimizer: OptimizerKind,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Profile::Default)]
    pub profile: Profile,
}

impl EngineArgs {
    pub fn to_config(&self) -> Result<EngineConfig> {
        let lr = self.lr.unwrap_or(match self.profile {
            Profile::Default => 5e-3,
            Profile::CrossDataset => 1e-3,
        });
        let cfg = EngineConfig {
            logit_scale: self.logit_scale,
            selection_ratio: self.rho,
            n_views: self.views,
            steps: self.steps,
            transform: self.transform,
            param_init: ParamInit::default(),
            optim: OptimConfig {
                kind: self.optimizer,
                lr,
                weight_decay: self.weight_decay,
                ..OptimConfig::default()
            },
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Prototype file; defaults to the manifest's prototype_file.
    #[arg(long)]
    pub prototypes: Option<PathBuf>,
    #[command(flatten)]
    pub engine: EngineArgs,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    /// Predictions file (JSON lines); the summary goes to <out>.summary.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub predictions: PathBuf,
}

#[derive(Debug, Args)]
pub struct BongardArgs {
    /// TPSE files with 13 rows each: 6 positives, 6 negatives, then the
    /// query. Without any, synthetic separable trials are run.
    #[arg(long)]
    pub support: Vec<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    /// Norm of the per-embedding noise in synthetic trials.
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    #[arg(long, default_value_t = 64)]
    pub steps: usize,
    #[arg(long, default_value_t = 5e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 100.0)]
    pub logit_scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "10,100,1000")]
    pub classes: Vec<usize>,
    #[arg(long, default_value_t = 512)]
    pub dim: usize,
    #[arg(long, default_value_t = 64)]
    pub views: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Machine-readable results (JSON lines).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 25)]
    pub samples_per_class: usize,
    #[arg(long, default_value_t = 0.5)]
    pub global_shift: f64,
    #[arg(long, default_value_t = 0.0)]
    pub class_shift: f64,
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    #[arg(long, default_value_t = 64)]
    pub views: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    pub step: f64,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
}

fn summary_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".summary.json");
    PathBuf::from(s)
}

fn json_line<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("serializable value")
}

fn cmd_pool(args: &PoolArgs) -> Result<i32> {
    let lm = LoadedManifest::load(&args.manifest, false)?;
    let groups = lm.load_prompt_groups()?;
    let set = match args.mode {
        PoolMode::Micro => pool_micro(&groups)?,
        PoolMode::Macro => pool_macro(&groups)?,
    };
    let out = args.out.clone().unwrap_or_else(|| lm.prototype_path());
    save_prototypes(&set, &out)?;
    println!(
        "pooled {} groups into {} prototypes ({:?}) -> {}",
        groups.len(),
        set.num_classes(),
        args.mode,
        out.display()
    );
    Ok(EXIT_OK)
}

fn cmd_adapt(args: &AdaptArgs) -> Result<i32> {
    let cfg = args.engine.to_config()?;
    let lm = LoadedManifest::load(&args.manifest, args.prototypes.is_none())?;
    let protos = lm.load_prototypes(args.prototypes.as_deref())?;
    let names = protos.class_names().to_vec();
    let file = File::create(&args.out).map_err(|e| TpsError::io(&args.out, e))?;
    let mut writer = BufWriter::new(file);
    let summary = run_dataset(&protos, lm.batches(), &cfg, args.workers, |p| {
        write_record(&mut writer, &PredictionRecord::new(p, &names), &args.out)
    })?;
    writer.flush().map_err(|e| TpsError::io(&args.out, e))?;
    write_summary(&summary_path(&args.out), &summary, &cfg)?;
    println!("{}", json_line(&summary));
    Ok(EXIT_OK)
}

fn write_summary(path: &Path, summary: &Summary, cfg: &EngineConfig) -> Result<()> {
    let doc = serde_json::json!({ "summary": summary, "config": cfg });
    let text = serde_json::to_string_pretty(&doc).expect("serializable summary");
    std::fs::write(path, text + "\n").map_err(|e| TpsError::io(path, e))
}

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<i32> {
    let lm = LoadedManifest::load(&args.manifest, false)?;
    let preds = read_predictions(&args.predictions)?;
    let labels: std::collections::HashMap<&str, usize> = lm
        .manifest
        .samples
        .iter()
        .filter_map(|s| s.label.map(|y| (s.sample_id.as_str(), y)))
        .collect();
    let (mut scored, mut correct, mut zs_correct, mut fallbacks) = (0, 0, 0, 0);
    for p in &preds {
        fallbacks += usize::from(p.fallback);
        if let Some(&y) = labels.get(p.sample_id.as_str()) {
            scored += 1;
            correct += usize::from(p.predicted_class == y);
            zs_correct += usize::from(p.zero_shot_class == y);
        }
    }
    println!("{:<12} {:>10}", "metric", "value");
    println!("{:<12} {:>10}", "predictions", preds.len());
    println!("{:<12} {:>10}", "labelled", scored);
    println!("{:<12} {:>10.2}", "accuracy", pct(correct, scored));
    println!("{:<12} {:>10.2}", "zero_shot", pct(zs_correct, scored));
    println!("{:<12} {:>10}", "fallbacks", fallbacks);
    Ok(EXIT_OK)
}

fn support_from_file(path: &Path) -> Result<SupportSet> {
    let m = read_tpse(path)?;
    if m.rows() != 13 {
        return Err(TpsError::Format {
            path: path.to_path_buf(),
            offset: 8,
            msg: format!("support file needs 13 rows (6 positive, 6 negative, 1 query), has {}", m.rows()),
        });
    }
    let pos = m.select_rows(&(0..6).collect::<Vec<_>>());
    let neg = m.select_rows(&(6..12).collect::<Vec<_>>());
    SupportSet::new(pos, neg, m.row(12).to_vec())
}

fn cmd_bongard(args: &BongardArgs) -> Result<i32> {
    let cfg = EngineConfig {
        logit_scale: args.logit_scale,
        optim: OptimConfig::adamw(args.lr),
        ..EngineConfig::default()
    };
    if !args.support.is_empty() {
        for (i, path) in args.support.iter().enumerate() {
            let mut s = support_from_file(path)?;
            s.steps = args.steps;
            let out = bongard_adapt(&s, &cfg, args.seed.wrapping_add(i as u64))?;
            println!("{}", serde_json::json!({ "file": path, "outcome": out }));
        }
        return Ok(EXIT_OK);
    }
    let mut correct = 0usize;
    let mut fallbacks = 0usize;
    for t in 0..args.trials {
        let (mut support, truth) = bench::bongard_trial(args.dim, args.noise, args.seed.wrapping_add(t as u64))?;
        support.steps = args.steps;
        let out = bongard_adapt(&support, &cfg, args.seed.wrapping_add(t as u64))?;
        correct += usize::from(out.prediction == truth);
        fallbacks += usize::from(out.fallback);
    }
    println!(
        "bongard synthetic: {} trials, accuracy {:.2}, fallbacks {}",
        args.trials,
        pct(correct, args.trials),
        fallbacks
    );
    Ok(EXIT_OK)
}

fn cmd_bench(args: &BenchArgs) -> Result<i32> {
    let cfg = EngineConfig {
        seed: args.seed,
        ..EngineConfig::default()
    };
    let results = time_adapt(&args.classes, args.dim, args.views, args.repeats, &cfg)?;
    print!("{}", render_table(&results));
    if let Some(out) = &args.out {
        let mut text = String::new();
        for r in &results {
            text.push_str(&json_line(r));
            text.push('\n');
        }
        std::fs::write(out, text).map_err(|e| TpsError::io(out, e))?;
    }
    Ok(EXIT_OK)
}

fn cmd_synth(args: &SynthArgs) -> Result<i32> {
    let spec = SynthSpec {
        classes: args.classes,
        dim: args.dim,
        samples_per_class: args.samples_per_class,
        prototype_seed: args.seed,
        global_shift_norm: args.global_shift,
        class_shift_norm: args.class_shift,
        view_noise_sigma: args.sigma,
        n_views: args.views,
    };
    let path = bench::write_synth(&spec, &args.out)?;
    println!("wrote {} samples -> {}", spec.total_samples(), path.display());
    Ok(EXIT_OK)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<i32> {
    let report = run_suite(args.trials, args.seed, args.step)?;
    for kind in TransformKind::ALL {
        let worst = report
            .trials
            .iter()
            .filter(|t| t.kind == kind)
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max);
        println!("{:<14} max rel. err {:.3e}", kind.name(), worst);
    }
    println!("trials {} max rel. err {:.3e} (threshold {:.1e})", report.trials.len(), report.max_rel_error, args.threshold);
    if report.max_rel_error < args.threshold {
        Ok(EXIT_OK)
    } else {
        if let Some(w) = report.worst() {
            eprintln!("worst trial: {}", json_line(w));
        }
        Ok(EXIT_NUMERIC)
    }
}

pub fn execute(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Pool(a) => cmd_pool(a),
        Command::Adapt(a) => cmd_adapt(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bongard(a) => cmd_bongard(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
