//! Command-line front end for training, evaluation, attention export,
//! gradient checks and synthetic data generation.
//!
//! `train` writes, under the configured output directory:
//!
//! ```text
//! config.toml                      effective run config
//! folds/<subject>/checkpoint.bin   trained weights
//! folds/<subject>/train.log        one line per epoch
//! folds/<subject>/report.toml      held-out evaluation
//! pooled_report.toml               all folds pooled
//! ```
//!
//! Nothing written depends on wall-clock time, so a config and seed replay
//! byte for byte.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mmnet_core::ca::AttentionMode;
use mmnet_core::config::{DatasetSpec, RunConfig};
use mmnet_core::data::{self, augment::eval_view, Dataset, SynthSpec};
use mmnet_core::export::export_maps;
use mmnet_core::gradcheck::{model_check, op_suite, FD_TOLERANCE};
use mmnet_core::metrics::EvalReport;
use mmnet_core::rng::derive_seed_str;
use mmnet_core::train::{evaluate, run_loso};
use mmnet_core::{Checkpoint, Error, MmNet, ModelConfig, OpKind, Rng, Tensor};

#[derive(Debug, Parser)]
#[command(name = "mmnet", version, about = "Micro-expression recognition from onset/apex frame pairs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print a run config (defaults plus overrides) as TOML.
    Config {
        #[command(flatten)]
        overrides: Overrides,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Leave-one-subject-out training and evaluation.
    Train {
        /// Run config; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint on the configured dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Only samples of this subject.
        #[arg(long)]
        subject: Option<String>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the attention maps of one sample as PGM plus PPM overlays.
    ExportAttn {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample id from the dataset.
        #[arg(long)]
        sample: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Finite-difference gradient checks of every op and of the full model.
    Gradcheck {
        /// Random instances per op.
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Parameter coordinates probed on the full model.
        #[arg(long, default_value_t = 10)]
        params: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Skip the full-model check.
        #[arg(long)]
        ops_only: bool,
        /// Scale the backward rule of this op (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Render a synthetic dataset to disk.
    Synth {
        #[arg(long, default_value_t = 3)]
        subjects: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 1)]
        samples_per: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Config fields settable from the command line.
#[derive(Debug, Default, Clone, Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<String>,
    /// Dataset index file (switches off synthetic data).
    #[arg(long, conflicts_with = "synth_subjects")]
    pub index: Option<String>,
    #[arg(long)]
    pub synth_subjects: Option<usize>,
    #[arg(long)]
    pub synth_classes: Option<usize>,
    #[arg(long)]
    pub synth_samples_per: Option<usize>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Plain residual blocks instead of continuous attention.
    #[arg(long)]
    pub no_ca: bool,
    /// Drop the position-calibration subbranch.
    #[arg(long)]
    pub no_pc: bool,
    #[arg(long, value_parser = parse_mode)]
    pub attn_mode: Option<AttentionMode>,
    #[arg(long)]
    pub num_layers: Option<usize>,
    #[arg(long)]
    pub num_heads: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
}

fn parse_mode(s: &str) -> Result<AttentionMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        macro_rules! set {
            ($src:ident => $dst:expr) => {
                if let Some(v) = self.$src.clone() {
                    $dst = v;
                }
            };
        }
        set!(seed => cfg.seed);
        set!(output_dir => cfg.output_dir);
        if let Some(path) = &self.index {
            cfg.dataset = DatasetSpec::Index { path: path.clone() };
        }
        if self.synth_subjects.is_some() || self.synth_classes.is_some() || self.synth_samples_per.is_some() {
            let (s0, c0, n0) = match cfg.dataset {
                DatasetSpec::Synth { subjects, classes, samples_per } => (subjects, classes, samples_per),
                DatasetSpec::Index { .. } => (3, cfg.model.num_classes, 1),
            };
            let classes = self.synth_classes.unwrap_or(c0);
            cfg.dataset = DatasetSpec::Synth {
                subjects: self.synth_subjects.unwrap_or(s0),
                classes,
                samples_per: self.synth_samples_per.unwrap_or(n0),
            };
            if self.num_classes.is_none() {
                cfg.model.num_classes = classes;
            }
        }
        set!(num_classes => cfg.model.num_classes);
        if self.no_ca {
            cfg.model.use_ca = false;
        }
        if self.no_pc {
            cfg.model.use_pc = false;
        }
        set!(attn_mode => cfg.model.attn_mode);
        set!(num_layers => cfg.model.num_layers);
        set!(num_heads => cfg.model.num_heads);
        set!(lr0 => cfg.train.lr0);
        if self.lr_decay.is_some() {
            cfg.train.lr_decay = self.lr_decay;
        }
        set!(epochs => cfg.train.epochs);
        set!(batch_size => cfg.train.batch_size);
        set!(weight_decay => cfg.train.weight_decay);
    }
}

/// Exit code for each failure class.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Label { .. } | Error::Protocol(_) => 2,
        Error::Io(_) | Error::Format(_) => 3,
        Error::NonFinite(_) => 4,
        _ => 1,
    }
}

/// Seed of the synthetic renderer for a run.
pub fn data_seed(cfg: &RunConfig) -> u64 {
    derive_seed_str(cfg.seed, "data")
}

pub fn load_dataset(cfg: &RunConfig) -> mmnet_core::Result<Dataset> {
    let ds = match &cfg.dataset {
        DatasetSpec::Synth { subjects, classes, samples_per } => data::synth_dataset(
            SynthSpec { subjects: *subjects, classes: *classes, samples_per: *samples_per },
            data_seed(cfg),
        )?,
        DatasetSpec::Index { path } => data::load_index(Path::new(path))?,
    };
    if ds.num_classes() != cfg.model.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model is configured for {}",
            ds.num_classes(),
            cfg.model.num_classes
        )));
    }
    Ok(ds)
}

fn load_model(config: &Path, checkpoint: &Path) -> mmnet_core::Result<(RunConfig, MmNet)> {
    let cfg = RunConfig::load(config)?;
    let model = Checkpoint::load(checkpoint)?.restore(&cfg)?;
    Ok((cfg, model))
}

fn sanitize(subject: &str) -> String {
    subject.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Run a full LOSO training job and write its artifacts. Returns the pooled report.
pub fn train(cfg: &RunConfig, progress: impl FnMut(&str)) -> mmnet_core::Result<EvalReport> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let out = PathBuf::from(&cfg.output_dir);
    std::fs::create_dir_all(out.join("folds"))?;
    cfg.save(&out.join("config.toml"))?;
    let digest = cfg.digest_hex();
    let progress = std::cell::RefCell::new(progress);
    let pooled = run_loso(
        &ds,
        cfg,
        |subject, rec| (progress.borrow_mut())(&format!("[{subject}] {rec}")),
        |fold| {
            let dir = out.join("folds").join(sanitize(&fold.subject));
            std::fs::create_dir_all(&dir)?;
            Checkpoint::from_model(&fold.model, cfg).save(&dir.join("checkpoint.bin"))?;
            let mut log = String::new();
            for r in &fold.log {
                writeln!(log, "{r}").unwrap();
            }
            std::fs::write(dir.join("train.log"), log)?;
            let scope = format!("fold {}", fold.subject);
            let report = EvalReport::new(&fold.confusion, &ds.class_names, &digest, &scope);
            std::fs::write(dir.join("report.toml"), report.to_toml())?;
            (progress.borrow_mut())(&format!("[{}] held-out accuracy {:.4}", fold.subject, report.accuracy));
            Ok(())
        },
    )?;
    let report = EvalReport::new(&pooled, &ds.class_names, &digest, "pooled");
    std::fs::write(out.join("pooled_report.toml"), report.to_toml())?;
    Ok(report)
}

/// Run one parsed command. Human-readable output goes to `stdout`,
/// diagnostics to `stderr`.
pub fn run(cli: Cli, stdout: &mut dyn std::io::Write, stderr: &mut dyn std::io::Write) -> mmnet_core::Result<()> {
    match cli.command {
        Command::Config { overrides, out } => {
            let mut cfg = RunConfig::default();
            overrides.apply(&mut cfg);
            cfg.validate()?;
            match out {
                Some(p) => cfg.save(&p)?,
                None => write!(stdout, "{}", cfg.to_toml())?,
            }
        }
        Command::Train { config, overrides } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            overrides.apply(&mut cfg);
            let report = train(&cfg, |line| {
                let _ = writeln!(stderr, "{line}");
            })?;
            writeln!(
                stdout,
                "pooled accuracy {:.4} macro-F1 {:.4} over {} samples",
                report.accuracy, report.macro_f1, report.samples
            )?;
        }
        Command::Eval { config, checkpoint, subject, out } => {
            let (cfg, model) = load_model(&config, &checkpoint)?;
            let ds = load_dataset(&cfg)?;
            let (ds, scope) = match subject {
                Some(s) => {
                    let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.samples[i].subject == s).collect();
                    if idx.is_empty() {
                        return Err(Error::Config(format!("no samples for subject `{s}`")));
                    }
                    (ds.subset(&idx), format!("subject {s}"))
                }
                None => (ds, "dataset".to_string()),
            };
            let cm = evaluate(&model, &ds, &cfg)?;
            let report = EvalReport::new(&cm, &ds.class_names, &cfg.digest_hex(), &scope);
            match out {
                Some(p) => std::fs::write(p, report.to_toml())?,
                None => write!(stdout, "{}", report.to_toml())?,
            }
        }
        Command::ExportAttn { config, checkpoint, sample, out_dir } => {
            let (cfg, model) = load_model(&config, &checkpoint)?;
            let ds = load_dataset(&cfg)?;
            let pair = ds
                .samples
                .iter()
                .find(|s| s.id == sample)
                .ok_or_else(|| Error::Config(format!("no sample with id `{sample}`")))?;
            let (onset, apex) = eval_view(pair)?;
            let (pred, maps) = model.predict(&onset, &apex)?;
            if maps.is_empty() {
                return Err(Error::Config("model has no attention blocks (use_ca = false)".into()));
            }
            let summary = export_maps(&out_dir, &maps, &apex)?;
            for b in &summary.constant_maps {
                writeln!(stderr, "warning: block {b} attention map is constant; written as all zeros")?;
            }
            for f in &summary.files {
                writeln!(stdout, "{}", f.display())?;
            }
            writeln!(stdout, "predicted class {} ({})", pred.predicted_class, ds.class_names[pred.predicted_class])?;
        }
        Command::Gradcheck { instances, params, seed, ops_only, corrupt } => {
            let corrupt = match corrupt {
                Some(name) => Some(
                    OpKind::from_name(&name).ok_or_else(|| Error::Config(format!("unknown op `{name}`")))?,
                ),
                None => None,
            };
            let mut failed = Vec::new();
            for r in op_suite(instances, seed, corrupt)? {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                writeln!(stdout, "{:<18} instances={:<3} worst={:.3e} {verdict}", r.name, r.instances, r.worst)?;
                if !r.passed() {
                    failed.push(r.name);
                }
            }
            if !ops_only {
                let mut rng = Rng::new(seed).child(&[0x6d6f64656c]);
                let model = MmNet::new(ModelConfig::default(), &mut rng)?;
                let onset = Tensor::rand_uniform(vec![3, 224, 224], 0.0, 1.0, &mut rng)?;
                let apex = Tensor::rand_uniform(vec![3, 224, 224], 0.0, 1.0, &mut rng)?;
                let label = rng.below(model.config().num_classes);
                let probes = model_check(&model, &onset, &apex, label, params, &mut rng, corrupt)?;
                let worst = probes.iter().map(|p| p.error()).fold(0.0, f64::max);
                for p in &probes {
                    writeln!(
                        stdout,
                        "model {}[{}] analytic={:.6e} numeric={:.6e} err={:.3e}",
                        p.name,
                        p.element,
                        p.analytic,
                        p.numeric,
                        p.error()
                    )?;
                }
                let verdict = if worst < FD_TOLERANCE { "ok" } else { "FAIL" };
                writeln!(stdout, "{:<18} probes={:<3} worst={worst:.3e} {verdict}", "model", probes.len())?;
                if worst >= FD_TOLERANCE {
                    failed.push("model".into());
                }
            }
            if !failed.is_empty() {
                return Err(Error::Protocol(format!("gradient check failed for: {}", failed.join(", "))));
            }
        }
        Command::Synth { subjects, classes, samples_per, seed, out } => {
            let ds = data::synth_dataset(SynthSpec { subjects, classes, samples_per }, seed)?;
            data::write_index(&out, &ds)?;
            writeln!(stdout, "{} samples written to {}", ds.len(), out.join("index.txt").display())?;
        }
    }
    Ok(())
}
